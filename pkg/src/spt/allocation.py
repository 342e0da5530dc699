"""Budgeted allocation: top-tau selection, masks, and structured-vs-masked gating.

A matrix whose count of selected connections reaches the threshold sigma gets
a structured module (the masked scalars are subsumed); any tensor with at
least one selected connection but below threshold keeps a binary mask; the
rest stay frozen. sigma under the default policy equals the structured
module's true parameter count, so a structured verdict never costs more
budget than the connections it replaces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .models import is_bias_name, is_structured_eligible
from .sensitivity import SensitivityMap

__all__ = [
    "Verdict",
    "AllocationPlan",
    "select_top_tau",
    "build_masks",
    "sigma_for",
    "module_param_count",
    "make_plan",
    "make_structured_only_plan",
    "frozen_plan",
    "resolve_budget",
]

SIGMA_POLICIES = ("module_param_count", "matrix_cost")
STRUCTURED_KINDS = ("lora", "adapter", "none")

MASK_SIDECAR_SUFFIX = ".masks"


def _shapes_of(source) -> dict[str, tuple]:
    if isinstance(source, SensitivityMap):
        return {name: a.shape for name, a in source.scores.items()}
    if hasattr(source, "items") and not isinstance(source, dict):
        return {name: t.shape for name, t in source.items()}
    return {name: np.asarray(a).shape for name, a in source.items()}


def select_top_tau(sens: SensitivityMap, tau: int, exclusions=frozenset()) -> list[tuple[str, int]]:
    """Exactly tau (name, flat index) connections with the largest scores.

    Ties break by tensor name ascending, then flat index ascending, which the
    stable sort gets for free from the concatenation order.
    """
    names = sorted(n for n in sens.scores if n not in exclusions)
    sizes = [sens.scores[n].size for n in names]
    total = sum(sizes)
    if not isinstance(tau, (int, np.integer)) or tau <= 0 or tau > total:
        raise ValueError(f"tau must be in 1..{total}, got {tau!r}")
    flat = np.concatenate([np.asarray(sens.scores[n], dtype=np.float64).ravel() for n in names])
    order = np.argsort(-flat, kind="stable")[:tau]
    bounds = np.cumsum([0] + sizes)
    out = []
    for pos in np.sort(order):
        j = int(np.searchsorted(bounds, pos, side="right")) - 1
        out.append((names[j], int(pos - bounds[j])))
    return out


def build_masks(connections, shapes_source) -> dict[str, np.ndarray]:
    """Binary masks over every tensor; popcounts sum to len(connections)."""
    shapes = _shapes_of(shapes_source)
    masks = {name: np.zeros(shape, dtype=np.uint8) for name, shape in shapes.items()}
    for name, idx in connections:
        if name not in masks:
            raise ValueError(f"connection references unknown tensor {name!r}")
        flat = masks[name].reshape(-1)
        if not 0 <= idx < flat.size:
            raise ValueError(f"connection index {idx} out of range for {name!r} ({flat.size} entries)")
        flat[idx] = 1
    return masks


def module_param_count(kind: str, d_in: int, d_out: int, rank: int) -> int:
    """Trainable scalars a structured module of this kind actually adds."""
    if kind == "lora":
        return rank * (d_in + d_out)
    if kind == "adapter":
        return 2 * rank * d_out + rank + d_out
    raise ValueError(f"unknown structured kind {kind!r}")


def sigma_for(kind: str, d_in: int, d_out: int, rank: int, policy: str = "module_param_count") -> int:
    """Connection-count threshold at which a matrix flips to structured."""
    if policy not in SIGMA_POLICIES:
        raise ValueError(f"unknown sigma policy {policy!r}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if policy == "matrix_cost":
        # Scales with the host matrix itself, not the module: for any rank
        # this exceeds the d_in*d_out entries, so the flip can never happen.
        return 2 * d_in * d_out * rank
    return module_param_count(kind, d_in, d_out, rank)


@dataclass
class Verdict:
    kind: str  # frozen | unstructured | structured
    sensitive_count: int = 0
    trainable: int = 0
    mask: np.ndarray | None = None
    structured_kind: str | None = None
    rank: int | None = None


@dataclass
class AllocationPlan:
    budget_tau: int
    structured_kind: str
    rank: int
    sigma_policy: str
    verdicts: dict[str, Verdict]
    head_params: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def total_trainable(self) -> int:
        return sum(v.trainable for v in self.verdicts.values())

    def tuned_params(self) -> int:
        return self.total_trainable + self.head_params

    def tuned_fraction(self, total_params: int) -> float:
        return self.tuned_params() / total_params

    def counts_by_kind(self) -> dict[str, int]:
        out = {"frozen": 0, "unstructured": 0, "structured": 0}
        for v in self.verdicts.values():
            out[v.kind] += 1
        return out

    def to_json_dict(self) -> dict:
        tensors = {}
        for name, v in self.verdicts.items():
            entry = {
                "verdict": v.kind,
                "sensitive_count": int(v.sensitive_count),
                "trainable": int(v.trainable),
            }
            if v.kind == "structured":
                entry["structured_kind"] = v.structured_kind
                entry["rank"] = int(v.rank)
            if v.mask is not None:
                entry["has_mask"] = True
            tensors[name] = entry
        return {
            "format": "spt-plan-v1",
            "budget_tau": int(self.budget_tau),
            "structured_kind": self.structured_kind,
            "rank": int(self.rank),
            "sigma_policy": self.sigma_policy,
            "head_params": int(self.head_params),
            "total_trainable": int(self.total_trainable),
            "warnings": list(self.warnings),
            "tensors": tensors,
        }

    def save(self, path) -> None:
        path = Path(path)
        doc = self.to_json_dict()
        masks = {f"{n}.mask": v.mask for n, v in self.verdicts.items() if v.mask is not None}
        doc["mask_sidecar"] = path.name + MASK_SIDECAR_SUFFIX if masks else None
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        if masks:
            container.save_tensors(path.parent / doc["mask_sidecar"], masks)

    @classmethod
    def load(cls, path) -> "AllocationPlan":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != "spt-plan-v1":
            raise ValueError(f"{path}: not a plan document")
        masks = {}
        if doc.get("mask_sidecar"):
            raw = container.load_tensors(path.parent / doc["mask_sidecar"])
            masks = {n[: -len(".mask")]: (a != 0).astype(np.uint8) for n, a in raw.items()}
        verdicts = {}
        for name, entry in doc["tensors"].items():
            verdicts[name] = Verdict(
                kind=entry["verdict"],
                sensitive_count=entry["sensitive_count"],
                trainable=entry["trainable"],
                mask=masks.get(name),
                structured_kind=entry.get("structured_kind"),
                rank=entry.get("rank"),
            )
        return cls(
            budget_tau=doc["budget_tau"],
            structured_kind=doc["structured_kind"],
            rank=doc["rank"],
            sigma_policy=doc["sigma_policy"],
            verdicts=verdicts,
            head_params=doc["head_params"],
            warnings=list(doc.get("warnings", [])),
        )


def _plan_exclusions(sens: SensitivityMap, exclude_bias: bool, extra=()) -> set[str]:
    out = {"head"} | set(extra)
    if exclude_bias:
        out |= {n for n in sens.scores if is_bias_name(n)}
    return out


def _structured_fits(name: str, shape, rank: int) -> bool:
    return (
        is_structured_eligible(name)
        and len(shape) == 2
        and rank <= min(shape) // 2
    )


def make_plan(
    sens: SensitivityMap,
    tau: int,
    structured_kind: str = "lora",
    rank: int = 8,
    policy: str = "module_param_count",
    exclude_bias: bool = False,
    extra_exclusions=(),
) -> AllocationPlan:
    """Gate every tensor into structured / unstructured / frozen under budget tau."""
    if structured_kind not in STRUCTURED_KINDS:
        raise ValueError(f"unknown structured kind {structured_kind!r}")
    if policy not in SIGMA_POLICIES:
        raise ValueError(f"unknown sigma policy {policy!r}")
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    exclusions = _plan_exclusions(sens, exclude_bias, extra_exclusions)
    selected = select_top_tau(sens, tau, exclusions)
    masks = build_masks(selected, sens)
    counts = {name: int(m.sum()) for name, m in masks.items()}

    warnings: list[str] = []
    verdicts: dict[str, Verdict] = {}
    for name, a in sens.scores.items():
        if name == "head":
            continue  # the head trains unconditionally, outside the plan
        count = counts.get(name, 0)
        if (
            structured_kind != "none"
            and name not in exclusions
            and _structured_fits(name, a.shape, rank)
        ):
            d_in, d_out = a.shape
            sigma = sigma_for(structured_kind, d_in, d_out, rank, policy)
            if sigma > d_in * d_out:
                warnings.append(
                    f"{name}: sigma {sigma} exceeds the {d_in}x{d_out} matrix, "
                    "threshold can never be met"
                )
            if count >= sigma:
                verdicts[name] = Verdict(
                    kind="structured",
                    sensitive_count=count,
                    trainable=module_param_count(structured_kind, d_in, d_out, rank),
                    structured_kind=structured_kind,
                    rank=rank,
                )
                continue
        if count > 0:
            verdicts[name] = Verdict(
                kind="unstructured", sensitive_count=count, trainable=count, mask=masks[name]
            )
        else:
            verdicts[name] = Verdict(kind="frozen")
    head_params = int(np.prod(sens.scores["head"].shape)) if "head" in sens.scores else 0
    return AllocationPlan(
        budget_tau=int(tau),
        structured_kind=structured_kind,
        rank=int(rank),
        sigma_policy=policy,
        verdicts=verdicts,
        head_params=head_params,
        warnings=warnings,
    )


def make_structured_only_plan(
    sens: SensitivityMap,
    tau: int,
    structured_kind: str = "lora",
    rank: int = 8,
    order: str = "sensitivity",
    seed: int = 0,
    exclude_bias: bool = False,
) -> AllocationPlan:
    """Place only structured modules, greedily, while they fit in tau.

    order="sensitivity" ranks matrices by their count of top-tau connections;
    order="random" shuffles the eligible matrices instead, for placement
    baselines at the same budget.
    """
    if structured_kind not in ("lora", "adapter"):
        raise ValueError(f"structured-only plan needs a structured kind, got {structured_kind!r}")
    exclusions = _plan_exclusions(sens, exclude_bias)
    selected = select_top_tau(sens, tau, exclusions)
    counts: dict[str, int] = {}
    for name, _ in selected:
        counts[name] = counts.get(name, 0) + 1

    eligible = [
        name
        for name in sorted(sens.scores)
        if name not in exclusions and _structured_fits(name, sens.scores[name].shape, rank)
    ]
    if order == "sensitivity":
        eligible.sort(key=lambda n: (-counts.get(n, 0), n))
    elif order == "random":
        rng = np.random.default_rng(seed)
        rng.shuffle(eligible)
    else:
        raise ValueError(f"unknown placement order {order!r}")

    budget = int(tau)
    verdicts: dict[str, Verdict] = {}
    chosen: set[str] = set()
    for name in eligible:
        d_in, d_out = sens.scores[name].shape
        cost = module_param_count(structured_kind, d_in, d_out, rank)
        if cost <= budget:
            budget -= cost
            chosen.add(name)
            verdicts[name] = Verdict(
                kind="structured",
                sensitive_count=counts.get(name, 0),
                trainable=cost,
                structured_kind=structured_kind,
                rank=rank,
            )
    for name in sens.scores:
        if name != "head" and name not in verdicts:
            verdicts[name] = Verdict(kind="frozen", sensitive_count=counts.get(name, 0))
    ordered = {name: verdicts[name] for name in sens.scores if name in verdicts}
    head_params = int(np.prod(sens.scores["head"].shape)) if "head" in sens.scores else 0
    return AllocationPlan(
        budget_tau=int(tau),
        structured_kind=structured_kind,
        rank=int(rank),
        sigma_policy="module_param_count",
        verdicts=ordered,
        head_params=head_params,
        warnings=[],
    )


def frozen_plan(sens: SensitivityMap) -> AllocationPlan:
    """Everything frozen; only the always-trainable head moves."""
    verdicts = {name: Verdict(kind="frozen") for name in sens.scores if name != "head"}
    head_params = int(np.prod(sens.scores["head"].shape)) if "head" in sens.scores else 0
    return AllocationPlan(
        budget_tau=0,
        structured_kind="none",
        rank=1,
        sigma_policy="module_param_count",
        verdicts=verdicts,
        head_params=head_params,
    )


def resolve_budget(budget, total_params: int) -> int:
    """A fraction in (0, 1) maps to round(budget * total); >= 1 is a raw count."""
    if isinstance(budget, (int, np.integer)) and budget >= 1:
        return int(budget)
    b = float(budget)
    if not 0.0 < b:
        raise ValueError(f"budget must be positive, got {budget!r}")
    if b < 1.0:
        return max(1, int(round(b * total_params)))
    if b != int(b):
        raise ValueError(f"budget {budget!r} is neither a fraction below 1 nor a whole count")
    return int(b)
