"""Training loops, evaluation, and placement-pattern reports.

Fine-tuning touches only what the plan names: masked entries of unstructured
tensors, the structured modules' own parameters, and the always-trainable
classifier head. Everything else keeps its exact bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .allocation import AllocationPlan, select_top_tau
from .models import (
    MATRIX_ROLES,
    ParameterStore,
    block_index,
    forward,
    is_bias_name,
    parse_name,
)
from .optim import AdamW, AdamWConfig, cosine_lr
from .sensitivity import Dataset, SensitivityMap
from .tensor import Tape, Tensor, backward, cross_entropy
from .tuners import modules_from_plan

__all__ = [
    "TrainConfig",
    "evaluate",
    "pretrain",
    "finetune",
    "PatternReport",
    "report_patterns",
]


@dataclass
class TrainConfig:
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 100
    schedule: str = "cosine"
    seed: int = 0
    eval_every: int = 1
    stop_acc: float | None = None

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        # lr == 0 is allowed so a no-op run stays expressible in tests.
        if self.lr < 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be non-negative, got {self.epochs}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")


def evaluate(store: ParameterStore, data: Dataset, modules=()) -> tuple[float, float]:
    """(top-1 accuracy, mean loss) without recording a tape."""
    logits = forward(store, Tensor(data.features), modules)
    loss = cross_entropy(logits, data.labels)
    pred = logits.data.argmax(axis=1)
    acc = float((pred == data.labels).mean())
    return acc, float(loss.data)


def _lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return cosine_lr(cfg.lr, step, total_steps)


def _run_loop(
    store: ParameterStore,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    slots,
    modules=(),
    max_steps: int | None = None,
    phase: str = "train",
):
    opt = AdamW(AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    for tensor, mask in slots:
        opt.add_param(tensor, mask)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = (train.num + cfg.batch - 1) // cfg.batch
    total_steps = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(train.num)
        for lo in range(0, train.num, cfg.batch):
            if step >= total_steps:
                break
            take = perm[lo : lo + cfg.batch]
            feats = Tensor(train.features[take])
            labels = train.labels[take]
            tape = Tape()
            with tape:
                loss = cross_entropy(forward(store, feats, modules), labels)
            if not np.isfinite(loss.data):
                raise RuntimeError(f"non-finite loss at step {step}")
            snap = backward(loss, tape)
            opt.step(snap, lr=_lr_at(cfg, step, total_steps))
            step += 1
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1 or step >= total_steps:
            acc, vloss = evaluate(store, val, modules)
            records.append(
                {
                    "phase": phase,
                    "epoch": epoch + 1,
                    "step": step,
                    "lr": _lr_at(cfg, max(step - 1, 0), total_steps),
                    "val_top1": acc,
                    "val_loss": vloss,
                }
            )
            if cfg.stop_acc is not None and acc >= cfg.stop_acc:
                break
        if step >= total_steps:
            break
    if not records:
        acc, vloss = evaluate(store, val, modules)
        records.append(
            {"phase": phase, "epoch": 0, "step": 0, "lr": cfg.lr, "val_top1": acc, "val_loss": vloss}
        )
    return records


def pretrain(store: ParameterStore, source: Dataset, cfg: TrainConfig) -> list[dict]:
    """Full training of every parameter on the source task; mutates the store."""
    slots = [(t, None) for _, t in store.items()]
    return _run_loop(
        store,
        source.train_view(),
        source.val_view(),
        cfg,
        slots,
        phase="pretrain",
    )


def _check_plan_matches(plan: AllocationPlan, store: ParameterStore) -> None:
    for name, verdict in plan.verdicts.items():
        if name not in store:
            raise ValueError(f"plan names unknown tensor {name!r}")
        if verdict.mask is not None and verdict.mask.shape != store[name].shape:
            raise ValueError(
                f"plan mask for {name!r} has shape {verdict.mask.shape}, "
                f"parameter is {store[name].shape}"
            )


def finetune(
    store: ParameterStore,
    target: Dataset,
    plan: AllocationPlan,
    cfg: TrainConfig,
    nonlinearity: str = "relu",
    max_steps: int | None = None,
):
    """Fine-tune under a plan; returns (modules, records). Mutates the store."""
    _check_plan_matches(plan, store)
    modules = modules_from_plan(plan, store, seed=cfg.seed, nonlinearity=nonlinearity)
    slots: list = [(store["head"], None)]
    for name, verdict in plan.verdicts.items():
        if verdict.kind == "unstructured":
            slots.append((store[name], verdict.mask))
    for m in modules:
        for _, t in m.parameters():
            slots.append((t, None))

    trainable_ids = {id(t) for t, _ in slots}
    frozen = [t for _, t in store.items() if id(t) not in trainable_ids]
    masked = {
        name for name, v in plan.verdicts.items() if v.kind == "unstructured"
    }
    # Skip gradient work for fully frozen tensors; masked ones still need grads.
    for t in frozen:
        t.requires_grad = False
    for name in masked:
        store[name].requires_grad = True
    try:
        records = _run_loop(
            store,
            target.train_view(),
            target.val_view(),
            cfg,
            slots,
            modules=modules,
            max_steps=max_steps,
            phase="finetune",
        )
    finally:
        for t in frozen:
            t.requires_grad = True
    tuned = plan.tuned_params()
    total = store.total_params
    for r in records:
        r["tuned_params"] = tuned
        r["total_params"] = total
        r["tuned_fraction"] = tuned / total
    return modules, records


@dataclass
class PatternReport:
    """Where the selected connections live, by block and by matrix role."""

    tau: int
    block_counts: dict[int, int]
    role_counts: dict[str, int]
    block_share: dict[int, float] = field(default_factory=dict)
    role_share: dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "tau": self.tau,
            "block_counts": {str(k): v for k, v in sorted(self.block_counts.items())},
            "block_share": {str(k): v for k, v in sorted(self.block_share.items())},
            "role_counts": dict(self.role_counts),
            "role_share": dict(self.role_share),
        }


def report_patterns(sens: SensitivityMap, tau: int, exclude_bias: bool = False) -> PatternReport:
    """Block and role proportions of the top-tau connection set."""
    exclusions = {"head"}
    if exclude_bias:
        exclusions |= {n for n in sens.scores if is_bias_name(n)}
    selected = select_top_tau(sens, tau, exclusions)

    blocks = sorted({b for n in sens.scores if (b := block_index(n)) is not None})
    block_counts = {b: 0 for b in blocks}
    role_counts = {r: 0 for r in MATRIX_ROLES}
    for name, _ in selected:
        block, role, is_bias = parse_name(name)
        if block is not None:
            block_counts[block] += 1
            if not is_bias and role in role_counts:
                role_counts[role] += 1
    block_total = sum(block_counts.values())
    role_total = sum(role_counts.values())
    block_share = {
        b: (c / block_total if block_total else 0.0) for b, c in block_counts.items()
    }
    role_share = {r: (c / role_total if role_total else 0.0) for r, c in role_counts.items()}
    return PatternReport(
        tau=tau,
        block_counts=block_counts,
        role_counts=role_counts,
        block_share=block_share,
        role_share=role_share,
    )
