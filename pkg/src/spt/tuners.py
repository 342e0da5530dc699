"""Tuning primitives: low-rank side branches, bottleneck adapters, masked updates.

Both structured module kinds start with an exactly zero contribution to the
forward pass (their up-projections are zero-initialised), so attaching fresh
modules never changes the backbone's outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add, gelu, matmul, relu, truncated_normal

__all__ = [
    "LoraModule",
    "AdapterModule",
    "init_lora",
    "init_adapter",
    "lora_forward",
    "merge_lora",
    "adapter_forward",
    "apply_masked_update",
    "modules_from_plan",
    "module_state_arrays",
    "load_module_arrays",
]

_ADAPTER_FIELDS = ("w_down", "b_down", "w_up", "b_up")
_LORA_FIELDS = ("w_down", "w_up")


def _check_rank(rank: int, d_in: int, d_out: int) -> None:
    limit = min(d_in, d_out) // 2
    if rank < 1 or rank > limit:
        raise ValueError(f"rank {rank} outside 1..{limit} for a {d_in}x{d_out} matrix")


@dataclass
class LoraModule:
    """Additive low-rank branch x @ w_down @ w_up next to a frozen matrix."""

    target: str
    rank: int
    w_down: Tensor
    w_up: Tensor
    kind: str = field(default="lora", init=False)

    def parameters(self):
        return [("w_down", self.w_down), ("w_up", self.w_up)]

    @property
    def param_count(self) -> int:
        return self.w_down.size + self.w_up.size


@dataclass
class AdapterModule:
    """Bottleneck applied to a matrix's output: h + up(act(down(h)))."""

    target: str
    rank: int
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor
    nonlinearity: str = "relu"
    kind: str = field(default="adapter", init=False)

    def parameters(self):
        return [
            ("w_down", self.w_down),
            ("b_down", self.b_down),
            ("w_up", self.w_up),
            ("b_up", self.b_up),
        ]

    @property
    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())


def init_lora(target: str, d_in: int, d_out: int, rank: int, rng: np.random.Generator) -> LoraModule:
    _check_rank(rank, d_in, d_out)
    w_down = Tensor(truncated_normal(rng, (d_in, rank)), requires_grad=True)
    w_up = Tensor(np.zeros((rank, d_out), dtype=np.float32), requires_grad=True)
    return LoraModule(target=target, rank=rank, w_down=w_down, w_up=w_up)


def init_adapter(
    target: str,
    d_out: int,
    rank: int,
    rng: np.random.Generator,
    nonlinearity: str = "relu",
) -> AdapterModule:
    if nonlinearity not in ("relu", "gelu"):
        raise ValueError(f"unknown adapter nonlinearity {nonlinearity!r}")
    _check_rank(rank, d_out, d_out)
    w_down = Tensor(truncated_normal(rng, (d_out, rank)), requires_grad=True)
    b_down = Tensor(np.zeros(rank, dtype=np.float32), requires_grad=True)
    w_up = Tensor(np.zeros((rank, d_out), dtype=np.float32), requires_grad=True)
    b_up = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)
    return AdapterModule(
        target=target, rank=rank, w_down=w_down, b_down=b_down, w_up=w_up, b_up=b_up,
        nonlinearity=nonlinearity,
    )


def lora_forward(w: Tensor, x: Tensor, module: LoraModule) -> Tensor:
    """x @ (w + w_down @ w_up), evaluated factored so w stays untouched."""
    if module.w_down.shape[0] != w.shape[0] or module.w_up.shape[1] != w.shape[1]:
        raise ValueError(
            f"module {module.target!r} shapes {module.w_down.shape}/{module.w_up.shape}"
            f" do not fit matrix {w.shape}"
        )
    return add(matmul(x, w), matmul(matmul(x, module.w_down), module.w_up))


def merge_lora(w: Tensor, module: LoraModule) -> np.ndarray:
    """Fold the branch into a dense matrix; the module is disposable after."""
    if module.w_down.shape[0] != w.shape[0] or module.w_up.shape[1] != w.shape[1]:
        raise ValueError(
            f"module {module.target!r} shapes {module.w_down.shape}/{module.w_up.shape}"
            f" do not fit matrix {w.shape}"
        )
    return w.data + module.w_down.data @ module.w_up.data


def adapter_forward(h: Tensor, module: AdapterModule) -> Tensor:
    if module.w_down.shape[0] != h.shape[-1]:
        raise ValueError(
            f"module {module.target!r} width {module.w_down.shape[0]} does not match h {h.shape}"
        )
    z = add(matmul(h, module.w_down), module.b_down)
    z = relu(z) if module.nonlinearity == "relu" else gelu(z)
    return add(h, add(matmul(z, module.w_up), module.b_up))


def apply_masked_update(w: Tensor, grad: np.ndarray, mask, opt) -> None:
    """One optimizer step on w restricted to mask==1 entries."""
    grad = np.asarray(grad, dtype=np.float32)
    if grad.shape != w.data.shape:
        raise ValueError(f"grad shape {grad.shape} does not match parameter {w.data.shape}")
    opt.update(w.data, grad, mask=mask)


def modules_from_plan(plan, store, seed: int, nonlinearity: str = "relu") -> list:
    """Instantiate the plan's structured verdicts in sorted-name order."""
    rng = np.random.default_rng(seed)
    modules = []
    for name in sorted(plan.verdicts):
        verdict = plan.verdicts[name]
        if verdict.kind != "structured":
            continue
        if name not in store:
            raise ValueError(f"plan references unknown tune target {name!r}")
        w = store[name]
        if w.ndim != 2:
            raise ValueError(f"tune target {name!r} is not a matrix, shape {w.shape}")
        d_in, d_out = w.shape
        if verdict.structured_kind == "lora":
            modules.append(init_lora(name, d_in, d_out, verdict.rank, rng))
        elif verdict.structured_kind == "adapter":
            modules.append(init_adapter(name, d_out, verdict.rank, rng, nonlinearity))
        else:
            raise ValueError(f"unknown structured kind {verdict.structured_kind!r}")
    return modules


def module_state_arrays(modules) -> dict[str, np.ndarray]:
    """Flatten modules for the checkpoint container."""
    out: dict[str, np.ndarray] = {}
    for m in modules:
        for fname, t in m.parameters():
            out[f"module.{m.target}.{fname}"] = t.data
    return out


def load_module_arrays(modules, arrays: dict[str, np.ndarray]) -> None:
    """Restore module tensors from checkpoint entries, strict on shape."""
    for m in modules:
        for fname, t in m.parameters():
            key = f"module.{m.target}.{fname}"
            if key not in arrays:
                raise ValueError(f"checkpoint is missing module entry {key!r}")
            a = arrays[key]
            if a.shape != t.data.shape:
                raise ValueError(f"{key!r} shape {a.shape} does not match module {t.data.shape}")
            t.data = a.astype(np.float32)
