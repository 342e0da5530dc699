"""Desk-scale backbones behind a flat, named parameter registry.

Registry grammar: "embed" and "head" for the input projection and classifier,
"block{i}.{role}" for per-block matrices with role in q/k/v/o/fc1/fc2, a
".bias" suffix for their bias vectors, and "block{i}.ln{1,2}.{scale,bias}"
for the layer norms. The mlp variant keeps only fc1/fc2 blocks plus the head
and consumes mean-pooled input features directly.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import container, tuners
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    softmax,
    transpose,
    truncated_normal,
)

__all__ = [
    "MATRIX_ROLES",
    "ModelConfig",
    "ParameterStore",
    "build",
    "forward",
    "loss_on_batch",
    "parse_name",
    "block_index",
    "is_bias_name",
    "is_structured_eligible",
]

MATRIX_ROLES = ("q", "k", "v", "o", "fc1", "fc2")

_BLOCK_RE = re.compile(r"^block(\d+)\.(.+)$")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "transformer"
    depth: int = 2
    width: int = 32
    heads: int = 2
    mlp_ratio: int = 2
    classes: int = 5
    seq: int = 4
    in_dim: int | None = None

    def __post_init__(self):
        if self.variant not in ("transformer", "mlp"):
            raise ValueError(f"unknown model variant {self.variant!r}")
        for field_name in ("depth", "width", "heads", "mlp_ratio", "classes", "seq"):
            v = getattr(self, field_name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"model config field {field_name} must be a positive int, got {v!r}")
        if self.variant == "transformer" and self.width % self.heads != 0:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.in_dim is not None and (not isinstance(self.in_dim, int) or self.in_dim < 1):
            raise ValueError(f"in_dim must be a positive int, got {self.in_dim!r}")
        if self.variant == "mlp" and self.in_dim not in (None, self.width):
            raise ValueError("mlp variant has no input projection, in_dim must equal width")

    @property
    def input_dim(self) -> int:
        return self.width if self.in_dim is None else self.in_dim


class ParameterStore:
    """Ordered name -> Tensor registry for one model instance."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        if name not in self._params:
            raise KeyError(f"unknown parameter {name!r}")
        return self._params[name]

    def get(self, name: str):
        return self._params.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    @property
    def total_params(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def state_bytes(self) -> dict[str, bytes]:
        return {name: t.data.tobytes() for name, t in self._params.items()}

    def named_grads(self, snapshot) -> dict[str, np.ndarray]:
        return {name: snapshot.wrt(t) for name, t in self._params.items()}

    def clone(self) -> "ParameterStore":
        twin = ParameterStore(self.config)
        for name, t in self._params.items():
            twin.add(name, t.data.copy())
        return twin

    def save(self, path) -> None:
        container.save_tensors(path, self.state_arrays())

    @classmethod
    def load(cls, path, config: ModelConfig) -> "ParameterStore":
        arrays = container.load_tensors(path)
        reference = build(config, seed=0)
        store = cls(config)
        for name, t in reference.items():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise ValueError(
                    f"checkpoint parameter {name!r} has shape {arrays[name].shape}, expected {t.shape}"
                )
            store.add(name, arrays[name])
        extras = [n for n in arrays if n not in store and not n.startswith("module.")]
        if extras:
            raise ValueError(f"checkpoint has unknown parameters {extras}")
        return store


def build(config: ModelConfig, seed: int) -> ParameterStore:
    """Create and initialise the registry; creation order is fixed."""
    rng = np.random.default_rng(seed)
    store = ParameterStore(config)
    d = config.width
    hidden = d * config.mlp_ratio

    def matrix(name, d_in, d_out):
        store.add(name, truncated_normal(rng, (d_in, d_out)))

    def bias(name, n):
        store.add(name, np.zeros(n, dtype=np.float32))

    if config.variant == "transformer":
        matrix("embed", config.input_dim, d)
        for i in range(config.depth):
            p = f"block{i}."
            store.add(p + "ln1.scale", np.ones(d, dtype=np.float32))
            bias(p + "ln1.bias", d)
            for role in ("q", "k", "v", "o"):
                matrix(p + role, d, d)
                bias(p + role + ".bias", d)
            store.add(p + "ln2.scale", np.ones(d, dtype=np.float32))
            bias(p + "ln2.bias", d)
            matrix(p + "fc1", d, hidden)
            bias(p + "fc1.bias", hidden)
            matrix(p + "fc2", hidden, d)
            bias(p + "fc2.bias", d)
    else:
        for i in range(config.depth):
            p = f"block{i}."
            matrix(p + "fc1", d, hidden)
            bias(p + "fc1.bias", hidden)
            matrix(p + "fc2", hidden, d)
            bias(p + "fc2.bias", d)
    matrix("head", d, config.classes)
    return store


def parse_name(name: str):
    """Return (block index or None, role or None, is_bias) for a registry name."""
    if name in ("embed", "head"):
        return None, name, False
    m = _BLOCK_RE.match(name)
    if not m:
        return None, None, name.endswith(".bias")
    rest = m.group(2)
    is_bias = rest.endswith(".bias")
    role = rest[: -len(".bias")] if is_bias else rest
    return int(m.group(1)), role, is_bias


def block_index(name: str):
    return parse_name(name)[0]


def is_bias_name(name: str) -> bool:
    return name.endswith(".bias")


def is_structured_eligible(name: str) -> bool:
    """Only the per-block matrices take structured modules; embed and norms do not."""
    block, role, is_bias = parse_name(name)
    return block is not None and not is_bias and role in MATRIX_ROLES


def _index_modules(store: ParameterStore, modules) -> dict:
    by_target: dict[str, object] = {}
    for m in modules:
        if m.target in by_target:
            raise ValueError(f"duplicate tune module for target {m.target!r}")
        if m.target not in store:
            raise ValueError(f"unknown tune target {m.target!r}")
        w = store[m.target]
        if w.ndim != 2:
            raise ValueError(f"tune target {m.target!r} is not a matrix, shape {w.shape}")
        by_target[m.target] = m
    return by_target


def _linear(store: ParameterStore, name: str, x: Tensor, mods: dict) -> Tensor:
    w = store[name]
    m = mods.get(name)
    if m is not None and m.kind == "lora":
        y = tuners.lora_forward(w, x, m)
    else:
        y = matmul(x, w)
    b = store.get(name + ".bias")
    if b is not None:
        y = add(y, b)
    if m is not None and m.kind == "adapter":
        y = tuners.adapter_forward(y, m)
    return y


def forward(store: ParameterStore, batch, modules=()) -> Tensor:
    """Logits for a [batch, seq, in_dim] feature block, tune modules applied."""
    cfg = store.config
    x_in = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x_in.ndim != 3 or x_in.shape[1] != cfg.seq or x_in.shape[2] != cfg.input_dim:
        raise ValueError(
            f"batch shape {x_in.shape} does not match (*, seq={cfg.seq}, in_dim={cfg.input_dim})"
        )
    mods = _index_modules(store, modules)
    n = x_in.shape[0]

    if cfg.variant == "mlp":
        x = mean(x_in, axis=1)
        for i in range(cfg.depth):
            p = f"block{i}."
            h = gelu(_linear(store, p + "fc1", x, mods))
            x = add(x, _linear(store, p + "fc2", h, mods))
        return matmul(x, store["head"])

    d, heads = cfg.width, cfg.heads
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)
    x = reshape(x_in, (n * cfg.seq, cfg.input_dim))
    x = _linear(store, "embed", x, mods)
    for i in range(cfg.depth):
        p = f"block{i}."
        h = layer_norm(x, store[p + "ln1.scale"], store[p + "ln1.bias"])
        q = _linear(store, p + "q", h, mods)
        k = _linear(store, p + "k", h, mods)
        v = _linear(store, p + "v", h, mods)
        q4 = transpose(reshape(q, (n, cfg.seq, heads, dk)), (0, 2, 1, 3))
        k4t = transpose(reshape(k, (n, cfg.seq, heads, dk)), (0, 2, 3, 1))
        v4 = transpose(reshape(v, (n, cfg.seq, heads, dk)), (0, 2, 1, 3))
        att = softmax(mul(matmul(q4, k4t), scale))
        ctx = reshape(transpose(matmul(att, v4), (0, 2, 1, 3)), (n * cfg.seq, d))
        x = add(x, _linear(store, p + "o", ctx, mods))
        h2 = layer_norm(x, store[p + "ln2.scale"], store[p + "ln2.bias"])
        f = gelu(_linear(store, p + "fc1", h2, mods))
        x = add(x, _linear(store, p + "fc2", f, mods))
    pooled = mean(reshape(x, (n, cfg.seq, d)), axis=1)
    return matmul(pooled, store["head"])


def loss_on_batch(store: ParameterStore, features, labels, modules=()) -> Tensor:
    """Mean cross entropy of the model on one feature/label batch."""
    return cross_entropy(forward(store, features, modules), labels)
