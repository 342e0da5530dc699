"""Per-parameter task sensitivity from one scoring sweep over training samples.

The score of a scalar parameter accumulates the squared gradient of the task
loss, one term per scored sample. That is the first-order estimate of how much
a single descent step on that parameter alone would reduce the loss, up to a
constant step-size factor that cancels under ranking.

The strict reference mode processes one sample per pass (batch=1). Larger
batches accumulate batch_size * (mean-batch gradient)^2 per pass instead,
which is cheaper and preserves rankings but is not numerically identical.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container
from .models import ParameterStore, loss_on_batch
from .tensor import Tape, Tensor, backward

__all__ = [
    "Dataset",
    "SensitivityMap",
    "compute_sensitivity",
    "compute_importance_magnitude",
    "merge_maps",
]

_META_SAMPLES = "samples_used"


@dataclass
class Dataset:
    """Feature sequences with integer labels; first train_count rows train."""

    features: np.ndarray
    labels: np.ndarray
    task_id: int = 0
    train_count: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 3:
            raise ValueError(f"features must be [num, seq, dim], got shape {self.features.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError(
                f"labels shape {self.labels.shape} does not match features {self.features.shape}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            self.labels = self.labels.astype(np.int64)
        if self.train_count is not None and not 0 < self.train_count <= self.num:
            raise ValueError(f"train_count {self.train_count} outside 1..{self.num}")

    @property
    def num(self) -> int:
        return self.features.shape[0]

    @property
    def seq(self) -> int:
        return self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def train_view(self) -> "Dataset":
        n = self.num if self.train_count is None else self.train_count
        return Dataset(self.features[:n], self.labels[:n], self.task_id, None)

    def val_view(self) -> "Dataset":
        if self.train_count is None or self.train_count == self.num:
            return Dataset(self.features, self.labels, self.task_id, None)
        return Dataset(self.features[self.train_count :], self.labels[self.train_count :], self.task_id, None)

    def save(self, path) -> None:
        meta = [float(self.task_id), float(-1 if self.train_count is None else self.train_count)]
        container.save_tensors(
            path,
            {
                "features": self.features,
                "labels": self.labels.astype(np.float32),
                "meta": np.asarray(meta, dtype=np.float32),
            },
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        arrays = container.load_tensors(path)
        for key in ("features", "labels", "meta"):
            if key not in arrays:
                raise ValueError(f"{path}: dataset container is missing {key!r}")
        task_id = int(arrays["meta"][0])
        tc = int(arrays["meta"][1])
        return cls(
            arrays["features"],
            arrays["labels"].astype(np.int64),
            task_id=task_id,
            train_count=None if tc < 0 else tc,
        )


@dataclass
class SensitivityMap:
    """Accumulated scores, shape-aligned with the parameter registry."""

    scores: dict[str, np.ndarray]
    samples_used: int
    criterion: str = field(default="grad_sq")

    @property
    def total_entries(self) -> int:
        return sum(a.size for a in self.scores.values())

    def aligned_with(self, other: "SensitivityMap") -> bool:
        if set(self.scores) != set(other.scores):
            return False
        return all(self.scores[n].shape == other.scores[n].shape for n in self.scores)

    def save(self, path) -> None:
        arrays = {f"{name}.sens": a for name, a in self.scores.items()}
        arrays[_META_SAMPLES] = np.asarray([self.samples_used], dtype=np.float32)
        container.save_tensors(path, arrays)

    @classmethod
    def load(cls, path) -> "SensitivityMap":
        arrays = container.load_tensors(path)
        if _META_SAMPLES not in arrays:
            raise ValueError(f"{path}: sensitivity container is missing {_META_SAMPLES!r}")
        scores = {
            name[: -len(".sens")]: a.astype(np.float64)
            for name, a in arrays.items()
            if name.endswith(".sens")
        }
        return cls(scores=scores, samples_used=int(arrays[_META_SAMPLES][0]))

    @classmethod
    def zeros_like(cls, store: ParameterStore) -> "SensitivityMap":
        return cls(
            scores={name: np.zeros(t.shape, dtype=np.float64) for name, t in store.items()},
            samples_used=0,
        )


def _default_loss(store, features: Tensor, labels) -> Tensor:
    return loss_on_batch(store, features, labels)


def _score_range(store, data, start, stop, batch, increment, loss_fn):
    acc = {name: np.zeros(t.shape, dtype=np.float64) for name, t in store.items()}
    i = start
    while i < stop:
        b = min(batch, stop - i)
        feats = Tensor(data.features[i : i + b])
        labels = data.labels[i : i + b]
        tape = Tape()
        with tape:
            loss = loss_fn(store, feats, labels)
        if not np.isfinite(loss.data):
            if b == 1:
                raise RuntimeError(f"non-finite loss at sample {i}")
            for j in range(i, i + b):
                with Tape() as probe:
                    lj = loss_fn(store, Tensor(data.features[j : j + 1]), data.labels[j : j + 1])
                if not np.isfinite(lj.data):
                    raise RuntimeError(f"non-finite loss at sample {j}")
            raise RuntimeError(f"non-finite loss in samples {i}..{i + b - 1}")
        snap = backward(loss, tape)
        for name, t in store.items():
            g = snap.wrt(t).astype(np.float64)
            acc[name] += increment(g, t.data) * b
        i += b
    return acc


def _score(store, data, samples, batch, increment, workers, loss_fn):
    if not isinstance(samples, int) or samples <= 0:
        raise ValueError(f"samples must be a positive int, got {samples!r}")
    if samples > data.num:
        raise ValueError(f"cannot score {samples} samples, dataset has {data.num}")
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    loss_fn = loss_fn or _default_loss
    workers = max(1, int(workers))
    if workers == 1:
        acc = _score_range(store, data, 0, samples, batch, increment, loss_fn)
    else:
        # Fixed shard boundaries and merge order keep the result reproducible
        # for a given worker count; the store is shared read-only.
        bounds = np.linspace(0, samples, workers + 1, dtype=int)
        jobs = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            shards = list(
                pool.map(
                    lambda ab: _score_range(store, data, ab[0], ab[1], batch, increment, loss_fn),
                    jobs,
                )
            )
        acc = shards[0]
        for shard in shards[1:]:
            for name in acc:
                acc[name] += shard[name]
    return acc


def compute_sensitivity(
    store: ParameterStore,
    data: Dataset,
    samples: int = 800,
    batch: int = 1,
    surrogate: str = "sgd",
    workers: int = 1,
    loss_fn=None,
) -> SensitivityMap:
    """Accumulate per-parameter scores over the first `samples` rows of data.

    surrogate="sgd" scores squared gradients; "adamw" is the research variant
    that scores |gradient|, matching a first step of a fresh AdamW whose
    update direction is sign-like.
    """
    if surrogate == "sgd":
        increment = lambda g, w: g * g
    elif surrogate == "adamw":
        increment = lambda g, w: np.abs(g)
    else:
        raise ValueError(f"unknown surrogate {surrogate!r}")
    scores = _score(store, data, samples, batch, increment, workers, loss_fn)
    return SensitivityMap(scores=scores, samples_used=samples, criterion=f"grad_sq:{surrogate}")


def compute_importance_magnitude(
    store: ParameterStore,
    data: Dataset,
    samples: int = 800,
    batch: int = 1,
    workers: int = 1,
    loss_fn=None,
) -> SensitivityMap:
    """Contrast criterion: accumulate (gradient * weight)^2 per sample."""
    increment = lambda g, w: (g * w) ** 2
    scores = _score(store, data, samples, batch, increment, workers, loss_fn)
    return SensitivityMap(scores=scores, samples_used=samples, criterion="grad_weight_sq")


def merge_maps(a: SensitivityMap, b: SensitivityMap) -> SensitivityMap:
    """Entrywise sum of two shard maps; sample counts add."""
    if not a.aligned_with(b):
        raise ValueError("cannot merge sensitivity maps with different names or shapes")
    scores = {name: a.scores[name] + b.scores[name] for name in a.scores}
    return SensitivityMap(scores=scores, samples_used=a.samples_used + b.samples_used, criterion=a.criterion)
