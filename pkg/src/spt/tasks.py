"""Synthetic transfer pairs and a kernel two-sample statistic for the gap.

A task draws Gaussian class clusters whose means sit on the unit sphere. The
target domain is the source rotated by theta inside one random plane, with an
optional cyclic relabeling of the clusters; theta moves the feature
distributions apart monotonically while leaving the geometry intact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sensitivity import Dataset

__all__ = ["TaskSpec", "generate_task", "rotation_matrix", "DomainGapReport", "compute_mmd"]


@dataclass(frozen=True)
class TaskSpec:
    classes: int = 5
    dim: int = 16
    seq: int = 4
    theta: float = 0.0
    permute: bool = False
    noise: float = 0.35
    train: int = 800
    val: int = 200

    def __post_init__(self):
        for field_name in ("classes", "dim", "seq", "train", "val"):
            v = getattr(self, field_name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"task field {field_name} must be a positive int, got {v!r}")
        if self.classes < 2:
            raise ValueError("a classification task needs at least 2 classes")
        if self.dim < 2:
            raise ValueError("rotation needs at least 2 feature dimensions")
        if not 0.0 <= self.theta <= np.pi:
            raise ValueError(f"theta must lie in [0, pi], got {self.theta}")
        if self.noise < 0:
            raise ValueError(f"noise must be non-negative, got {self.noise}")


def rotation_matrix(dim: int, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by theta in a random 2-D plane, identity elsewhere."""
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    v = rng.standard_normal(dim)
    v -= u * (u @ v)
    v /= np.linalg.norm(v)
    eye = np.eye(dim)
    return (
        eye
        + np.sin(theta) * (np.outer(v, u) - np.outer(u, v))
        + (np.cos(theta) - 1.0) * (np.outer(u, u) + np.outer(v, v))
    )


def generate_task(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Source and target datasets, each train+val rows with train_count set."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((spec.classes, spec.dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    rot = rotation_matrix(spec.dim, spec.theta, rng)

    def draw(n: int):
        labels = rng.integers(0, spec.classes, size=n)
        feats = means[labels][:, None, :] + spec.noise * rng.standard_normal((n, spec.seq, spec.dim))
        return feats.astype(np.float32), labels.astype(np.int64)

    n = spec.train + spec.val
    src_feats, src_labels = draw(n)
    tgt_feats, tgt_labels = draw(n)
    tgt_feats = (tgt_feats @ rot.T).astype(np.float32)
    if spec.permute:
        # Cyclic shift: a fixed derangement, so no class keeps its old label.
        tgt_labels = (tgt_labels + 1) % spec.classes
    source = Dataset(src_feats, src_labels, task_id=0, train_count=spec.train)
    target = Dataset(tgt_feats, tgt_labels, task_id=1, train_count=spec.train)
    return source, target


@dataclass
class DomainGapReport:
    mmd: float
    bandwidth: float
    n_a: int
    n_b: int

    def to_json_dict(self) -> dict:
        return {
            "mmd": self.mmd,
            "bandwidth": self.bandwidth,
            "n_a": self.n_a,
            "n_b": self.n_b,
        }


def _pairwise_sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x * x).sum(axis=1)[:, None]
    yy = (y * y).sum(axis=1)[None, :]
    d2 = xx + yy - 2.0 * (x @ y.T)
    return np.maximum(d2, 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled samples (distinct pairs)."""
    pooled = np.vstack([a, b])
    d2 = _pairwise_sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(np.sqrt(d2[iu])))
    return med if med > 0 else 1.0


def compute_mmd(a, b) -> DomainGapReport:
    """Unbiased RBF-kernel MMD^2 between two sample matrices, clamped at 0."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError(f"mmd expects 2-D sample matrices, got {x.shape} and {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"sample dimensions disagree: {x.shape[1]} vs {y.shape[1]}")
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError(f"mmd needs at least 2 samples per side, got {m} and {n}")
    bw = median_bandwidth(x, y)
    gamma = 1.0 / (2.0 * bw * bw)
    kxx = np.exp(-gamma * _pairwise_sq_dists(x, x))
    kyy = np.exp(-gamma * _pairwise_sq_dists(y, y))
    kxy = np.exp(-gamma * _pairwise_sq_dists(x, y))
    sum_xx = kxx.sum() - np.trace(kxx)
    sum_yy = kyy.sum() - np.trace(kyy)
    mmd2 = sum_xx / (m * (m - 1)) + sum_yy / (n * (n - 1)) - 2.0 * kxy.mean()
    return DomainGapReport(mmd=max(0.0, float(mmd2)), bandwidth=bw, n_a=m, n_b=n)
