import numpy as np
import pytest

from spt.models import ModelConfig, ParameterStore, build
from spt.sensitivity import Dataset, SensitivityMap


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def small_config(**kw) -> ModelConfig:
    base = dict(variant="transformer", depth=2, width=16, heads=2, mlp_ratio=2, classes=4, seq=3, in_dim=12)
    base.update(kw)
    return ModelConfig(**base)


def small_store(seed=0, **kw) -> ParameterStore:
    return build(small_config(**kw), seed)


def random_dataset(rng, num=32, seq=3, dim=12, classes=4, train_count=None) -> Dataset:
    feats = rng.normal(0, 1, (num, seq, dim)).astype(np.float32)
    labels = rng.integers(0, classes, size=num)
    return Dataset(feats, labels, train_count=train_count)


def random_map_for(store, rng) -> SensitivityMap:
    scores = {name: rng.exponential(1.0, t.shape) for name, t in store.items()}
    return SensitivityMap(scores=scores, samples_used=1)


def grammar_map(rng, depth=2, width=4, classes=3, with_embed=True, scale=1.0) -> SensitivityMap:
    """Synthetic sensitivity map over registry-grammar names, no model needed."""
    scores = {}
    if with_embed:
        scores["embed"] = rng.exponential(scale, (width, width))
    hidden = 2 * width
    for i in range(depth):
        p = f"block{i}."
        for role in ("q", "k", "v", "o"):
            scores[p + role] = rng.exponential(scale, (width, width))
            scores[p + role + ".bias"] = rng.exponential(scale, (width,))
        scores[p + "fc1"] = rng.exponential(scale, (width, hidden))
        scores[p + "fc1.bias"] = rng.exponential(scale, (hidden,))
        scores[p + "fc2"] = rng.exponential(scale, (hidden, width))
        scores[p + "fc2.bias"] = rng.exponential(scale, (width,))
        scores[p + "ln1.scale"] = rng.exponential(scale, (width,))
        scores[p + "ln1.bias"] = rng.exponential(scale, (width,))
    scores["head"] = rng.exponential(scale, (width, classes))
    return SensitivityMap(scores=scores, samples_used=1)


def store_bytes(store) -> dict:
    return {name: t.data.tobytes() for name, t in store.items()}
