import numpy as np
import pytest

from conftest import grammar_map, random_dataset, random_map_for, small_store, store_bytes
from spt.allocation import frozen_plan, make_plan
from spt.harness import TrainConfig, evaluate, finetune, pretrain, report_patterns
from spt.models import build, forward
from spt.optim import AdamWConfig, AdamWState, cosine_lr
from spt.sensitivity import SensitivityMap
from spt.tasks import TaskSpec, generate_task
from spt.tensor import Tape, Tensor, backward, cross_entropy


def uniform_map(store) -> SensitivityMap:
    return SensitivityMap(
        scores={name: np.ones(t.shape) for name, t in store.items()}, samples_used=1
    )


def test_train_config_validation():
    TrainConfig(lr=0.0)  # a no-op run is expressible
    with pytest.raises(ValueError, match="batch"):
        TrainConfig(batch=0)
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=-0.1)
    with pytest.raises(ValueError, match="epochs"):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError, match="schedule"):
        TrainConfig(schedule="linear")
    with pytest.raises(ValueError, match="eval_every"):
        TrainConfig(eval_every=0)


def test_zero_lr_pretrain_changes_nothing(rng):
    store = small_store()
    before = store_bytes(store)
    data = random_dataset(rng, num=24, train_count=16)
    records = pretrain(store, data, TrainConfig(lr=0.0, batch=8, epochs=2))
    assert store_bytes(store) == before
    assert records and records[-1]["phase"] == "pretrain"


def test_pretrain_deterministic(rng):
    data = random_dataset(rng, num=24, train_count=16)
    cfg = TrainConfig(lr=1e-3, batch=8, epochs=2, seed=4)
    a = small_store()
    b = small_store()
    ra = pretrain(a, data, cfg)
    rb = pretrain(b, data, cfg)
    assert store_bytes(a) == store_bytes(b)
    assert ra == rb


def test_pretrain_learns_separable_task():
    spec = TaskSpec(classes=3, dim=8, seq=2, theta=0.0, noise=0.1, train=120, val=40)
    source, _ = generate_task(spec, seed=1)
    store = build_small(classes=3, in_dim=8, seq=2)
    records = pretrain(
        store, source, TrainConfig(lr=3e-3, batch=32, epochs=50, seed=0, stop_acc=0.95)
    )
    assert records[-1]["val_top1"] >= 0.95


def build_small(**kw):
    from conftest import small_config

    return build(small_config(depth=1, **kw), seed=0)


def test_head_only_finetune_matches_hand_rolled_loop(rng):
    data = random_dataset(rng, num=32, train_count=24)
    cfg = TrainConfig(lr=2e-3, batch=8, epochs=3, seed=7)

    store = small_store(seed=2)
    twin = store.clone()
    before = store_bytes(store)

    plan = frozen_plan(uniform_map(store))
    modules, records = finetune(store, data, plan, cfg)
    assert modules == []

    # mirror of the training loop, restricted to the head by hand
    train = data.train_view()
    head = twin["head"]
    state = AdamWState(head.shape, AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay))
    loop_rng = np.random.default_rng(cfg.seed)
    spe = (train.num + cfg.batch - 1) // cfg.batch
    total = cfg.epochs * spe
    step = 0
    for _ in range(cfg.epochs):
        perm = loop_rng.permutation(train.num)
        for lo in range(0, train.num, cfg.batch):
            take = perm[lo : lo + cfg.batch]
            tape = Tape()
            with tape:
                loss = cross_entropy(
                    forward(twin, Tensor(train.features[take])), train.labels[take]
                )
            snap = backward(loss, tape)
            state.update(head.data, snap.wrt(head), lr=cosine_lr(cfg.lr, step, total))
            step += 1

    assert store["head"].data.tobytes() == head.data.tobytes()
    for name in store.names():
        if name != "head":
            assert store[name].data.tobytes() == before[name]
    assert records[-1]["tuned_params"] == head.data.size


def test_all_ones_masks_equal_unmasked_training(rng):
    data = random_dataset(rng, num=24, train_count=24)
    cfg = TrainConfig(lr=1e-3, batch=8, epochs=2, seed=3)

    masked_store = small_store(seed=5)
    plain_store = masked_store.clone()

    sens = uniform_map(masked_store)
    tau = sum(a.size for n, a in sens.scores.items() if n != "head")
    plan = make_plan(sens, tau, structured_kind="none")
    counts = plan.counts_by_kind()
    assert counts["unstructured"] == len(sens.scores) - 1 and counts["frozen"] == 0

    finetune(masked_store, data, plan, cfg)
    pretrain(plain_store, data, cfg)
    assert store_bytes(masked_store) == store_bytes(plain_store)


def test_finetune_touches_only_planned_entries(rng):
    store = small_store()
    before = store_bytes(store)
    data = random_dataset(rng, num=16, train_count=16)
    plan = make_plan(random_map_for(store, rng), 40, rank=1)
    finetune(store, data, plan, TrainConfig(lr=5e-3, batch=8, epochs=2))
    for name, verdict in plan.verdicts.items():
        raw = np.frombuffer(before[name], dtype=np.float32).reshape(store[name].shape)
        if verdict.kind == "frozen":
            assert store[name].data.tobytes() == before[name], name
        elif verdict.kind == "unstructured":
            off = verdict.mask == 0
            assert np.array_equal(store[name].data[off], raw[off]), name
            assert not np.array_equal(store[name].data, raw), name
    assert not np.array_equal(
        store["head"].data, np.frombuffer(before["head"], np.float32).reshape(store["head"].shape)
    )


def test_finetune_record_schema(rng):
    store = small_store()
    data = random_dataset(rng, num=16, train_count=12)
    plan = frozen_plan(uniform_map(store))
    _, records = finetune(store, data, plan, TrainConfig(lr=1e-3, batch=8, epochs=2))
    want_keys = {
        "phase",
        "epoch",
        "step",
        "lr",
        "val_top1",
        "val_loss",
        "tuned_params",
        "total_params",
        "tuned_fraction",
    }
    for r in records:
        assert set(r) == want_keys
        assert r["phase"] == "finetune"
        assert r["tuned_params"] == plan.tuned_params()
        assert r["total_params"] == store.total_params
        assert r["tuned_fraction"] == pytest.approx(plan.tuned_params() / store.total_params)


def test_stop_acc_short_circuits(rng):
    store = small_store()
    data = random_dataset(rng, num=16, train_count=12)
    records = pretrain(store, data, TrainConfig(lr=1e-3, batch=8, epochs=10, stop_acc=0.0))
    assert len(records) == 1 and records[0]["epoch"] == 1


def test_eval_every_cadence(rng):
    store = small_store()
    data = random_dataset(rng, num=16, train_count=12)
    records = pretrain(store, data, TrainConfig(lr=1e-3, batch=8, epochs=5, eval_every=2))
    assert [r["epoch"] for r in records] == [2, 4, 5]


def test_max_steps_caps_updates(rng):
    store = small_store()
    data = random_dataset(rng, num=32, train_count=32)
    plan = frozen_plan(uniform_map(store))
    _, records = finetune(
        store, data, plan, TrainConfig(lr=1e-3, batch=8, epochs=5), max_steps=3
    )
    assert records[-1]["step"] == 3


def test_divergence_is_reported(rng):
    store = small_store()
    data = random_dataset(rng, num=16, train_count=16)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(RuntimeError, match="non-finite loss at step"):
            pretrain(store, data, TrainConfig(lr=1e8, batch=8, epochs=5))


def test_plan_mismatch_errors(rng):
    store = small_store()
    data = random_dataset(rng, num=8, train_count=8)
    sens = random_map_for(store, rng)
    plan = make_plan(sens, 40, rank=1)
    orphan = next(iter(plan.verdicts))
    plan.verdicts["blockZ.mystery"] = plan.verdicts.pop(orphan)
    with pytest.raises(ValueError, match="unknown tensor"):
        finetune(store, data, plan, TrainConfig(epochs=1))

    plan2 = make_plan(sens, 40, rank=1)
    victim = next(n for n, v in plan2.verdicts.items() if v.mask is not None)
    plan2.verdicts[victim].mask = np.ones((2, 2), np.uint8)
    with pytest.raises(ValueError, match="plan mask"):
        finetune(store, data, plan2, TrainConfig(epochs=1))


def test_epochless_run_still_reports(rng):
    store = small_store()
    data = random_dataset(rng, num=8, train_count=8)
    records = pretrain(store, data, TrainConfig(epochs=0))
    assert len(records) == 1 and records[0]["step"] == 0


def test_evaluate_bounds(rng):
    store = small_store()
    data = random_dataset(rng, num=10)
    acc, loss = evaluate(store, data)
    assert 0.0 <= acc <= 1.0 and np.isfinite(loss)


def test_report_uniform_scores_split_evenly(rng):
    sens = grammar_map(rng, depth=2, width=4, with_embed=False)
    flat = SensitivityMap(
        scores={n: np.ones(a.shape) for n, a in sens.scores.items()}, samples_used=1
    )
    tau = sum(a.size for n, a in flat.scores.items() if n != "head")
    report = report_patterns(flat, tau)
    assert report.block_share == {0: 0.5, 1: 0.5}
    assert sum(report.role_share.values()) == pytest.approx(1.0, abs=1e-6)
    # equal-size roles with uniform scores take equal shares
    assert report.role_share["fc1"] == report.role_share["fc2"]


def test_report_concentrated_mass(rng):
    sens = grammar_map(rng, depth=2, width=4, scale=1e-9)
    sens.scores["block0.fc1"] = sens.scores["block0.fc1"] + 1.0
    report = report_patterns(sens, 30)  # fc1 is 4x8, tau must fit inside it
    assert report.block_share[0] == 1.0 and report.block_share[1] == 0.0
    assert report.role_share["fc1"] == 1.0


def test_report_respects_bias_exclusion(rng):
    sens = grammar_map(rng, depth=2, width=4, scale=1e-9)
    sens.scores["block1.fc1.bias"] = sens.scores["block1.fc1.bias"] + 5.0
    with_bias = report_patterns(sens, 8)
    without = report_patterns(sens, 8, exclude_bias=True)
    assert with_bias.block_counts[1] == 8
    assert without.block_counts[1] < 8
    assert with_bias.to_json_dict()["tau"] == 8
