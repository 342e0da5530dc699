"""End-to-end transfer experiments: pretrain once, fine-tune under plan variants.

These helpers exist so the test suite and the scripts drive the exact same
code path: generate a task pair, pretrain on source, score sensitivity on the
target's training split, then fine-tune clones of the pretrained model under
different allocation variants at one shared budget.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import allocation
from .harness import TrainConfig, evaluate, finetune, pretrain
from .models import ModelConfig, ParameterStore, build
from .sensitivity import SensitivityMap, compute_sensitivity
from .tasks import TaskSpec, generate_task

__all__ = ["SptSettings", "TransferSetup", "prepare_transfer", "run_variant", "VARIANTS"]

VARIANTS = ("combined", "unstructured", "structured", "random_structured", "head_only", "full")


@dataclass
class SptSettings:
    budget: float = 0.005
    structured: str = "lora"
    rank: int = 1
    sigma_policy: str = "module_param_count"
    samples: int = 800
    exclude_bias: bool = False
    score_batch: int = 1


@dataclass
class TransferSetup:
    model_cfg: ModelConfig
    task: TaskSpec
    seed: int
    store: ParameterStore  # pretrained on source
    source: object
    target: object
    sens: SensitivityMap
    pretrain_records: list


def prepare_transfer(
    model_cfg: ModelConfig,
    task: TaskSpec,
    pretrain_cfg: TrainConfig,
    settings: SptSettings,
    seed: int,
) -> TransferSetup:
    source, target = generate_task(task, seed)
    cfg = ModelConfig(**{**model_cfg.__dict__, "in_dim": task.dim, "seq": task.seq, "classes": task.classes})
    store = build(cfg, seed)
    records = pretrain(store, source, replace(pretrain_cfg, seed=seed))
    samples = min(settings.samples, target.train_view().num)
    sens = compute_sensitivity(
        store, target.train_view(), samples=samples, batch=settings.score_batch
    )
    return TransferSetup(
        model_cfg=cfg,
        task=task,
        seed=seed,
        store=store,
        source=source,
        target=target,
        sens=sens,
        pretrain_records=records,
    )


def plan_for_variant(setup: TransferSetup, settings: SptSettings, variant: str):
    total = setup.store.total_params
    tau = allocation.resolve_budget(settings.budget, total)
    if variant == "combined":
        return allocation.make_plan(
            setup.sens,
            tau,
            structured_kind=settings.structured,
            rank=settings.rank,
            policy=settings.sigma_policy,
            exclude_bias=settings.exclude_bias,
        )
    if variant == "unstructured":
        return allocation.make_plan(
            setup.sens, tau, structured_kind="none", rank=settings.rank,
            exclude_bias=settings.exclude_bias,
        )
    if variant == "structured":
        return allocation.make_structured_only_plan(
            setup.sens, tau, structured_kind=settings.structured, rank=settings.rank,
            order="sensitivity", exclude_bias=settings.exclude_bias,
        )
    if variant == "random_structured":
        return allocation.make_structured_only_plan(
            setup.sens, tau, structured_kind=settings.structured, rank=settings.rank,
            order="random", seed=setup.seed, exclude_bias=settings.exclude_bias,
        )
    if variant == "head_only":
        return allocation.frozen_plan(setup.sens)
    if variant == "full":
        eligible = sum(
            a.size for n, a in setup.sens.scores.items() if n != "head"
        )
        return allocation.make_plan(setup.sens, eligible, structured_kind="none")
    raise ValueError(f"unknown variant {variant!r}")


def run_variant(
    setup: TransferSetup,
    settings: SptSettings,
    tune_cfg: TrainConfig,
    variant: str,
):
    """Fine-tune a clone of the pretrained model under one plan variant."""
    plan = plan_for_variant(setup, settings, variant)
    store = setup.store.clone()
    modules, records = finetune(store, setup.target, plan, replace(tune_cfg, seed=setup.seed))
    acc, loss = evaluate(store, setup.target.val_view(), modules)
    return {
        "variant": variant,
        "seed": setup.seed,
        "final_top1": acc,
        "final_loss": loss,
        "tuned_params": plan.tuned_params(),
        "total_params": store.total_params,
        "tuned_fraction": plan.tuned_fraction(store.total_params),
        "plan": plan,
        "store": store,
        "modules": modules,
        "records": records,
    }
