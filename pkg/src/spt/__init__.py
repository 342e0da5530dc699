"""Sensitivity-aware parameter-efficient tuning on a self-contained autodiff core.

Pipeline: score per-parameter sensitivity in one sweep, pick the top-tau
connections under a budget, gate each matrix into a structured module (LoRA or
adapter) or a sparse update mask, then fine-tune only what the plan names.
"""

from .allocation import (
    AllocationPlan,
    Verdict,
    build_masks,
    frozen_plan,
    make_plan,
    make_structured_only_plan,
    module_param_count,
    resolve_budget,
    select_top_tau,
    sigma_for,
)
from .container import load_tensors, save_tensors
from .harness import PatternReport, TrainConfig, evaluate, finetune, pretrain, report_patterns
from .models import ModelConfig, ParameterStore, build, forward, loss_on_batch
from .optim import AdamW, AdamWConfig, AdamWState, SGD, cosine_lr
from .sensitivity import (
    Dataset,
    SensitivityMap,
    compute_importance_magnitude,
    compute_sensitivity,
    merge_maps,
)
from .tasks import DomainGapReport, TaskSpec, compute_mmd, generate_task, median_bandwidth
from .tensor import GradientSnapshot, Tape, Tensor, backward
from .tuners import (
    AdapterModule,
    LoraModule,
    adapter_forward,
    apply_masked_update,
    init_adapter,
    init_lora,
    lora_forward,
    merge_lora,
    modules_from_plan,
)

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AdamWConfig",
    "AdamWState",
    "AdapterModule",
    "AllocationPlan",
    "Dataset",
    "DomainGapReport",
    "GradientSnapshot",
    "LoraModule",
    "ModelConfig",
    "ParameterStore",
    "PatternReport",
    "SGD",
    "SensitivityMap",
    "Tape",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "Verdict",
    "adapter_forward",
    "apply_masked_update",
    "backward",
    "build",
    "build_masks",
    "compute_importance_magnitude",
    "compute_mmd",
    "compute_sensitivity",
    "cosine_lr",
    "evaluate",
    "finetune",
    "forward",
    "frozen_plan",
    "generate_task",
    "init_adapter",
    "init_lora",
    "load_tensors",
    "lora_forward",
    "loss_on_batch",
    "make_plan",
    "make_structured_only_plan",
    "median_bandwidth",
    "merge_lora",
    "merge_maps",
    "module_param_count",
    "modules_from_plan",
    "pretrain",
    "report_patterns",
    "resolve_budget",
    "save_tensors",
    "select_top_tau",
    "sigma_for",
    "__version__",
]
