"""Command line front end: generate, pretrain, sensitivity, plan, train, report, mmd."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import allocation, container, tuners
from .harness import TrainConfig, evaluate, finetune, pretrain, report_patterns
from .models import ModelConfig, ParameterStore, build
from .sensitivity import Dataset, SensitivityMap, compute_sensitivity
from .tasks import TaskSpec, compute_mmd, generate_task

__all__ = ["main"]

_SIGMA_ALIASES = {"module": "module_param_count", "matrix": "matrix_cost"}


def load_config(path) -> dict:
    doc = yaml.safe_load(Path(path).read_text())
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config root must be a mapping")
    return doc


def _section(cfg: dict, name: str, cls, aliases=None, **overrides):
    raw = dict(cfg.get(name) or {})
    if aliases:
        for src, dst in aliases.items():
            if src in raw:
                raw[dst] = raw.pop(src)
    raw.update(overrides)
    valid = set(cls.__dataclass_fields__)
    unknown = set(raw) - valid
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**raw)


def model_config_from(cfg: dict, **overrides) -> ModelConfig:
    return _section(cfg, "model", ModelConfig, **overrides)


def task_spec_from(cfg: dict) -> TaskSpec:
    return _section(cfg, "task", TaskSpec)


def train_config_from(cfg: dict, seed: int, **overrides) -> TrainConfig:
    return _section(cfg, "train", TrainConfig, aliases={"wd": "weight_decay"}, seed=seed, **overrides)


def spt_section(cfg: dict) -> dict:
    raw = dict(cfg.get("spt") or {})
    known = {"budget", "structured", "rank", "sigma_policy", "samples_C", "exclude_bias"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown spt config keys: {sorted(unknown)}")
    raw.setdefault("budget", 0.005)
    raw.setdefault("structured", "lora")
    raw.setdefault("rank", 8)
    raw.setdefault("sigma_policy", "module_param_count")
    raw.setdefault("samples_C", 800)
    raw.setdefault("exclude_bias", False)
    raw["sigma_policy"] = _SIGMA_ALIASES.get(raw["sigma_policy"], raw["sigma_policy"])
    return raw


def parse_budget(text: str):
    value = float(text)
    if value <= 0:
        raise ValueError(f"budget must be positive, got {text!r}")
    if value < 1:
        return value
    if value != int(value):
        raise ValueError(f"budget {text!r} is neither a fraction below 1 nor a whole count")
    return int(value)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(doc: dict, path=None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    print(text)


def _write_jsonl(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _model_config_for(cfg: dict, data: Dataset) -> ModelConfig:
    # The backbone comes from the config; everything the data dictates
    # (input width, sequence length, class count) comes from the data.
    classes = int(data.labels.max()) + 1
    return model_config_from(cfg, in_dim=data.dim, seq=data.seq, classes=classes)


def _load_checkpoint(args, cfg: dict, data: Dataset) -> ParameterStore:
    return ParameterStore.load(args.checkpoint, _model_config_for(cfg, data))


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    spec = task_spec_from(cfg)
    source, target = generate_task(spec, args.seed)
    out = _out_dir(args)
    source.save(out / "source.tens")
    target.save(out / "target.tens")
    _emit(
        {
            "source": str(out / "source.tens"),
            "target": str(out / "target.tens"),
            "samples_per_domain": source.num,
            "train_count": source.train_count,
            "theta": spec.theta,
            "permute": spec.permute,
        }
    )
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    data = Dataset.load(args.data)
    store = build(_model_config_for(cfg, data), args.seed)
    train_cfg = train_config_from(cfg, args.seed, stop_acc=args.stop_acc)
    records = pretrain(store, data, train_cfg)
    out = _out_dir(args)
    store.save(out / "checkpoint.tens")
    _write_jsonl(records, out / "pretrain_metrics.jsonl")
    _emit(
        {
            "checkpoint": str(out / "checkpoint.tens"),
            "metrics": str(out / "pretrain_metrics.jsonl"),
            "final_val_top1": records[-1]["val_top1"],
            "epochs_run": records[-1]["epoch"],
        }
    )
    return 0


def cmd_sensitivity(args) -> int:
    cfg = load_config(args.config)
    data = Dataset.load(args.data)
    store = _load_checkpoint(args, cfg, data)
    spt_cfg = spt_section(cfg)
    samples = args.samples if args.samples is not None else int(spt_cfg["samples_C"])
    smap = compute_sensitivity(
        store,
        data.train_view(),
        samples=samples,
        batch=args.batch,
        surrogate=args.surrogate,
        workers=args.workers,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    smap.save(args.out)
    _emit({"sensitivity": str(args.out), "samples_used": smap.samples_used, "entries": smap.total_entries})
    return 0


def cmd_plan(args) -> int:
    smap = SensitivityMap.load(args.sens)
    budget = parse_budget(args.budget)
    tau = allocation.resolve_budget(budget, smap.total_entries)
    policy = _SIGMA_ALIASES.get(args.sigma_policy, args.sigma_policy)
    plan = allocation.make_plan(
        smap,
        tau,
        structured_kind=args.structured,
        rank=args.rank,
        policy=policy,
        exclude_bias=args.exclude_bias,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    plan.save(args.out)
    _emit(
        {
            "plan": str(args.out),
            "budget_tau": plan.budget_tau,
            "verdicts": plan.counts_by_kind(),
            "total_trainable": plan.total_trainable,
            "head_params": plan.head_params,
            "warnings": plan.warnings,
        }
    )
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = Dataset.load(args.data)
    store = _load_checkpoint(args, cfg, data)
    plan = allocation.AllocationPlan.load(args.plan)
    train_cfg = train_config_from(cfg, args.seed)
    modules, records = finetune(store, data, plan, train_cfg)
    out = _out_dir(args)
    arrays = store.state_arrays() | tuners.module_state_arrays(modules)
    container.save_tensors(out / "finetuned.tens", arrays)
    _write_jsonl(records, out / "train_metrics.jsonl")
    acc, loss = evaluate(store, data.val_view(), modules)
    summary = {
        "checkpoint": str(out / "finetuned.tens"),
        "metrics": str(out / "train_metrics.jsonl"),
        "final_val_top1": acc,
        "final_val_loss": loss,
        "tuned_params": plan.tuned_params(),
        "total_params": store.total_params,
        "tuned_fraction": plan.tuned_fraction(store.total_params),
    }
    if args.merge_lora:
        merged = store.clone()
        for m in modules:
            if m.kind == "lora":
                merged[m.target].data = tuners.merge_lora(merged[m.target], m)
        merged.save(out / "merged.tens")
        summary["merged_checkpoint"] = str(out / "merged.tens")
    if args.plot:
        from .plots import write_accuracy_svg

        write_accuracy_svg(records, out / "accuracy.svg")
        summary["plot"] = str(out / "accuracy.svg")
    _emit(summary, out / "summary.json")
    return 0


def cmd_report(args) -> int:
    smap = SensitivityMap.load(args.sens)
    budget = parse_budget(args.budget)
    tau = allocation.resolve_budget(budget, smap.total_entries)
    rep = report_patterns(smap, tau, exclude_bias=args.exclude_bias)
    doc = rep.to_json_dict()
    if args.plot:
        svg = Path(args.out).with_suffix(".svg") if args.out else Path("patterns.svg")
        from .plots import write_patterns_svg

        write_patterns_svg(rep, svg)
        doc["plot"] = str(svg)
    _emit(doc, args.out)
    return 0


def cmd_mmd(args) -> int:
    a = Dataset.load(args.a)
    b = Dataset.load(args.b)
    report = compute_mmd(
        a.features.reshape(a.num, -1).astype(np.float64),
        b.features.reshape(b.num, -1).astype(np.float64),
    )
    _emit(report.to_json_dict(), args.out)
    return 0


def _add_common(p, config_required=True) -> None:
    p.add_argument("--config", required=config_required, help="yaml or json config file")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spt",
        description="Sensitivity-aware parameter-efficient tuning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a source/target dataset pair")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="train a model on the source dataset")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--stop-acc", type=float, default=0.99, dest="stop_acc")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("sensitivity", help="score per-parameter sensitivity")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--surrogate", choices=("sgd", "adamw"), default="sgd")
    p.add_argument("--out", required=True, help="output sensitivity file")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("plan", help="allocate the tuning budget")
    p.add_argument("--sens", required=True)
    p.add_argument("--budget", required=True, help="connection count or fraction below 1")
    p.add_argument("--structured", choices=("lora", "adapter", "none"), default="lora")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument(
        "--sigma-policy",
        choices=("module", "matrix", "module_param_count", "matrix_cost"),
        default="module",
        dest="sigma_policy",
    )
    p.add_argument("--exclude-bias", action="store_true", dest="exclude_bias")
    p.add_argument("--out", required=True, help="output plan file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("train", help="fine-tune a checkpoint under a plan")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--merge-lora", action="store_true", dest="merge_lora")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="summarise where the budget landed")
    p.add_argument("--sens", required=True)
    p.add_argument("--budget", required=True)
    p.add_argument("--exclude-bias", action="store_true", dest="exclude_bias")
    p.add_argument("--out", default=None)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("mmd", help="kernel two-sample gap between two datasets")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_mmd)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
