#!/usr/bin/env python3
"""Compare allocation variants on the same transfer task across seeds.

Each seed shares one pretrained checkpoint and one sensitivity map; every
variant fine-tunes its own clone, so differences come from the plan alone.
Writes one JSONL row per (seed, variant) and prints a mean-accuracy table.
"""

import argparse
import json
from collections import defaultdict
from pathlib import Path
from statistics import mean

from spt.cli import load_config, model_config_from, spt_section, task_spec_from, train_config_from
from spt.experiments import VARIANTS, SptSettings, prepare_transfer, run_variant


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variants", nargs="*", default=list(VARIANTS))
    ap.add_argument("--out", default="ablation.jsonl")
    args = ap.parse_args(argv)

    unknown = set(args.variants) - set(VARIANTS)
    if unknown:
        ap.error(f"unknown variants {sorted(unknown)}, pick from {list(VARIANTS)}")

    cfg = load_config(args.config)
    spt_cfg = spt_section(cfg)
    settings = SptSettings(
        budget=spt_cfg["budget"],
        structured=spt_cfg["structured"],
        rank=spt_cfg["rank"],
        sigma_policy=spt_cfg["sigma_policy"],
        samples=spt_cfg["samples_C"],
        exclude_bias=spt_cfg["exclude_bias"],
    )
    model_cfg = model_config_from(cfg)
    task = task_spec_from(cfg)

    by_variant = defaultdict(list)
    rows = []
    for seed in range(args.seeds):
        setup = prepare_transfer(model_cfg, task, train_config_from(cfg, seed), settings, seed)
        for variant in args.variants:
            result = run_variant(setup, settings, train_config_from(cfg, seed), variant)
            row = {k: result[k] for k in ("variant", "seed", "final_top1", "final_loss", "tuned_params", "tuned_fraction")}
            rows.append(row)
            by_variant[variant].append(result["final_top1"])
            print(f"seed {seed} {variant:>18}: top1 {result['final_top1']:.4f} tuned {result['tuned_params']}")

    with open(args.out, "w") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    print(f"\nmean top-1 over {args.seeds} seeds -> {Path(args.out).resolve()}")
    for variant in args.variants:
        print(f"  {variant:>18}: {mean(by_variant[variant]):.4f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
