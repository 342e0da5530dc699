#!/usr/bin/env python3
"""One-shot transfer pipeline: generate task, pretrain, score, plan, fine-tune.

Equivalent to chaining the CLI subcommands, but keeps everything in memory and
prints a single JSON summary. Useful as a quick health check of the full stack.
"""

import argparse
import json
from pathlib import Path

from spt.cli import load_config, model_config_from, spt_section, task_spec_from, train_config_from
from spt.experiments import SptSettings, prepare_transfer, run_variant


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variant", default="combined")
    ap.add_argument("--out", default=None, help="optional JSON summary path")
    args = ap.parse_args(argv)

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
    setup = prepare_transfer(
        model_config_from(cfg),
        task_spec_from(cfg),
        train_config_from(cfg, args.seed),
        settings,
        args.seed,
    )
    result = run_variant(setup, settings, train_config_from(cfg, args.seed), args.variant)

    summary = {
        "variant": result["variant"],
        "seed": args.seed,
        "pretrain_top1": setup.pretrain_records[-1]["val_top1"],
        "final_top1": result["final_top1"],
        "final_loss": result["final_loss"],
        "tuned_params": result["tuned_params"],
        "total_params": setup.store.total_params,
        "tuned_fraction": result["tuned_fraction"],
        "verdicts": result["plan"].counts_by_kind(),
    }
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
