#!/usr/bin/env python3
"""Run the average-pooling ablation plus the embedding-shift study.

Usage: python scripts/run_pooling_ablation.py [config.yaml] [out_dir]
"""
import dataclasses
import sys

from userembed.config import default_run_config, load_run_config
from userembed.experiments import run_pooling_ablation


def main() -> int:
    if len(sys.argv) > 1:
        cfg = load_run_config(sys.argv[1])
    else:
        cfg = default_run_config()
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, kind="pooling_ablation"))
    out = sys.argv[2] if len(sys.argv) > 2 else "runs/pooling_ablation"
    report = run_pooling_ablation(cfg, out_dir=out)
    print(report.render_text())
    ok = report.aggregate["ap_gate_passed"] and report.aggregate["raw_degradation_gate_passed"]
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
