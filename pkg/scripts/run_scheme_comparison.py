#!/usr/bin/env python3
"""Run the five-arm serving-scheme comparison and print the report.

Usage: python scripts/run_scheme_comparison.py [config.yaml] [out_dir]
Without arguments this uses the default full-scale configuration (five
seeds, 20 days, 50k events/day) and writes into runs/scheme_comparison.
"""
import sys

from userembed.config import default_run_config, load_run_config
from userembed.experiments import run_scheme_comparison


def main() -> int:
    cfg = load_run_config(sys.argv[1]) if len(sys.argv) > 1 else default_run_config()
    out = sys.argv[2] if len(sys.argv) > 2 else "runs/scheme_comparison"
    report = run_scheme_comparison(cfg, out_dir=out)
    print(report.render_text())
    return 0 if report.aggregate["ordering_gate_passed"] else 2


if __name__ == "__main__":
    sys.exit(main())
