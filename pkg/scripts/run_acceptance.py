#!/usr/bin/env python3
"""Run the experiment grids behind the desk-scale (and optional full-scale) checks.

Results land in results/<grid>/records.jsonl; tests/test_acceptance.py reads them.
Interrupted runs resume: finished cells are skipped and distillations restart
from their last checkpoint.

    python scripts/run_acceptance.py                    # smoke, trend, appendix
    python scripts/run_acceptance.py --grids paper      # hours to days on CPU
"""
import argparse
import logging
import sys
import time
from pathlib import Path

from distillpool.harness import load_config, report, run_experiment

REPO = Path(__file__).resolve().parents[1]

# smoke and trend share one output directory so the K=300 baseline run
# continues from the K=100 checkpoint instead of starting over
GRIDS = {
    "smoke": ("desk_smoke.json", "desk"),
    "trend": ("desk_trend.json", "desk"),
    "appendix": ("desk_appendix.json", "desk_appendix"),
    "paper": ("paper_check.json", "paper"),
}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--grids", nargs="+", choices=sorted(GRIDS), default=["smoke", "trend", "appendix"])
    p.add_argument("--data", default=str(REPO / "data" / "cifar-10-batches-bin"))
    p.add_argument("--results", default=str(REPO / "results"))
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="override the seeds in the config")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    failed = 0
    for name in args.grids:
        config_file, out = GRIDS[name]
        overrides = {"dataset_root": args.data, "out": str(Path(args.results) / out), "workers": args.workers}
        if args.seeds:
            overrides["seeds"] = args.seeds
        cfg = load_config(REPO / "configs" / config_file, **overrides)
        t0 = time.time()
        records = run_experiment(cfg)
        failed += sum(r.status != "ok" for r in records)
        print(f"\n## {name} ({time.time() - t0:.0f}s)\n")
        print(report(records, "table5" if name == "appendix" else "table4"))
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
