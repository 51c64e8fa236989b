"""Run the desk preset end to end and print the comparison table.

    python scripts/run_desk.py [--out out/desk] [--set train.epochs=10 ...]
"""
import argparse
import logging

from fdia_imaging.config import load_config
from fdia_imaging.pipeline import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default="desk")
    ap.add_argument("--out", default=None)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.overrides)
    manifest = run_pipeline(cfg, args.out)
    print(f"\n{'approach':>10} {'precision':>10} {'recall':>10} {'f1':>10}")
    for name, m in manifest["macro"].items():
        print(f"{name:>10} {m['precision']:>10.4f} {m['recall']:>10.4f} {m['f1']:>10.4f}")
    print("timing (s):", manifest["timing_seconds"])


if __name__ == "__main__":
    main()
