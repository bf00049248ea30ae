"""Conditioning ablation on synthetic bedrooms: one budget, one row per conditioning mode.

    python3 scripts/ablate.py --out runs/ablate --scenes 500 --eval-scenes 100 --set train.steps=1000
"""
from __future__ import annotations

import argparse
from pathlib import Path

from sgdiff import pipeline
from sgdiff.ablation import run_ablation
from sgdiff.config import load_config, parse_override
from sgdiff.egnn import CONDITIONING_MODES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablate"))
    ap.add_argument("--scenes", type=int, default=500)
    ap.add_argument("--eval-scenes", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--modes", default=",".join(CONDITIONING_MODES))
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()
    cfg = load_config(None, dict(parse_override(s) for s in args.set))
    rules = pipeline.rules_of(cfg)
    d = cfg.data
    train = pipeline.generate_records(d.grammar, args.scenes, args.seed, d.k_triplets, d.code_dim, rules=rules)
    test = pipeline.generate_records(d.grammar, args.eval_scenes, args.seed + 1_000_003, d.k_triplets, d.code_dim,
                                     rules=rules)
    report = run_ablation(cfg, train, test, args.modes.split(","), args.out, args.seed, args.trials)
    print(report["table"])


if __name__ == "__main__":
    main()
