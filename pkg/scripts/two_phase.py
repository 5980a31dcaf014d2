"""Baseline vs two-phase (pretrain without cache, finetune with cache) on a byte corpus.

    python scripts/two_phase.py --config configs/small.cfg --out runs/two_phase --pretrain-steps 500
"""

import argparse
import logging
from pathlib import Path

from cacheformer.cli import Invocation
from cacheformer.corpus import order0_entropy_bits
from cacheformer.training import load_corpus, two_phase_comparison

parser = argparse.ArgumentParser()
parser.add_argument("--config", type=Path, required=True)
parser.add_argument("--out", type=Path, default=Path("runs/two_phase"))
parser.add_argument("--pretrain-steps", type=int, required=True)
parser.add_argument("--set", dest="overrides", action="append", default=[])
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")

inv = Invocation("train", args.config, args.out, overrides=dict(kv.split("=", 1) for kv in args.overrides))
config, plan = inv.settings()
corpus = load_corpus(plan.corpus)
result = two_phase_comparison(plan, config, corpus, args.out, args.pretrain_steps)
print(f"order-0 entropy   {order0_entropy_bits(corpus.data):.4f} bpc")
print(f"baseline (no cache) {result.baseline_bpc:.4f} bpc")
print(f"two-phase (cache)   {result.cached_bpc:.4f} bpc")
