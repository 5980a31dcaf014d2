"""Write a ~1 MB byte corpus for desk-scale training runs.

    python scripts/build_corpus.py data/corpus.txt [--size 1000000]
"""

import argparse
from pathlib import Path

from cacheformer.corpus import order0_entropy_bits, stdlib_corpus

parser = argparse.ArgumentParser()
parser.add_argument("out", type=Path)
parser.add_argument("--size", type=int, default=1_000_000)
args = parser.parse_args()
data = stdlib_corpus(args.size)
args.out.parent.mkdir(parents=True, exist_ok=True)
args.out.write_bytes(data)
print(f"wrote {len(data)} bytes to {args.out}; order-0 entropy {order0_entropy_bits(data):.4f} bits/byte")
