#!/usr/bin/env python3
"""Time a single forward pass over an 8-hour record (2,880,000 samples at
100 Hz) through the full-size model and report wall time and peak memory."""

import argparse
import resource
import sys
import time

import numpy as np

from sleepseg.model import UTimeConfig, build_model
from sleepseg.tensor import Tensor


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--hours", type=float, default=8.0)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    model = build_model(UTimeConfig(), seed=args.seed)
    model.seed_bn_identity()
    t = int(args.hours * 3600 * 100)
    t -= t % 3000
    x = Tensor(np.random.default_rng(args.seed).standard_normal((1, t, 1)).astype(np.float32))

    start = time.time()
    y = model.forward(x, mode="infer")
    elapsed = time.time() - start
    peak_gb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1e6
    print(f"samples: {t}")
    print(f"segments: {y.shape[1]}")
    print(f"seconds: {elapsed:.2f}")
    print(f"peak_rss_gb: {peak_gb:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
