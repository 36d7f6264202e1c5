"""Regenerate frozen fixtures: python tests/golden/regenerate.py"""

import json
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from conftest import GOLDEN, benchmark_config  # noqa: E402
from fedsim.harness import prepare  # noqa: E402


def main():
    prep = prepare(benchmark_config())
    hist = [s.label_histogram.tolist() for s in prep.shards]
    sizes = [[len(s.train), len(s.test)] for s in prep.shards]
    out = {"config": "configs/benchmark.json", "master_seed": 0, "histograms": hist, "train_test_sizes": sizes}
    (GOLDEN / "benchmark_partition_seed0.json").write_text(json.dumps(out, indent=1) + "\n")
    top2 = [sorted(h)[-2:] for h in hist]
    print("min top-2 share", min(sum(t) / sum(h) for t, h in zip(top2, hist)))
    print("total", int(np.sum(hist)))


if __name__ == "__main__":
    main()
