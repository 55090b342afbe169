# coding: utf-8

# # Reading training curves
#
# Every training run appends one row per iteration to metrics.csv. This script
# summarizes any number of those files and prints a coarse text curve, e.g.
#
#     python demos/06_training_curves.py .acceptance/convoy-attention-n3-s*/metrics.csv
#
# With no arguments it trains two tiny runs so there is something to show.

import sys
import tempfile
from pathlib import Path

import numpy as np

from exchangeable.analysis import format_summary, read_metrics, summarize_runs
from exchangeable.cli import main

paths = [Path(p) for p in sys.argv[1:]]
if not paths:
    tmp = Path(tempfile.mkdtemp())
    for enc in ("attention", "ordered"):
        out = tmp / enc
        main(["train", "--quiet", "--out", str(out), "--set", f"encoder.type={enc}",
              "--set", "ppo.iters=6", "--set", "ppo.rollout_steps=512", "--set", "run.workers=4"])
        paths.append(out / "metrics.csv")

print(format_summary(summarize_runs(paths, window=20, threshold=0.0)))
for path in paths:
    recs = read_metrics(path)
    returns = np.array([r.mean_return for r in recs])
    chunks = np.array_split(returns, min(10, len(returns)))
    print(f"\n{recs[0].run_id}")
    for chunk, its in zip(chunks, np.array_split(np.arange(1, len(recs) + 1), len(chunks))):
        value = np.nanmean(chunk)
        bar = "#" * int(max(0.0, value + 5.0) * 6)
        print(f"  iters {its[0]:4d}-{its[-1]:4d}  {value:7.3f}  {bar}")
