"""
Training a small model and comparing against the baseline
=========================================================

Trains a baseline and a cached-aggregation model on the same synthetic moving
shapes, samples from both and writes the comparison reports: ``compare.csv``,
``compare.svg``, ``losses.csv`` and per-model capture files. The same flow is
available from the shell as ``repdit compare``.

Pass an output directory as the first argument (default: a temporary one).
"""

import dataclasses
import sys
import tempfile
from pathlib import Path

import numpy as np

from repdit.config import OptimConfig, RunConfig
from repdit.model import ModelConfig
from repdit.pipeline import cmd_compare
from repdit.report import read_rows_csv

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="repdit-demo-"))

# small enough to finish in a few seconds
cfg = RunConfig(
    model=ModelConfig(L=4, d=32, H=4, F=3, G=8, patch=2, S=2, m=2, T=20),
    optim=OptimConfig(steps=60, batch_size=4),
)
paths = cmd_compare(cfg, seeds=[0, 1], out_dir=out)
for name, path in sorted(paths.items()):
    print(f"{name:>22}: {path}")

header, rows = read_rows_csv(paths["compare_csv"])
deltas = np.array([float(r[header.index("delta")]) for r in rows])
layers = np.array([int(r[header.index("layer")]) for r in rows])
for layer in sorted(set(layers)):
    print(f"layer {layer}: mean similarity delta (repvideo - baseline) {deltas[layers == layer].mean():+.4f}")

_, losses = read_rows_csv(paths["losses_csv"])
print("last raw losses baseline/repvideo:", losses[-1][1:])
