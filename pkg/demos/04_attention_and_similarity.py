"""
Reading attention and feature similarity
========================================

Sample one trajectory from an untrained model while recording attention and
features, then summarize how much each frame attends to itself versus its
neighbours and how similar adjacent frames are layer by layer.
"""

import numpy as np

from repdit.analysis import (
    AttentionRecord,
    adjacent_frame_similarity,
    frame_attention_map,
    frame_attention_summary,
    report_from_capture,
    run_capture,
)
from repdit.diffusion import make_schedule
from repdit.model import ModelConfig, RepDiT, TokenLayout

cfg = ModelConfig(L=4, d=16, H=2, F=4, G=8, patch=2, S=2, m=2, T=20)
model = RepDiT(cfg, seed=0)
schedule = make_schedule(T=cfg.T)
rc = run_capture(model, schedule, prompt_id=1, seed=0, steps=[20, 10, 1], attention=True)

rec = AttentionRecord(layer=2, weights=rc.attention[(10, 2)], layout=cfg.layout, step=10)
summary = frame_attention_summary(rec)
print("attention mass per query frame, step 10, layer 2 (columns: text, frame 0..3)")
print(np.round(summary.masses, 3))
print("self-frame heatmap of frame 1 on the patch grid")
print(np.round(frame_attention_map(rec, query_frame=1), 3))

sim = report_from_capture(rc, "orig")
for i, step in enumerate(sim.steps):
    print(f"step {step:>2}: layer similarity {np.round(sim.values[i], 3)}")

# a clip whose frames are identical scores exactly 1
layout = TokenLayout(S=0, F=3, grid=2)
frame = np.random.default_rng(1).normal(size=(layout.P, 8))
print("identical frames:", adjacent_frame_similarity(np.tile(frame, (layout.F, 1)), layout))
