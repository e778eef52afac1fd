"""Experiment commands behind the ``repdit`` CLI: train, sample, analyze, compare.

Every command is a plain function returning the paths it wrote, so the same code
paths run from Python and from the shell.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import capture as capture_io
from . import checkpoint as ckpt_io
from . import report
from .analysis import (
    RunCapture,
    export_feature_map,
    frame_attention_summary,
    report_from_capture,
    run_capture,
)
from .config import RunConfig, load_config
from .errors import CaptureFormatError
from .model import RepDiT
from .numerics import Tensor
from .train import TrainResult, train

log = logging.getLogger(__name__)


def model_from_checkpoint(ck: ckpt_io.Checkpoint) -> RepDiT:
    params = {n: Tensor(a, requires_grad=True) for n, a in ck.params.items()}
    return RepDiT(ck.config.model, params)


def cmd_train(config, out_dir, resume=None) -> TrainResult:
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    return train(cfg, out_dir=out_dir, resume=resume)


def cmd_sample(ckpt_path, prompt_id: int, seed: int, out_dir=".", capture: bool = False,
               steps=None, layers=None, attention: bool = False) -> dict[str, Path]:
    """Sample one clip; write ``.npy`` and a PGM strip, plus an RPVA1 capture if asked."""
    ck = ckpt_io.load(ckpt_path)
    model = model_from_checkpoint(ck)
    if not 0 <= prompt_id < model.config.vocab:
        raise ValueError(f"prompt id {prompt_id} outside 0..{model.config.vocab - 1}")
    schedule = ck.config.noise_schedule()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"sample_p{prompt_id}_s{seed}"
    rc = run_capture(model, schedule, prompt_id, seed, steps=steps if capture else [],
                     layers=layers, attention=attention and capture)
    paths = {}
    with (out / f"{stem}.npy").open("wb") as fh:
        np.save(fh, rc.sample, allow_pickle=False)
    paths["clip"] = out / f"{stem}.npy"
    paths["pgm"] = out / f"{stem}.pgm"
    paths["pgm"].write_bytes(report.pgm_strip(rc.sample))
    if capture:
        paths["capture"] = capture_io.write_capture(rc, out / f"{stem}.rpva")
    return paths


def _load_any(path, prompt_id: int, seed: int, steps, layers) -> RunCapture:
    blob = Path(path).read_bytes()
    if blob.startswith(capture_io.MAGIC):
        rc = capture_io.from_bytes(blob)
        if steps is not None or layers is not None:
            rc = _restrict(rc, steps, layers)
        return rc
    if blob.startswith(ckpt_io.MAGIC):
        ck = ckpt_io.from_bytes(blob)
        return run_capture(model_from_checkpoint(ck), ck.config.noise_schedule(), prompt_id, seed,
                           steps=steps, layers=layers, attention=True)
    raise CaptureFormatError(f"{path}: neither a capture (RPVA1) nor a checkpoint (RPVD)")


def _restrict(rc: RunCapture, steps, layers) -> RunCapture:
    steps = rc.steps if steps is None else [s for s in rc.steps if s in set(steps)]
    layers = rc.layers if layers is None else [l for l in rc.layers if l in set(layers)]
    if not steps or not layers:
        raise ValueError("requested steps/layers are not present in the capture")
    keep = {(s, l) for s in steps for l in layers}
    return dataclasses.replace(
        rc, steps=steps, layers=layers,
        features={k: {key: v for key, v in store.items() if key in keep} for k, store in rc.features.items()},
        attention={key: v for key, v in rc.attention.items() if key in keep},
    )


def analyze_capture(rc: RunCapture, out_dir, prefix: str = "") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for kind in rc.kinds():
        rep = report_from_capture(rc, kind)
        paths[f"similarity_{kind}_csv"] = report.write_similarity_csv(rep, out / f"{prefix}similarity_{kind}.csv")
        series = {f"step {s}": vals for s, vals in rep.series().items()}
        svg = report.svg_line_chart(rep.layers, series, f"adjacent-frame similarity ({kind} features)")
        paths[f"similarity_{kind}_svg"] = report.write_text(out / f"{prefix}similarity_{kind}.svg", svg)

    if rc.attention:
        summaries = [frame_attention_summary(rc.attention_record(s, l))
                     for s in rc.steps for l in rc.layers if (s, l) in rc.attention]
        paths["attention_csv"] = report.write_attention_csv(summaries, out / f"{prefix}attention_summary.csv")
        first = rc.steps[0]
        for summ in summaries:
            if summ.step != first:
                continue
            F = summ.masses.shape[0]
            svg = report.svg_heatmap(summ.masses, f"attention mass, step {first}, layer {summ.layer}",
                                     [f"q{f}" for f in range(F)], ["text"] + [f"f{f}" for f in range(F)])
            paths[f"attention_l{summ.layer}_svg"] = report.write_text(
                out / f"{prefix}attention_step{first}_layer{summ.layer}.svg", svg)

    step, layer = rc.steps[0], rc.layers[-1]
    for kind in rc.kinds():
        fmap = export_feature_map(rc.features[kind][(step, layer)], 0, rc.layout)
        svg = report.svg_heatmap(fmap, f"feature norm ({kind}), step {step}, layer {layer}, frame 0")
        paths[f"featuremap_{kind}_svg"] = report.write_text(out / f"{prefix}featuremap_{kind}.svg", svg)
    return paths


def cmd_analyze(in_path, out_dir=".", steps=None, layers=None, prompt_id: int = 0, seed: int = 0) -> dict[str, Path]:
    """Similarity CSV/SVG, attention-mass CSV/heatmaps and feature maps for a capture or checkpoint."""
    rc = _load_any(in_path, prompt_id, seed, steps, layers)
    return analyze_capture(rc, out_dir)


def cmd_compare(config, seeds, out_dir, steps=None, prompt_id: int = 0) -> dict[str, Path]:
    """Train a baseline and a cached-aggregation model on identical data, then compare.

    Both runs share the config except ``repvideo_enabled``. For each sampling seed a
    capture is written per model and the per-layer similarities land in
    ``compare.csv`` alongside their difference.
    """
    cfg = config if isinstance(config, RunConfig) else load_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = {
        "baseline": dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, repvideo_enabled=False)),
        "repvideo": dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, repvideo_enabled=True)),
    }
    results = {name: train(vcfg, out_dir=out / name) for name, vcfg in variants.items()}
    schedule = cfg.noise_schedule()

    paths: dict[str, Path] = {}
    rows, mean_series = [], {}
    for seed in seeds:
        reports = {}
        for name, res in results.items():
            model = RepDiT(variants[name].model, res.params)
            rc = run_capture(model, schedule, prompt_id, int(seed), steps=steps)
            paths[f"capture_{name}_s{seed}"] = capture_io.write_capture(rc, out / name / f"capture_s{seed}.rpva")
            reports[name] = report_from_capture(rc, "orig")
        base, rep = reports["baseline"], reports["repvideo"]
        for i, s in enumerate(base.steps):
            for j, l in enumerate(base.layers):
                b, r = float(base.values[i, j]), float(rep.values[i, j])
                rows.append([int(seed), s, l, b, r, r - b])
        for name, r in reports.items():
            acc = mean_series.setdefault(name, np.zeros_like(r.values))
            acc += r.values / len(seeds)
        layers_axis = base.layers
        steps_axis = base.steps

    paths["compare_csv"] = report.write_rows_csv(
        out / "compare.csv", ["seed", "step", "layer", "baseline", "repvideo", "delta"], rows)
    losses = [[i + 1, b, r] for i, (b, r) in enumerate(zip(results["baseline"].losses, results["repvideo"].losses))]
    paths["losses_csv"] = report.write_rows_csv(out / "losses.csv", ["step", "baseline", "repvideo"], losses)

    series = {}
    for i, s in enumerate(steps_axis):
        for name in ("baseline", "repvideo"):
            series[f"{name} step {s}"] = [float(v) for v in mean_series[name][i]]
    svg = report.svg_line_chart(layers_axis, series, "adjacent-frame similarity: baseline vs cached aggregation")
    paths["compare_svg"] = report.write_text(out / "compare.svg", svg)
    loss_svg = report.svg_line_chart(
        [row[0] for row in losses],
        {"baseline": results["baseline"].smoothed(), "repvideo": results["repvideo"].smoothed()},
        "smoothed training loss", xlabel="step", ylabel="loss")
    paths["losses_svg"] = report.write_text(out / "losses.svg", loss_svg)
    final = {name: res.smoothed()[-1] if res.losses else float("nan") for name, res in results.items()}
    log.info("final smoothed loss baseline=%.5f repvideo=%.5f", final["baseline"], final["repvideo"])
    return paths
