"""Minibatch training on the epsilon-prediction objective.

Every random draw of step ``k`` comes from ``make_rng(seed, STREAM, k)``, so a run
resumed from a checkpoint replays exactly the batches, timesteps and noise the
uninterrupted run would have used.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import RunConfig
from .data import SyntheticClip, synth_dataset
from .diffusion import NoiseSchedule, make_rng, training_loss
from .errors import NonFiniteError, TrainingDivergedError
from .model import forward, init_params
from .numerics import Tensor
from .optim import Adam

log = logging.getLogger(__name__)

_BATCH_STREAM = 0x7EA1


@dataclass
class TrainResult:
    config: RunConfig
    params: dict[str, Tensor]
    losses: list[float] = field(default_factory=list)
    step: int = 0
    checkpoint_path: Path | None = None
    log_path: Path | None = None

    def smoothed(self) -> list[float]:
        return smooth(self.losses, self.config.optim.smoothing_window)


def smooth(losses, window: int) -> list[float]:
    """Trailing mean over at most ``window`` previous values."""
    out, acc = [], 0.0
    for i, v in enumerate(losses):
        acc += v
        if i >= window:
            acc -= losses[i - window]
        out.append(acc / min(i + 1, window))
    return out


def sample_minibatch(clips: list[SyntheticClip], step: int, config: RunConfig):
    rng = make_rng(config.seed, _BATCH_STREAM, step)
    B, T = config.optim.batch_size, config.model.T
    idx = rng.integers(len(clips), size=B)
    x0 = np.stack([clips[i].video for i in idx])
    ids = np.array([clips[i].prompt_id for i in idx])
    t = rng.integers(1, T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    return x0, t, eps, ids


def loss_for(params: dict[str, Tensor], config: RunConfig, schedule: NoiseSchedule, x0, t, eps, ids) -> Tensor:
    def denoiser(x_t, steps, prompt):
        return forward(params, config.model, x_t, steps, prompt)[0]

    return training_loss(denoiser, x0, t, eps, schedule, ids)


def _snapshot(config, params, step, opt, losses) -> ckpt_io.Checkpoint:
    return ckpt_io.Checkpoint(
        config=config,
        params={n: p.data for n, p in params.items()},
        step=step,
        optimizer=opt.state_arrays(),
        extra={"losses": list(losses)},
    )


def write_loss_log(path, losses, window: int) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["step", "loss", "smoothed"])
        for i, (v, s) in enumerate(zip(losses, smooth(losses, window)), start=1):
            w.writerow([i, repr(float(v)), repr(float(s))])
    return path


def train(config: RunConfig, out_dir=None, resume=None, steps: int | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``) up to ``steps`` total optimizer steps.

    With ``out_dir`` set, writes ``loss.csv``, ``checkpoint.rpvd``, periodic
    ``checkpoint_step*.rpvd`` files and a timestamped ``run.log`` sidecar.
    """
    total = config.optim.steps if steps is None else int(steps)
    schedule = config.noise_schedule()
    clips = synth_dataset(config.data.seed, config.data.clips, config.model.F, config.model.G, config.data.kinds)
    o = config.optim
    opt = Adam(o.lr, o.beta1, o.beta2, o.eps)

    if resume is not None:
        state = resume if isinstance(resume, ckpt_io.Checkpoint) else ckpt_io.load(resume)
        if state.config.to_dict()["model"] != config.to_dict()["model"]:
            raise TrainingDivergedError("resume checkpoint was trained with a different model config")
        params = {n: Tensor(a.copy(), requires_grad=True) for n, a in state.params.items()}
        opt.load_state(state.step, state.optimizer)
        losses = [float(v) for v in state.extra.get("losses", [])][: state.step]
        start = state.step
    else:
        params = init_params(config.model, seed=config.seed)
        losses, start = [], 0

    out = Path(out_dir) if out_dir is not None else None
    sidecar = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json() + "\n")
        sidecar = (out / "run.log").open("a")
        sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} start step={start} target={total}\n")

    try:
        for step in range(start, total):
            x0, t, eps, ids = sample_minibatch(clips, step, config)
            try:
                loss = loss_for(params, config, schedule, x0, t, eps, ids)
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite value at step {step + 1}: {exc}") from None
            losses.append(loss.item())
            params = opt.step(params)
            done = step + 1
            if done % 50 == 0 or done == total:
                log.info("step %d loss %.5f", done, losses[-1])
            if out is not None and o.checkpoint_every and done % o.checkpoint_every == 0 and done != total:
                ckpt_io.save(_snapshot(config, params, done, opt, losses), out / f"checkpoint_step{done:06d}.rpvd")
            if sidecar is not None and done % 50 == 0:
                sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} step={done} loss={losses[-1]!r}\n")
    finally:
        if sidecar is not None:
            sidecar.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} stop step={len(losses)}\n")
            sidecar.close()

    result = TrainResult(config, params, losses, step=max(total, start))
    if out is not None:
        result.checkpoint_path = ckpt_io.save(
            _snapshot(config, params, result.step, opt, losses), out / "checkpoint.rpvd")
        result.log_path = write_loss_log(out / "loss.csv", losses, o.smoothing_window)
    return result
