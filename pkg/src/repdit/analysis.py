"""Representation instruments: frame attention mass, per-frame attention maps,
adjacent-frame feature similarity over layers and denoising steps, feature maps.

All functions operate on plain numpy arrays captured from a forward pass; a token
sequence is ``(N, d)`` laid out per :class:`~repdit.model.TokenLayout`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, make_rng, sample_loop
from .errors import ShapeError
from .model import Capture, FeatureCache, RepDiT, TokenLayout, TokenSequence, cache_mean, cache_push
from .numerics import Tensor, no_grad

FEATURE_KINDS = ("orig", "mean", "enh")


@dataclass(frozen=True)
class AttentionRecord:
    """Attention weights of one layer, ``(H, N, N)`` query-major (or ``(N, N)`` for one head)."""

    layer: int
    weights: np.ndarray
    layout: TokenLayout
    head: int | None = None
    step: int | None = None

    def heads(self, head: int | None = None) -> np.ndarray:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim == 2:
            w = w[None]
        if w.shape[1:] != (self.layout.N, self.layout.N):
            raise ShapeError(f"attention weights {w.shape} do not match N={self.layout.N}")
        if head is not None:
            w = w[head:head + 1]
        return w


@dataclass
class FrameAttentionSummary:
    """``masses[f] = [text, frame 0, ..., frame F-1]`` attention mass of query frame ``f``."""

    masses: np.ndarray
    layer: int | None = None
    step: int | None = None

    def row(self, query_frame: int) -> np.ndarray:
        return self.masses[query_frame]


def _features(features, layout: TokenLayout | None) -> tuple[np.ndarray, TokenLayout]:
    if isinstance(features, TokenSequence):
        return features.values.data, features.layout
    if layout is None:
        raise ValueError("a layout is required when passing a raw array")
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if arr.shape[-2] != layout.N:
        raise ShapeError(f"features {arr.shape} do not match layout with N={layout.N}")
    return arr, layout


def _check_frame(layout: TokenLayout, frame: int) -> None:
    if not 0 <= frame < layout.F:
        raise IndexError(f"frame {frame} outside 0..{layout.F - 1}")


def frame_attention_distribution(rec: AttentionRecord, query_frame: int, head: int | None = None) -> np.ndarray:
    """Mean attention mass from ``query_frame``'s tokens into the text block and each frame.

    Rows are renormalized per query token before averaging; heads are averaged
    unless ``head`` picks one. Returns ``F + 1`` values, text first.
    """
    layout = rec.layout
    _check_frame(layout, query_frame)
    w = rec.heads(head)[:, layout.frame_slice(query_frame), :]
    w = w / w.sum(axis=-1, keepdims=True)
    S, P, F = layout.S, layout.P, layout.F
    text = w[..., :S].sum(axis=-1)
    frames = w[..., S:].reshape(w.shape[0], w.shape[1], F, P).sum(axis=-1)
    blocks = np.concatenate([text[..., None], frames], axis=-1)
    return blocks.mean(axis=(0, 1))


def frame_attention_summary(rec: AttentionRecord, head: int | None = None) -> FrameAttentionSummary:
    masses = np.stack([frame_attention_distribution(rec, f, head) for f in range(rec.layout.F)])
    return FrameAttentionSummary(masses, rec.layer, rec.step)


def frame_attention_map(rec: AttentionRecord, query_frame: int, head: int | None = None) -> np.ndarray:
    """Self-frame attention heatmap on the patch grid.

    Each query token of the frame has its attention restricted to the frame's own
    keys and renormalized; the map is the mean over query tokens (and heads).
    Queries with no mass on their own frame contribute zeros.
    """
    layout = rec.layout
    _check_frame(layout, query_frame)
    sl = layout.frame_slice(query_frame)
    block = rec.heads(head)[:, sl, sl]
    totals = block.sum(axis=-1, keepdims=True)
    normed = np.divide(block, totals, out=np.zeros_like(block), where=totals > 0)
    return normed.mean(axis=(0, 1)).reshape(layout.grid, layout.grid)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dots = np.einsum("...i,...i->...", a, b)
    # zero-norm vectors count as similarity 0
    out = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return np.clip(out, -1.0, 1.0)


def adjacent_frame_similarity(features, layout: TokenLayout | None = None, mode: str = "token") -> list[float]:
    """Cosine similarity of each adjacent frame pair, ``F - 1`` values.

    ``mode="token"`` compares spatially corresponding tokens and averages over the
    ``P`` positions; ``mode="pooled"`` compares the frames' mean token vectors.
    """
    arr, layout = _features(features, layout)
    if layout.F < 2:
        raise ShapeError(f"adjacent-frame similarity needs at least 2 frames, layout has F={layout.F}")
    video = arr[..., layout.S:, :].reshape(arr.shape[:-2] + (layout.F, layout.P, arr.shape[-1]))
    if video.ndim != 3:
        raise ShapeError("adjacent_frame_similarity expects a single (N, d) token sequence")
    if mode == "token":
        sims = _cosine_rows(video[:-1], video[1:]).mean(axis=-1)
    elif mode == "pooled":
        pooled = video.mean(axis=1)
        sims = _cosine_rows(pooled[:-1], pooled[1:])
    else:
        raise ValueError(f"unknown similarity mode {mode!r}")
    return [float(s) for s in sims]


def export_feature_map(features, frame: int, layout: TokenLayout | None = None) -> np.ndarray:
    """Per-token L2 norm of ``frame`` on the patch grid, min-max scaled to ``[0, 1]``."""
    arr, layout = _features(features, layout)
    _check_frame(layout, frame)
    norms = np.linalg.norm(arr[layout.frame_slice(frame)], axis=-1)
    lo, hi = norms.min(), norms.max()
    if hi - lo <= 0:
        return np.zeros((layout.grid, layout.grid))
    return ((norms - lo) / (hi - lo)).reshape(layout.grid, layout.grid)


# ---------------------------------------------------------------------------
# sweeps over a sampling trajectory


@dataclass
class RunCapture:
    """Features and attention recorded while sampling one trajectory.

    Keys of ``features[kind]`` and ``attention`` are ``(step, layer)``; ``inputs``
    maps step to the ``x_t`` the model saw.
    """

    layout: TokenLayout
    steps: list[int]
    layers: list[int]
    prompt_id: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)
    features: dict[str, dict[tuple[int, int], np.ndarray]] = field(default_factory=dict)
    attention: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    sample: np.ndarray | None = None

    def kinds(self) -> list[str]:
        return [k for k in FEATURE_KINDS if self.features.get(k)]

    def attention_record(self, step: int, layer: int) -> AttentionRecord:
        return AttentionRecord(layer, self.attention[(step, layer)], self.layout, step=step)


@dataclass
class SimilarityReport:
    """Mean adjacent-frame similarity per (step, layer), with per-pair detail."""

    steps: list[int]
    layers: list[int]
    values: np.ndarray  # (len(steps), len(layers))
    detail: np.ndarray  # (len(steps), len(layers), F - 1)
    kind: str = "orig"

    def rows(self):
        """``(step, layer, frame_pair, similarity)`` in step-major order."""
        for i, s in enumerate(self.steps):
            for j, l in enumerate(self.layers):
                for p, v in enumerate(self.detail[i, j]):
                    yield s, l, p, float(v)

    def series(self) -> dict[int, list[float]]:
        """Per step, the layer-wise mean similarity."""
        return {s: [float(v) for v in self.values[i]] for i, s in enumerate(self.steps)}


def default_steps(T: int, count: int = 5) -> list[int]:
    return sorted({int(round(v)) for v in np.linspace(T, 1, min(count, T))}, reverse=True)


def run_capture(model: RepDiT, schedule: NoiseSchedule, prompt_id: int, seed: int,
                steps=None, layers=None, attention: bool = False) -> RunCapture:
    """Sample one trajectory, recording features (and optionally attention) at ``steps``."""
    cfg = model.config
    if cfg.F < 2:
        raise ShapeError(f"adjacent-frame similarity needs at least 2 frames, config has F={cfg.F}")
    steps = default_steps(schedule.T) if steps is None else sorted({int(s) for s in steps}, reverse=True)
    layers = list(range(1, cfg.L + 1)) if layers is None else sorted({int(l) for l in layers})
    for s in steps:
        if not 1 <= s <= schedule.T:
            raise ValueError(f"step {s} outside 1..{schedule.T}")
    for l in layers:
        if not 1 <= l <= cfg.L:
            raise ValueError(f"layer {l} outside 1..{cfg.L}")
    rc = RunCapture(model.layout, steps, layers, prompt_id, seed,
                    meta={"model": cfg.to_dict(), "schedule": schedule.to_dict()})
    wanted = set(steps)
    layer_set = frozenset(layers)

    def denoiser(x_t, t, cond):
        if t not in wanted:
            return model(x_t, t, cond)
        cap = Capture(features=True, attention=attention, layers=layer_set)
        eps, _ = model.forward(x_t, t, cond, capture=cap)
        rc.inputs[t] = x_t.data.copy()
        for kind, store in (("orig", cap.orig), ("mean", cap.means), ("enh", cap.enhanced)):
            for l, arr in store.items():
                rc.features.setdefault(kind, {})[(t, l)] = arr
        for l, arr in cap.attn.items():
            rc.attention[(t, l)] = arr
        return eps

    with no_grad():
        rc.sample = sample_loop(denoiser, (cfg.F, cfg.G, cfg.G), schedule, prompt_id, seed).data
    return rc


def report_from_capture(rc: RunCapture, kind: str = "orig", mode: str = "token") -> SimilarityReport:
    store = rc.features.get(kind)
    if not store:
        raise KeyError(f"capture holds no {kind!r} features")
    if rc.layout.F < 2:
        raise ShapeError("adjacent-frame similarity needs at least 2 frames")
    detail = np.zeros((len(rc.steps), len(rc.layers), rc.layout.F - 1))
    for i, s in enumerate(rc.steps):
        for j, l in enumerate(rc.layers):
            detail[i, j] = adjacent_frame_similarity(store[(s, l)], rc.layout, mode=mode)
    return SimilarityReport(list(rc.steps), list(rc.layers), detail.mean(axis=-1), detail, kind)


def similarity_sweep(model: RepDiT, schedule: NoiseSchedule, prompt_id: int, seed: int,
                     steps=None, layers=None, kinds=("orig", "mean")) -> dict[str, SimilarityReport]:
    """Layer x step similarity reports for each requested feature kind the model produces."""
    rc = run_capture(model, schedule, prompt_id, seed, steps, layers)
    return {k: report_from_capture(rc, k) for k in kinds if rc.features.get(k)}


def posthoc_group_means(features_by_layer: dict[int, np.ndarray], m: int, policy: str = "group_reset") -> dict[int, np.ndarray]:
    """Cache means recomputed from per-layer outputs, e.g. for a baseline without a cache."""
    layers = sorted(features_by_layer)
    if layers != list(range(1, len(layers) + 1)):
        raise ValueError("post-hoc aggregation needs every layer from 1 upward")
    any_arr = features_by_layer[layers[0]]
    layout = TokenLayout(S=any_arr.shape[-2], F=0, grid=1)
    cache = FeatureCache(m=m, policy=policy)
    out = {}
    for l in layers:
        cache_push(cache, TokenSequence(Tensor(features_by_layer[l]), layout), l)
        out[l] = cache_mean(cache).values.data
    return out


# ---------------------------------------------------------------------------
# synthetic check of the aggregation mechanism


def aggregation_trial(seed: int, m: int = 6, F: int = 4, P: int = 16, d: int = 32,
                      snr: float = 1.0, drift: float = 0.3) -> tuple[float, float]:
    """One draw of ``f_l = s + noise_l`` for ``l = 1..m``.

    ``s`` is a frame-coherent signal (a shared base plus a small per-frame drift) and
    each layer adds independent zero-mean noise whose power is ``1 / snr`` times
    the signal power. Returns ``(similarity of the cache mean, mean per-layer similarity)``.
    """
    rng = make_rng(seed, 0xA66)
    base = rng.standard_normal((P, d))
    signal = base[None] + drift * rng.standard_normal((F, P, d))
    signal_power = float(np.mean(signal**2))
    noise_std = np.sqrt(signal_power / snr)
    layout = TokenLayout(S=0, F=F, grid=int(round(np.sqrt(P))))
    if layout.P != P:
        raise ValueError("P must be a perfect square")
    cache = FeatureCache(m=m)
    per_layer = []
    for l in range(1, m + 1):
        f = (signal + noise_std * rng.standard_normal((F, P, d))).reshape(F * P, d)
        seq = TokenSequence(Tensor(f), layout)
        cache_push(cache, seq, l)
        per_layer.append(float(np.mean(adjacent_frame_similarity(seq))))
    aggregated = float(np.mean(adjacent_frame_similarity(cache_mean(cache))))
    return aggregated, float(np.mean(per_layer))
