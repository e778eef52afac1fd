"""Joint text+video token transformer denoiser with a cross-layer feature cache.

Each layer's output is pushed into a :class:`FeatureCache`; the cache mean is blended
back with the layer output through a per-layer sigmoid gate and the blend is what the
next layer (or the output head) sees. With ``repvideo_enabled=False`` the cache is
bypassed and the network is a plain adaLN-style diffusion transformer.

Shapes use ``B`` for batch, ``N = S + F * P`` for tokens and ``d`` for width.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .diffusion import make_rng
from .errors import ConfigError, ShapeError
from .numerics import Tensor

CACHE_POLICIES = ("group_reset", "cumulative", "sliding")


@dataclass(frozen=True)
class ModelConfig:
    L: int = 8
    d: int = 64
    H: int = 4
    F: int = 4
    G: int = 16
    patch: int = 2
    S: int = 4
    m: int = 4
    T: int = 50
    vocab: int = 8
    repvideo_enabled: bool = True
    cache_policy: str = "group_reset"
    gate_init: float = 4.0
    mlp_ratio: int = 4
    # test hook: pin every gate to this value instead of sigmoid(gamma)
    force_gate: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("L", "d", "H", "F", "G", "patch", "S", "m", "T", "vocab", "mlp_ratio"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d % self.H:
            raise ConfigError(f"head count H={self.H} must divide width d={self.d}")
        if self.G % self.patch:
            raise ConfigError(f"patch={self.patch} must divide grid G={self.G}")
        if not 1 <= self.m <= self.L:
            raise ConfigError(f"cache group size m={self.m} must satisfy 1 <= m <= L={self.L}")
        if self.cache_policy not in CACHE_POLICIES:
            raise ConfigError(f"cache_policy must be one of {CACHE_POLICIES}, got {self.cache_policy!r}")
        if self.force_gate is not None and not 0.0 <= self.force_gate <= 1.0:
            raise ConfigError(f"force_gate must lie in [0, 1], got {self.force_gate}")
        if not isinstance(self.repvideo_enabled, bool):
            raise ConfigError("repvideo_enabled must be a boolean")

    @property
    def grid(self) -> int:
        return self.G // self.patch

    @property
    def P(self) -> int:
        return self.grid**2

    @property
    def N(self) -> int:
        return self.S + self.F * self.P

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(S=self.S, F=self.F, grid=self.grid)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenLayout:
    """Text block first, then frames in temporal order, each frame row-major."""

    S: int
    F: int
    grid: int

    @property
    def P(self) -> int:
        return self.grid * self.grid

    @property
    def N(self) -> int:
        return self.S + self.F * self.P

    def token_index(self, frame: int, row: int, col: int) -> int:
        if not (0 <= frame < self.F and 0 <= row < self.grid and 0 <= col < self.grid):
            raise IndexError(f"video position ({frame}, {row}, {col}) outside layout")
        return self.S + frame * self.P + row * self.grid + col

    def locate(self, index: int) -> tuple[int, int, int] | None:
        """Inverse of :meth:`token_index`; ``None`` for text tokens."""
        if not 0 <= index < self.N:
            raise IndexError(f"token index {index} outside 0..{self.N - 1}")
        if index < self.S:
            return None
        frame, rest = divmod(index - self.S, self.P)
        row, col = divmod(rest, self.grid)
        return frame, row, col

    def frame_slice(self, frame: int) -> slice:
        if not 0 <= frame < self.F:
            raise IndexError(f"frame {frame} outside 0..{self.F - 1}")
        start = self.S + frame * self.P
        return slice(start, start + self.P)

    @property
    def text_slice(self) -> slice:
        return slice(0, self.S)

    def to_dict(self) -> dict:
        return {"S": self.S, "F": self.F, "grid": self.grid, "P": self.P, "N": self.N}


@dataclass
class TokenSequence:
    values: Tensor  # (..., N, d)
    layout: TokenLayout

    def __post_init__(self):
        if self.values.ndim < 2 or self.values.shape[-2] != self.layout.N:
            raise ShapeError(f"token values {self.values.shape} do not match layout with N={self.layout.N}")

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# feature cache and gating


@dataclass
class FeatureCache:
    m: int
    policy: str = "group_reset"
    gates: dict[int, Tensor] = field(default_factory=dict)
    override: float | None = None
    buffer: list[TokenSequence] = field(default_factory=list)

    def gate(self, layer: int):
        """``sigmoid(gamma_l)`` as a tensor, or the forced float."""
        if self.override is not None:
            return float(self.override)
        return nx.sigmoid(self.gates[layer])

    def __len__(self) -> int:
        return len(self.buffer)


def cache_push(cache: FeatureCache, f: TokenSequence, layer: int) -> FeatureCache:
    if layer < 1:
        raise ValueError(f"layer index is 1-based, got {layer}")
    if cache.policy == "group_reset":
        if (layer - 1) % cache.m == 0:
            cache.buffer.clear()
    elif cache.policy == "sliding":
        while len(cache.buffer) >= cache.m:
            cache.buffer.pop(0)
    cache.buffer.append(f)
    return cache


def cache_mean(cache: FeatureCache) -> TokenSequence:
    if not cache.buffer:
        raise ValueError("cache_mean on an empty cache")
    layout = cache.buffer[0].layout
    if len(cache.buffer) == 1:
        return TokenSequence(cache.buffer[0].values, layout)
    stacked = nx.stack([s.values for s in cache.buffer], axis=0)
    return TokenSequence(nx.reduce_mean(stacked, axis=0), layout)


def gate_combine(f_orig: TokenSequence, f_mean: TokenSequence, g) -> TokenSequence:
    """``g * f_orig + (1 - g) * f_mean`` for a scalar ``g`` (float or 1-element tensor)."""
    if f_orig.shape != f_mean.shape:
        raise ShapeError(f"gate_combine: shapes differ {f_orig.shape} vs {f_mean.shape}")
    if isinstance(g, Tensor):
        out = nx.add(nx.mul(f_orig.values, g), nx.mul(f_mean.values, nx.add(nx.neg(g), 1.0)))
    else:
        g = float(g)
        out = nx.add(nx.scale(f_orig.values, g), nx.scale(f_mean.values, 1.0 - g))
    return TokenSequence(out, f_orig.layout)


def occupancy_sequence(L: int, m: int, policy: str = "group_reset") -> list[int]:
    """Buffer length after each of layers ``1..L`` (no tensors involved)."""
    cache = FeatureCache(m=m, policy=policy)
    dummy = TokenSequence(Tensor(np.zeros((1, 1))), TokenLayout(S=1, F=0, grid=1))
    seq = []
    for layer in range(1, L + 1):
        cache_push(cache, dummy, layer)
        seq.append(len(cache))
    return seq


# ---------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered manifest of every parameter name and shape."""
    d, pp, hid = config.d, config.patch**2, config.d * config.mlp_ratio
    shapes = [
        ("patch_embed.weight", (pp, d)),
        ("patch_embed.bias", (d,)),
        ("pos_embed", (config.N, d)),
        ("text_table", (config.vocab, config.S, d)),
        ("time_mlp.w1", (d, d)),
        ("time_mlp.b1", (d,)),
        ("time_mlp.w2", (d, d)),
        ("time_mlp.b2", (d,)),
    ]
    for layer in range(1, config.L + 1):
        p = f"layers.{layer}."
        shapes += [
            (p + "mod.weight", (d, 4 * d)),
            (p + "mod.bias", (4 * d,)),
            (p + "attn.qkv.weight", (d, 3 * d)),
            (p + "attn.qkv.bias", (3 * d,)),
            (p + "attn.out.weight", (d, d)),
            (p + "attn.out.bias", (d,)),
            (p + "mlp.w1", (d, hid)),
            (p + "mlp.b1", (hid,)),
            (p + "mlp.w2", (hid, d)),
            (p + "mlp.b2", (d,)),
        ]
        if config.repvideo_enabled:
            shapes.append((p + "gate", (1,)))
    shapes += [
        ("final_norm.gain", (d,)),
        ("final_norm.bias", (d,)),
        ("head.weight", (d, pp)),
        ("head.bias", (pp,)),
    ]
    return shapes


def _init_value(name: str, shape: tuple[int, ...], config: ModelConfig, seed: int) -> np.ndarray:
    if name.endswith(".gate"):
        return np.full(shape, config.gate_init)
    if name == "final_norm.gain":
        return np.ones(shape)
    if name.endswith("bias") or name.startswith("time_mlp.b"):
        return np.zeros(shape)
    # keyed by name so models that differ only in optional parameters share the rest
    rng = make_rng(seed, zlib.crc32(name.encode()))
    if name == "text_table":
        # unit scale like the video tokens; near-zero rows would sit in layer norm's high-curvature region
        std = 1.0
    elif name == "pos_embed":
        std = 0.02
    elif name.endswith("mod.weight"):
        std = 0.02
    else:
        std = 1.0 / math.sqrt(shape[0])
    return rng.standard_normal(shape) * std


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    return {
        name: Tensor(_init_value(name, shape, config, seed), requires_grad=True)
        for name, shape in param_shapes(config)
    }


def gate_values(params: dict[str, Tensor], config: ModelConfig) -> list[float]:
    if not config.repvideo_enabled:
        return []
    with nx.no_grad():
        return [nx.sigmoid(params[f"layers.{l}.gate"]).item() for l in range(1, config.L + 1)]


# ---------------------------------------------------------------------------
# building blocks


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply ``x @ weight + bias`` over the last axis of an N-D tensor."""
    lead = x.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    y = nx.matmul(nx.reshape(x, (rows, x.shape[-1])), weight)
    if bias is not None:
        y = nx.add(y, nx.expand(bias, 0, rows))
    return nx.reshape(y, lead + (weight.shape[1],))


def patchify(latent: np.ndarray, patch: int) -> np.ndarray:
    """``(B, F, G, G) -> (B, F * P, patch**2)`` in layout order."""
    B, F, G, _ = latent.shape
    g = G // patch
    x = latent.reshape(B, F, g, patch, g, patch).transpose(0, 1, 2, 4, 3, 5)
    return x.reshape(B, F * g * g, patch * patch)


def unpatchify(tokens: Tensor, F: int, G: int, patch: int) -> Tensor:
    """Inverse of :func:`patchify` on a tracked tensor."""
    B = tokens.shape[0]
    g = G // patch
    x = nx.reshape(tokens, (B, F, g, g, patch, patch))
    x = nx.transpose(x, (0, 1, 2, 4, 3, 5))
    return nx.reshape(x, (B, F, G, G))


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def embed_video(latent, params: dict[str, Tensor], layout: TokenLayout, patch: int,
                text_tokens: Tensor | None = None) -> TokenSequence:
    """Patch-project a ``(B, F, G, G)`` latent into a full token sequence.

    Text rows hold ``text_tokens`` (zeros when omitted); every row then gets its
    positional embedding.
    """
    latent = latent.data if isinstance(latent, Tensor) else np.asarray(latent, dtype=np.float64)
    if latent.ndim != 4 or latent.shape[1] != layout.F or latent.shape[2] != latent.shape[3] \
            or latent.shape[2] != layout.grid * patch:
        raise ShapeError(f"latent shape {latent.shape} does not match F={layout.F}, G={layout.grid * patch}")
    B = latent.shape[0]
    d = params["patch_embed.weight"].shape[1]
    patches = Tensor(patchify(latent, patch))
    video = linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    if text_tokens is None:
        text_tokens = Tensor(np.zeros((B, layout.S, d)))
    tokens = nx.concat([text_tokens, video], axis=1)
    tokens = nx.add(tokens, nx.expand(params["pos_embed"], 0, B))
    return TokenSequence(tokens, layout)


def embed_condition(prompt_id, t, params: dict[str, Tensor], config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Text tokens ``(B, S, d)`` from the prompt table and modulation vector ``(B, d)``."""
    ids = np.atleast_1d(np.asarray(prompt_id))
    if not np.issubdtype(ids.dtype, np.integer) or ids.min() < 0 or ids.max() >= config.vocab:
        raise ValueError(f"prompt id {prompt_id!r} outside 0..{config.vocab - 1}")
    steps = np.atleast_1d(np.asarray(t))
    if steps.min() < 1 or steps.max() > config.T:
        raise ValueError(f"timestep {t!r} outside 1..{config.T}")
    text = nx.take(params["text_table"], ids, axis=0)
    temb = Tensor(sinusoidal_embedding(steps, config.d))
    h = nx.gelu(linear(temb, params["time_mlp.w1"], params["time_mlp.b1"]))
    c = linear(h, params["time_mlp.w2"], params["time_mlp.b2"])
    return text, c


def _modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    n = x.shape[1]
    return nx.add(nx.mul(x, nx.add(nx.expand(scale_, 1, n), 1.0)), nx.expand(shift, 1, n))


def transformer_layer(tokens: TokenSequence, modulation: Tensor, params: dict[str, Tensor], layer: int,
                      config: ModelConfig, attention_sink: dict | None = None) -> TokenSequence:
    """Pre-norm block with full multi-head attention over all ``N`` tokens.

    ``modulation`` is the ``(B, d)`` conditioning vector. If ``attention_sink`` is a
    dict, the ``(B, H, N, N)`` attention weights are stored under ``layer``.
    """
    p = f"layers.{layer}."
    x = tokens.values
    B, N, d = x.shape
    H = config.H
    dh = d // H
    mod = linear(nx.gelu(modulation), params[p + "mod.weight"], params[p + "mod.bias"])
    shift1, scale1, shift2, scale2 = (mod[:, i * d:(i + 1) * d] for i in range(4))

    h = _modulate(nx.layer_norm(x), shift1, scale1)
    qkv = linear(h, params[p + "attn.qkv.weight"], params[p + "attn.qkv.bias"])
    qkv = nx.transpose(nx.reshape(qkv, (B, N, 3, H, dh)), (2, 0, 3, 1, 4))
    q, k, v = (nx.reshape(qkv[i], (B * H, N, dh)) for i in range(3))
    scores = nx.matmul(nx.scale(q, 1.0 / math.sqrt(dh)), nx.transpose(k, (0, 2, 1)))
    att = nx.softmax(scores, axis=-1)
    if attention_sink is not None:
        attention_sink[layer] = att.data.reshape(B, H, N, N).copy()
    o = nx.reshape(nx.matmul(att, v), (B, H, N, dh))
    o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (B, N, d))
    x = nx.add(x, linear(o, params[p + "attn.out.weight"], params[p + "attn.out.bias"]))

    h = _modulate(nx.layer_norm(x), shift2, scale2)
    h = nx.gelu(linear(h, params[p + "mlp.w1"], params[p + "mlp.b1"]))
    x = nx.add(x, linear(h, params[p + "mlp.w2"], params[p + "mlp.b2"]))
    return TokenSequence(x, tokens.layout)


# ---------------------------------------------------------------------------
# full forward


@dataclass
class Capture:
    """What to record during :func:`forward`, and where it lands.

    Arrays are numpy copies keyed by 1-based layer index. ``features`` holds each
    layer's raw output, ``means`` the cache mean and ``enhanced`` the gated blend.
    A leading batch axis is kept only when the forward input was batched.
    """

    features: bool = True
    attention: bool = False
    layers: frozenset[int] | None = None
    orig: dict[int, np.ndarray] = field(default_factory=dict)
    means: dict[int, np.ndarray] = field(default_factory=dict)
    enhanced: dict[int, np.ndarray] = field(default_factory=dict)
    attn: dict[int, np.ndarray] = field(default_factory=dict)

    def wants(self, layer: int) -> bool:
        return self.layers is None or layer in self.layers


def forward(params: dict[str, Tensor], config: ModelConfig, x_t, t, prompt_id,
            capture: Capture | None = None) -> tuple[Tensor, Capture | None]:
    """Predict epsilon for ``x_t`` of shape ``(F, G, G)`` or ``(B, F, G, G)``."""
    x = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=np.float64)
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    B = x.shape[0]
    steps = np.broadcast_to(np.asarray(t), (B,))
    ids = np.broadcast_to(np.asarray(prompt_id), (B,))
    layout = config.layout

    text, c = embed_condition(ids, steps, params, config)
    h = embed_video(x, params, layout, config.patch, text_tokens=text)

    cache = None
    if config.repvideo_enabled:
        gates = {l: params[f"layers.{l}.gate"] for l in range(1, config.L + 1)}
        cache = FeatureCache(m=config.m, policy=config.cache_policy, gates=gates, override=config.force_gate)

    def keep(arr: np.ndarray) -> np.ndarray:
        return arr.copy() if batched else arr[0].copy()

    for layer in range(1, config.L + 1):
        record = capture is not None and capture.wants(layer)
        sink = {} if record and capture.attention else None
        h = transformer_layer(h, c, params, layer, config, attention_sink=sink)
        if record and capture.features:
            capture.orig[layer] = keep(h.values.data)
        if sink:
            capture.attn[layer] = keep(sink[layer])
        if cache is not None:
            cache_push(cache, h, layer)
            mean = cache_mean(cache)
            h = gate_combine(h, mean, cache.gate(layer))
            if record and capture.features:
                capture.means[layer] = keep(mean.values.data)
                capture.enhanced[layer] = keep(h.values.data)

    out = nx.layer_norm(h.values, params["final_norm.gain"], params["final_norm.bias"])
    video = out[:, config.S:, :]
    eps = unpatchify(linear(video, params["head.weight"], params["head.bias"]), config.F, config.G, config.patch)
    if not batched:
        eps = nx.reshape(eps, eps.shape[1:])
    return eps, capture


class RepDiT:
    """Config plus parameter dict, callable as a denoiser ``(x_t, t, prompt_id) -> eps``."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        expected = dict(param_shapes(config))
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @property
    def layout(self) -> TokenLayout:
        return self.config.layout

    def forward(self, x_t, t, prompt_id, capture: Capture | None = None):
        return forward(self.params, self.config, x_t, t, prompt_id, capture)

    def __call__(self, x_t, t, prompt_id):
        return forward(self.params, self.config, x_t, t, prompt_id)[0]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def gates(self) -> list[float]:
        return gate_values(self.params, self.config)
