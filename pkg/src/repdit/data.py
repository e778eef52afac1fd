"""Synthetic moving-shape clips.

A prompt id encodes ``kind_index * 4 + direction``; the shape moves exactly one pixel
per frame in that direction and wraps around the frame edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import make_rng

SHAPE_KINDS = ("square", "bar")
DIRECTIONS = ("right", "left", "down", "up")

# (axis, shift) for np.roll on an (F, G, G) array
_MOTION = {"right": (2, 1), "left": (2, -1), "down": (1, 1), "up": (1, -1)}


@dataclass(frozen=True)
class SyntheticClip:
    video: np.ndarray  # (F, G, G), values in {-1, +1}
    prompt_id: int

    @property
    def kind(self) -> str:
        return SHAPE_KINDS[self.prompt_id // len(DIRECTIONS)]

    @property
    def direction(self) -> str:
        return DIRECTIONS[self.prompt_id % len(DIRECTIONS)]


def prompt_id_for(kind: str, direction: str, kinds=SHAPE_KINDS) -> int:
    return list(kinds).index(kind) * len(DIRECTIONS) + DIRECTIONS.index(direction)


def decode_prompt(prompt_id: int, kinds=SHAPE_KINDS) -> tuple[str, str]:
    k, d = divmod(int(prompt_id), len(DIRECTIONS))
    if not 0 <= k < len(kinds):
        raise ValueError(f"prompt id {prompt_id} does not name a shape kind in {tuple(kinds)}")
    return kinds[k], DIRECTIONS[d]


def _first_frame(kind: str, G: int, top: int, left: int) -> np.ndarray:
    frame = -np.ones((G, G))
    side = max(G // 4, 1)
    if kind == "square":
        h, w = side, side
    elif kind == "bar":
        h, w = max(G // 2, 1), max(side // 2, 1)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    rows = (top + np.arange(h)) % G
    cols = (left + np.arange(w)) % G
    frame[np.ix_(rows, cols)] = 1.0
    return frame


def render_clip(kind: str, direction: str, F: int, G: int, top: int = 0, left: int = 0) -> np.ndarray:
    frame = _first_frame(kind, G, top, left)
    axis, step = _MOTION[direction]
    clip = np.empty((F, G, G))
    for k in range(F):
        clip[k] = np.roll(frame, step * k, axis=axis - 1)
    return clip


def synth_dataset(seed: int, n: int, F: int, G: int, kinds=SHAPE_KINDS) -> list[SyntheticClip]:
    """``n`` clips with random kind, direction and start position, fixed by ``seed``."""
    if n < 1:
        raise ValueError("need at least one clip")
    kinds = tuple(kinds)
    for k in kinds:
        if k not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {k!r}")
    rng = make_rng(seed, 0xDA7A)
    clips = []
    for _ in range(n):
        k = int(rng.integers(len(kinds)))
        d = int(rng.integers(len(DIRECTIONS)))
        top, left = (int(v) for v in rng.integers(G, size=2))
        video = render_clip(kinds[k], DIRECTIONS[d], F, G, top, left)
        clips.append(SyntheticClip(video, k * len(DIRECTIONS) + d))
    return clips
