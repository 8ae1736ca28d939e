"""Procedural grayscale "toy faces" with identity x emotion structure.

Identity parameters (face width, eye spacing, skin tone) shape the head and
eyes; the emotion class only draws inside two fixed windows, one for the
brows and one for the mouth, so that two faces sharing an identity differ
exclusively inside those windows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EMOTIONS = ("neutral", "happy", "sad", "surprised", "scared", "disgusted", "angry")

# mouth curvature, mouth opening, brow tilt (inner end up > 0), brow raise
_EMOTION_FEATURES = {
    0: (0.0, 0.0, 0.0, 0.0),
    1: (1.0, 0.0, 0.0, 0.0),
    2: (-1.0, 0.0, 1.0, 0.0),
    3: (0.0, 1.0, 0.0, 1.0),
    4: (-0.6, 0.5, 1.0, 1.0),
    5: (-0.5, 0.0, -1.0, 0.0),
    6: (0.0, 0.0, -1.0, -1.0),
}

MIN_SIZE = 8


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class FaceSpec:
    identity: tuple[float, float, float]
    emotion: int

    def __post_init__(self):
        if len(self.identity) != 3 or any(abs(v) > 1 for v in self.identity):
            raise RenderError(f"identity must be 3 values in [-1, 1], got {self.identity}")
        if self.emotion not in _EMOTION_FEATURES:
            raise RenderError(f"unknown emotion {self.emotion}")


def _windows(size: int):
    """Boolean brow and mouth windows in unit coordinates of the image."""
    u = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(u, u, indexing="ij")
    brow = (yy >= 0.17) & (yy < 0.36) & (xx >= 0.16) & (xx < 0.84)
    mouth = (yy >= 0.58) & (yy < 0.86) & (xx >= 0.25) & (xx < 0.75)
    return brow, mouth


def emotion_mask(size: int) -> np.ndarray:
    brow, mouth = _windows(size)
    return brow | mouth


def _soft(d, width):
    return np.exp(-0.5 * (d / width) ** 2)


def render_face(spec: FaceSpec, size: int = 16) -> np.ndarray:
    """Render ``spec`` as a ``(size, size)`` float image in [0, 1]."""
    if size < MIN_SIZE:
        raise RenderError(f"size must be at least {MIN_SIZE}, got {size}")
    width_p, spacing_p, tone_p = spec.identity
    curve, opening, tilt, raise_ = _EMOTION_FEATURES[spec.emotion]

    px = 1.0 / size
    u = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(u, u, indexing="ij")

    # head: soft ellipse on a dark background
    skin = 0.62 + 0.2 * tone_p
    ax = 0.33 + 0.07 * width_p
    ay = 0.43
    r = np.sqrt(((xx - 0.5) / ax) ** 2 + ((yy - 0.52) / ay) ** 2)
    head = 1.0 / (1.0 + np.exp((r - 1.0) / 0.06))
    img = 0.08 + (skin - 0.08) * head

    # eyes, clear of both emotion windows
    dx = 0.13 + 0.05 * spacing_p
    eyes = _soft(np.hypot(xx - 0.5 + dx, yy - 0.45), 0.9 * px) + \
        _soft(np.hypot(xx - 0.5 - dx, yy - 0.45), 0.9 * px)
    img = img * (1.0 - 0.75 * np.clip(eyes, 0, 1))

    brow_win, mouth_win = _windows(size)

    # brows: two short strokes whose inner ends tilt with the emotion
    strokes = np.zeros_like(img)
    for side in (-1.0, 1.0):
        cx = 0.5 + side * 0.19
        t = np.clip((xx - cx) / 0.11, -1.0, 1.0)
        inner = -side * t  # +1 at the inner end
        by = 0.27 - 0.045 * raise_ - 0.04 * tilt * inner
        on = np.abs(xx - cx) <= 0.12
        strokes = np.maximum(strokes, on * _soft(yy - by, 0.7 * px))
    img = np.where(brow_win, img * (1.0 - 0.7 * strokes), img)

    # mouth: a curved line, optionally opened into a dark ellipse
    mx = np.clip((xx - 0.5) / 0.2, -1.0, 1.0)
    my = 0.72 - 0.11 * curve * (1.0 - mx ** 2) + 0.05 * curve
    line = (np.abs(xx - 0.5) <= 0.21) * _soft(yy - my, 0.7 * px)
    mouth = line
    if opening > 0:
        rr = np.hypot((xx - 0.5) / 0.1, (yy - 0.72) / (0.09 * opening))
        mouth = np.maximum(line, 1.0 / (1.0 + np.exp(np.minimum((rr - 1.0) / 0.15, 50.0))))
    img = np.where(mouth_win, img * (1.0 - 0.8 * mouth), img)
    return np.clip(img, 0.0, 1.0)


def sample_specs(n: int, rng, num_classes: int = len(EMOTIONS), balanced: bool = True) -> list[FaceSpec]:
    """``n`` specs with uniform identities; classes cycle when ``balanced``."""
    ids = rng.uniform((n, 3), -1.0, 1.0)
    if balanced:
        labels = np.arange(n) % num_classes
        labels = labels[rng.permutation(n)]
    else:
        labels = rng.integers(0, num_classes, size=n)
    return [FaceSpec(tuple(float(v) for v in ids[i]), int(labels[i])) for i in range(n)]


def render_batch(specs, size: int = 16) -> np.ndarray:
    return np.stack([render_face(s, size) for s in specs])
