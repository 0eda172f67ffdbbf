"""Rotary position embeddings with exact position shifting.

Channels ``(2m, 2m+1)`` form rotation pair ``m`` and are rotated by
``p * freqs[m]``. Because 2D rotations compose additively, a key that was
rotated at position ``p`` can be moved to ``p - delta`` by rotating it by
``-delta``; no access to the un-rotated key is needed.

All math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, ShapeError


@dataclass(frozen=True)
class RopeFreqs:
    dims: int
    freqs: np.ndarray
    base: float

    def __post_init__(self):
        if self.dims < 2 or self.dims % 2:
            raise InvalidConfigError(f"head dimension must be even and >= 2, got {self.dims}")
        if self.freqs.shape != (self.dims // 2,):
            raise InvalidConfigError(
                f"expected {self.dims // 2} frequencies, got shape {self.freqs.shape}"
            )


def default_freqs(d: int, base: float = 10000.0) -> RopeFreqs:
    """Standard schedule ``freqs[m] = base ** (-2m / d)``."""
    if not isinstance(d, (int, np.integer)) or d < 2 or d % 2:
        raise InvalidConfigError(f"head dimension must be an even integer >= 2, got {d!r}")
    if not base > 1:
        raise InvalidConfigError(f"rope base must be > 1, got {base!r}")
    m = np.arange(d // 2, dtype=np.float64)
    freqs = np.power(float(base), -2.0 * m / d)
    freqs.setflags(write=False)
    return RopeFreqs(dims=int(d), freqs=freqs, base=float(base))


def rotation_angles(p, f: RopeFreqs) -> np.ndarray:
    """Per-pair angles ``p * freqs``; ``p`` may be a scalar or an array of positions."""
    p = np.asarray(p, dtype=np.float64)
    return p[..., None] * f.freqs


def rope_rotate(x, p, f: RopeFreqs) -> np.ndarray:
    """Rotate ``x`` (shape ``(..., d)``) to position ``p``.

    ``p`` broadcasts against ``x.shape[:-1]``, so a ``(heads, n, d)`` block can
    be rotated with a length-``n`` position vector.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != f.dims:
        raise ShapeError(f"last dimension {x.shape[-1]} != rope dims {f.dims}")
    theta = rotation_angles(p, f)
    cos, sin = np.cos(theta), np.sin(theta)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, theta.shape[:-1] + (f.dims,)), dtype=np.float64)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_shift(k_rotated, delta, f: RopeFreqs) -> np.ndarray:
    """Move already-rotated keys from position ``p`` to ``p - delta``."""
    return rope_rotate(k_rotated, -np.asarray(delta, dtype=np.float64), f)
