"""Dual-segment sliding-window KV cache.

The cache holds a *system* segment that is never evicted, followed by a
*streaming* segment of interleaved user/assistant tokens. When an incoming
block would push the total past the window budget, the oldest fraction of
the streaming segment is dropped and the survivors are re-based so that they
start right after the system prompt. Re-basing rotates the stored keys with
``rope_shift``; values carry no position and are left alone.

Storage is preallocated to the window size, shaped
``(n_layers, n_heads, window, d_head)``, with system entries first and
streaming entries packed right after them.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CacheOverflowError,
    InvalidConfigError,
    PositionOrderError,
    SealedSegmentError,
    ShapeError,
)
from .rope import RopeFreqs, rope_shift

logger = logging.getLogger(__name__)

SYSTEM = "system"
STREAMING = "streaming"


@dataclass
class CacheEntry:
    """One token's keys and values across all layers and heads.

    ``key`` and ``value`` have shape ``(n_layers, n_heads, d_head)``; ``key`` is
    rotated at ``position``.
    """

    key: np.ndarray
    value: np.ndarray
    position: int


@dataclass(frozen=True)
class EvictionReport:
    evicted_count: int
    delta: int
    new_first_position: int
    streaming_len_before: int


class DualCache:
    def __init__(
        self,
        n_layers: int,
        n_heads: int,
        d_head: int,
        window: int,
        evict_fraction: float = 0.2,
    ):
        if window < 1:
            raise InvalidConfigError(f"window must be positive, got {window}")
        if not 0 < evict_fraction <= 1:
            raise InvalidConfigError(f"evict_fraction must be in (0, 1], got {evict_fraction}")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_head = d_head
        self.window = window
        self.evict_fraction = evict_fraction
        # exact rational so ceil(0.2 * 85) is 17, not 18
        self._frac = Fraction(str(evict_fraction))
        shape = (n_layers, n_heads, window, d_head)
        self._keys = np.zeros(shape, dtype=np.float64)
        self._values = np.zeros(shape, dtype=np.float64)
        self._positions = np.zeros(window, dtype=np.int64)
        self.system_len = 0
        self.streaming_len = 0
        self._sealed = False
        self.history: list[EvictionReport] = []

    # -- views -------------------------------------------------------------

    def __len__(self) -> int:
        return self.system_len + self.streaming_len

    @property
    def positions(self) -> np.ndarray:
        return self._positions[: len(self)]

    @property
    def system_positions(self) -> np.ndarray:
        return self._positions[: self.system_len]

    @property
    def streaming_positions(self) -> np.ndarray:
        return self._positions[self.system_len : len(self)]

    def layer_kv(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Views of the occupied keys and values for one layer, shape ``(heads, n, d_head)``."""
        n = len(self)
        return self._keys[layer, :, :n], self._values[layer, :, :n]

    def keys(self) -> np.ndarray:
        return self._keys[:, :, : len(self)]

    def values(self) -> np.ndarray:
        return self._values[:, :, : len(self)]

    def next_position(self) -> int:
        """Position id for the next token; 0 for an empty cache."""
        if len(self) == 0:
            return 0
        return int(self.positions.max()) + 1

    # -- mutation ----------------------------------------------------------

    def append(self, keys, values, positions, segment: str = STREAMING) -> "DualCache":
        """Append a block of tokens.

        Args:
            keys: rotated keys, shape ``(n_layers, n_heads, n, d_head)``.
            values: values, same shape as ``keys``.
            positions: ``n`` integer position ids, strictly increasing and
                continuing the segment.
            segment: ``"system"`` or ``"streaming"``.
        """
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        n = positions.shape[0]
        expected = (self.n_layers, self.n_heads, n, self.d_head)
        if keys.shape != expected or values.shape != expected:
            raise ShapeError(f"expected k/v shape {expected}, got {keys.shape} / {values.shape}")
        if segment not in (SYSTEM, STREAMING):
            raise ValueError(f"unknown segment {segment!r}")
        if n == 0:
            return self
        if segment == SYSTEM and self._sealed:
            raise SealedSegmentError("system segment is sealed once streaming entries exist")
        if np.any(np.diff(positions) <= 0):
            raise PositionOrderError(f"positions must strictly increase: {positions.tolist()}")
        if segment == SYSTEM:
            prev = self.system_positions
        else:
            prev = self.positions  # streaming must also follow the system prompt
        if prev.size and positions[0] <= prev[-1]:
            raise PositionOrderError(
                f"position {positions[0]} does not follow last {segment} position {prev[-1]}"
            )
        if len(self) + n > self.window:
            raise CacheOverflowError(
                f"appending {n} entries to {len(self)} would exceed window {self.window}"
            )
        start = len(self)
        self._keys[:, :, start : start + n] = keys
        self._values[:, :, start : start + n] = values
        self._positions[start : start + n] = positions
        if segment == SYSTEM:
            self.system_len += n
        else:
            self.streaming_len += n
            self._sealed = True
        return self

    def append_entries(self, entries: Sequence[CacheEntry], segment: str = STREAMING) -> "DualCache":
        if not entries:
            return self
        keys = np.stack([e.key for e in entries], axis=2)
        values = np.stack([e.value for e in entries], axis=2)
        return self.append(keys, values, [e.position for e in entries], segment)

    def entries(self, segment: str | None = None) -> Iterable[CacheEntry]:
        lo, hi = 0, len(self)
        if segment == SYSTEM:
            hi = self.system_len
        elif segment == STREAMING:
            lo = self.system_len
        for i in range(lo, hi):
            yield CacheEntry(
                key=self._keys[:, :, i].copy(),
                value=self._values[:, :, i].copy(),
                position=int(self._positions[i]),
            )

    def maybe_evict(self, incoming_len: int, freqs: RopeFreqs) -> list[EvictionReport]:
        """Make room for ``incoming_len`` tokens.

        Each pass drops ``ceil(fraction * streaming_len)`` of the oldest
        streaming entries and re-bases the survivors to start at
        ``last_system_position + 1``. Passes repeat until the incoming block
        fits. Returns one report per pass; an empty list means nothing moved.
        """
        if incoming_len < 0:
            raise ValueError(f"incoming_len must be >= 0, got {incoming_len}")
        if incoming_len > self.window - self.system_len:
            raise CacheOverflowError(
                f"chunk of {incoming_len} tokens cannot fit in window {self.window} "
                f"with a {self.system_len}-token system prompt"
            )
        reports = []
        while len(self) + incoming_len > self.window:
            reports.append(self._evict_once(freqs))
        return reports

    def _evict_once(self, freqs: RopeFreqs) -> EvictionReport:
        n = self.streaming_len
        drop = min(n, math.ceil(self._frac * n))
        s = self.system_len
        keep = n - drop
        p_i = int(self._positions[s - 1]) + 1 if s else 0
        if keep:
            src = slice(s + drop, s + n)
            dst = slice(s, s + keep)
            self._keys[:, :, dst] = self._keys[:, :, src]
            self._values[:, :, dst] = self._values[:, :, src]
            self._positions[dst] = self._positions[src]
            p_j = int(self._positions[s])
            delta = p_j - p_i
            if delta:
                self._keys[:, :, dst] = rope_shift(self._keys[:, :, dst], delta, freqs)
                self._positions[dst] -= delta
        else:
            delta = 0
        self.streaming_len = keep
        report = EvictionReport(
            evicted_count=drop,
            delta=delta,
            new_first_position=p_i,
            streaming_len_before=n,
        )
        self.history.append(report)
        logger.debug("evicted %d streaming entries, delta=%d", drop, delta)
        return report

    # -- debugging ---------------------------------------------------------

    def debug_dict(self) -> dict:
        def span(p):
            return [int(p[0]), int(p[-1])] if p.size else None

        return {
            "window": self.window,
            "system_len": self.system_len,
            "streaming_len": self.streaming_len,
            "system_positions": span(self.system_positions),
            "streaming_positions": span(self.streaming_positions),
            "evictions": [asdict(r) for r in self.history],
        }

    def dump_debug(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.debug_dict(), fh, indent=2)
