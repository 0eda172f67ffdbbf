"""Per-second caption splitting, label derivation, clip segmentation and
response-rate stratified sampling."""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import OutOfRangeError

logger = logging.getLogger(__name__)

RATE_BINS = ((0.0, 0.3), (0.3, 0.7), (0.7, 1.0))
DEFAULT_QUOTAS = (60, 120, 60)


@dataclass
class AsrSegment:
    start_s: float
    end_s: float
    text: str
    speaker: str = "assistant"

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"segment end {self.end_s} must exceed start {self.start_s}")
        if not self.text.strip():
            raise ValueError("segment text is empty")

    @classmethod
    def from_json(cls, d: dict) -> "AsrSegment":
        return cls(float(d["start"]), float(d["end"]), str(d["text"]), str(d.get("speaker", "assistant")))


@dataclass
class PerSecondCaption:
    second: int
    words: list[str]
    continues: bool
    speaker: str = "assistant"

    @property
    def text(self) -> str:
        body = " ".join(self.words)
        if not self.continues:
            return body
        return f"{body} ..." if body else "..."

    def to_json(self) -> dict:
        return {"speaker": self.speaker, "second": self.second, "text": self.text, "continues": self.continues}


@dataclass
class ClipSpec:
    start_s: int
    end_s: int
    clip_len: int = 36
    overlap: int = 18
    response_rate: float | None = None
    source: str = ""

    def to_json(self) -> dict:
        return asdict(self)


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def split_caption(seg: AsrSegment) -> list[PerSecondCaption]:
    """Distribute the words of one segment over its rounded seconds.

    With ``n`` words over ``t`` seconds, ``q = n // t`` and ``r = n - t*q``:
    the first ``r`` seconds take ``q + 1`` words, the rest ``q``. All but the
    last second are marked as continuing.
    """
    words = seg.text.split()
    start = round_half_up(seg.start_s)
    t = round_half_up(seg.end_s) - start
    if t < 1:
        logger.info("segment [%s, %s] rounds to %d s; using one second", seg.start_s, seg.end_s, t)
        t = 1
    n = len(words)
    q, r = divmod(n, t)
    out, i = [], 0
    for s in range(t):
        k = q + 1 if s < r else q
        out.append(PerSecondCaption(start + s, words[i : i + k], continues=s < t - 1, speaker=seg.speaker))
        i += k
    return out


def merge_captions(captions: Iterable[PerSecondCaption]) -> list[PerSecondCaption]:
    """One caption per (speaker, second); colliding seconds are concatenated in order."""
    merged: dict[tuple[str, int], PerSecondCaption] = {}
    for c in captions:
        key = (c.speaker, c.second)
        if key in merged:
            logger.info("caption collision at second %d for %s; concatenating", c.second, c.speaker)
            prev = merged[key]
            merged[key] = PerSecondCaption(c.second, prev.words + c.words, c.continues, c.speaker)
        else:
            merged[key] = c
    return sorted(merged.values(), key=lambda c: (c.speaker, c.second))


def derive_labels(captions: Sequence[PerSecondCaption], horizon: int) -> np.ndarray:
    """``y[t] = 1`` iff second ``t`` carries at least one word."""
    y = np.zeros(horizon, dtype=np.int64)
    for c in captions:
        if not 0 <= c.second < horizon:
            raise OutOfRangeError(f"caption at second {c.second} outside horizon {horizon}")
        if c.words:
            y[c.second] = 1
    return y


def segment_clips(video_len_s: int, clip_len: int = 36, overlap: int = 18, source: str = "") -> list[ClipSpec]:
    if not clip_len > overlap >= 0:
        raise ValueError("need clip_len > overlap >= 0")
    stride = clip_len - overlap
    return [
        ClipSpec(s, s + clip_len, clip_len, overlap, source=source)
        for s in range(0, int(video_len_s) - clip_len + 1, stride)
    ]


def with_response_rates(clips: Sequence[ClipSpec], labels) -> list[ClipSpec]:
    labels = np.asarray(labels)
    out = []
    for c in clips:
        window = labels[c.start_s : c.end_s]
        rate = float(window.mean()) if window.size else 0.0
        out.append(ClipSpec(c.start_s, c.end_s, c.clip_len, c.overlap, rate, c.source))
    return out


def rate_bin(rate: float) -> int:
    """Index into ``RATE_BINS``: ``[0, .3)``, ``[.3, .7)``, ``[.7, 1]``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"response rate {rate} outside [0, 1]")
    if rate < 0.3:
        return 0
    if rate < 0.7:
        return 1
    return 2


def stratify(
    clips: Sequence[ClipSpec],
    seed: int,
    quotas: Sequence[int] = DEFAULT_QUOTAS,
) -> list[ClipSpec]:
    """Sample up to ``quotas[b]`` clips per response-rate bin, separately per source."""
    rng = np.random.default_rng(seed)
    by_source: dict[str, list[list[ClipSpec]]] = defaultdict(lambda: [[] for _ in RATE_BINS])
    for c in clips:
        if c.response_rate is None:
            raise ValueError(f"clip {c.start_s}-{c.end_s} has no response rate")
        by_source[c.source][rate_bin(c.response_rate)].append(c)
    sample = []
    for source in sorted(by_source):
        for b, (pool, quota) in enumerate(zip(by_source[source], quotas)):
            if len(pool) < quota:
                logger.warning("source %r bin %d: %d clips for quota %d", source, b, len(pool), quota)
                sample.extend(pool)
            else:
                idx = np.sort(rng.choice(len(pool), size=quota, replace=False))
                sample.extend(pool[i] for i in idx)
    return sample


def read_asr(path) -> list[AsrSegment]:
    segs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                segs.append(AsrSegment.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: {exc}") from exc
    return segs
