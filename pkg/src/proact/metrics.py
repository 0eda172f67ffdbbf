"""Temporal proactivity metrics: TimeDiff, per-second F1 and PAUC.

Conventions: a ground-truth interval ``[a, b]`` covers seconds ``a..b-1`` for
per-second metrics (F1, PAUC), so its length in seconds is ``b - a``. TimeDiff
tests prediction starts against the closed interval ``[a, b]``.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidScoreError, UndefinedMetricError


@dataclass(frozen=True)
class GtInterval:
    a: int
    b: int

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError(f"interval end {self.b} must exceed start {self.a}")


@dataclass(frozen=True)
class PredTimeline:
    starts: tuple[int, ...]
    speak_seconds: frozenset[int]

    @classmethod
    def from_speak_seconds(cls, seconds: Iterable[int]) -> "PredTimeline":
        """Starts are the first second of every contiguous speaking run."""
        s = sorted(set(int(x) for x in seconds))
        starts = tuple(t for i, t in enumerate(s) if i == 0 or s[i - 1] != t - 1)
        return cls(starts, frozenset(s))


@dataclass(frozen=True)
class TimeDiffConfig:
    delta: float = 3.0
    penalty_alpha: float = 1.0

    def __post_init__(self):
        if self.delta < 0 or self.penalty_alpha < 0:
            raise ValueError("delta and penalty_alpha must be non-negative")


def _sorted_intervals(gt: Iterable[GtInterval]) -> list[GtInterval]:
    gt = sorted(gt, key=lambda g: (g.a, g.b))
    for prev, cur in zip(gt, gt[1:]):
        if cur.a < prev.b:
            raise ValueError(f"overlapping intervals [{prev.a},{prev.b}] and [{cur.a},{cur.b}]")
    return gt


def intervals_from_labels(y) -> list[GtInterval]:
    """Maximal runs of ones as half-open ``[a, b)`` intervals."""
    y = np.asarray(y).astype(bool)
    padded = np.concatenate([[False], y, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [GtInterval(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def associate(gt: Sequence[GtInterval], starts: Iterable[int]) -> list[list[float]]:
    """Assign every prediction start to the interval with the nearest onset (ties go earlier)."""
    onsets = [g.a for g in gt]
    groups: list[list[float]] = [[] for _ in gt]
    for t in starts:
        j = bisect.bisect_left(onsets, t)
        cands = [k for k in (j - 1, j) if 0 <= k < len(onsets)]
        best = min(cands, key=lambda k: (abs(t - onsets[k]), k))
        groups[best].append(t)
    return groups


def timediff(
    gt: Iterable[GtInterval],
    pred: PredTimeline,
    cfg: TimeDiffConfig = TimeDiffConfig(),
) -> tuple[list[float], float]:
    """Per-interval TimeDiff and their unweighted mean.

    Base term: distance from the onset to the closest start inside ``[a, b]``,
    or ``b - a`` if none. Each associated start outside ``[a - delta, b + delta]``
    adds ``penalty_alpha``.
    """
    gt = _sorted_intervals(gt)
    if not gt:
        raise UndefinedMetricError("TimeDiff is undefined without ground-truth intervals")
    starts = sorted(pred.starts)
    groups = associate(gt, starts)
    values = []
    for g, assoc in zip(gt, groups):
        inside = [abs(t - g.a) for t in starts if g.a <= t <= g.b]
        base = float(min(inside)) if inside else float(g.b - g.a)
        outside = sum(1 for t in assoc if not (g.a - cfg.delta <= t <= g.b + cfg.delta))
        values.append(base + cfg.penalty_alpha * outside)
    return values, float(np.mean(values))


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    degenerate: bool  # some ratio had a zero denominator and was reported as 0


def gt_mask(gt: Iterable[GtInterval], horizon: int) -> np.ndarray:
    m = np.zeros(horizon, dtype=bool)
    for g in gt:
        m[g.a : g.b] = True
    return m


def temporal_f1(gt: Iterable[GtInterval], pred: PredTimeline, horizon: int) -> F1Result:
    truth = gt_mask(gt, horizon)
    guess = np.zeros(horizon, dtype=bool)
    guess[[t for t in pred.speak_seconds if 0 <= t < horizon]] = True
    tp = int(np.sum(truth & guess))
    fp = int(np.sum(~truth & guess))
    fn = int(np.sum(truth & ~guess))
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    f1 = ratio(2 * precision * recall, precision + recall)
    return F1Result(precision, recall, f1, tp, fp, fn, degenerate)


def pauc(
    gt: Iterable[GtInterval],
    judge_scores: Mapping[int, int],
    omega: float = 0.5,
    s0: float = 0.0,
    max_score: float = 3.0,
) -> float:
    """Trajectory-integrated quality over in-interval seconds, in ``[0, 1]``.

    ``S_t = (1 - omega) * S_{t-1} + omega * q_t`` runs over all in-interval
    seconds in time order, with ``q_t`` the judge score of a response at
    second ``t`` (0 if none). The result is ``mean(S_t) / max_score``.
    """
    for t, s in judge_scores.items():
        if s not in (1, 2, 3):
            raise InvalidScoreError(f"score {s!r} at t={t} not in {{1, 2, 3}}")
    seconds = [t for g in _sorted_intervals(gt) for t in range(g.a, g.b)]
    if not seconds:
        return 0.0
    S, total = s0, 0.0
    for t in seconds:
        S = (1.0 - omega) * S + omega * judge_scores.get(t, 0)
        total += S
    return total / len(seconds) / max_score


def metrics_report(
    gt: Sequence[GtInterval],
    pred: PredTimeline,
    horizon: int,
    scores: Mapping[int, int] | None = None,
    td_cfg: TimeDiffConfig = TimeDiffConfig(),
    omega: float = 0.5,
) -> dict:
    _, td = timediff(gt, pred, td_cfg)
    f = temporal_f1(gt, pred, horizon)
    report = {"timediff": td, "precision": f.precision, "recall": f.recall, "f1": f.f1}
    if scores is not None:
        report["pauc"] = pauc(gt, scores, omega)
    return report
