"""Training objective: masked LM loss plus the response loss.

The response loss combines a transition-weighted BCE over the per-second
speaking probabilities with a stability regularizer (smoothness inside
persistence runs plus a speaking-rate match). Every loss has a matching
``grad_*`` returning the gradient with respect to its direct input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidConfigError, InvalidTargetError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 5.0
    alpha: float = 0.2
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.gamma < 1:
            raise InvalidConfigError(f"gamma must be >= 1, got {self.gamma}")
        if self.alpha < 0:
            raise InvalidConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 < self.epsilon < 0.5:
            raise InvalidConfigError(f"epsilon must be in (0, 0.5), got {self.epsilon}")


def _check_pair(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ShapeError(f"p and y must be 1-D and equal length, got {p.shape} / {y.shape}")
    if p.size == 0:
        raise ShapeError("empty timeline")
    return p, y


def transition_weights(y, gamma: float = 5.0) -> np.ndarray:
    """``gamma`` where the label flips from the previous second, 1 elsewhere (first second is 1)."""
    y = np.asarray(y)
    w = np.ones(y.shape, dtype=np.float64)
    if y.size > 1:
        w[1:][y[1:] != y[:-1]] = gamma
    return w


def loss_cls(p, y, cfg: LossConfig = LossConfig()) -> float:
    p, y = _check_pair(p, y)
    w = transition_weights(y, cfg.gamma)
    pc = np.clip(p, cfg.epsilon, 1.0 - cfg.epsilon)
    bce = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    return float(np.sum(w * bce) / np.sum(w))


def grad_cls(p, y, cfg: LossConfig = LossConfig()) -> np.ndarray:
    p, y = _check_pair(p, y)
    w = transition_weights(y, cfg.gamma)
    inside = (p > cfg.epsilon) & (p < 1.0 - cfg.epsilon)
    pc = np.clip(p, cfg.epsilon, 1.0 - cfg.epsilon)
    g = w * (-y / pc + (1.0 - y) / (1.0 - pc)) / np.sum(w)
    return np.where(inside, g, 0.0)


def _persistence(y) -> np.ndarray:
    """Indices t >= 1 with y[t] == y[t-1]."""
    y = np.asarray(y)
    return np.flatnonzero(y[1:] == y[:-1]) + 1


def loss_reg(p, y, smooth: bool = True, rate: bool = True) -> float:
    """Mean squared step inside persistence runs plus squared rate mismatch.

    ``smooth``/``rate`` switch the two terms off for ablations.
    """
    p, y = _check_pair(p, y)
    total = 0.0
    idx = _persistence(y)
    if smooth and idx.size:
        total += float(np.mean((p[idx] - p[idx - 1]) ** 2))
    if rate:
        total += float(p.mean() - y.mean()) ** 2
    return total


def grad_reg(p, y, smooth: bool = True, rate: bool = True) -> np.ndarray:
    """Gradient of :func:`loss_reg`; the label rate is a constant."""
    p, y = _check_pair(p, y)
    g = np.zeros(p.shape)
    if rate:
        g += 2.0 * (p.mean() - y.mean()) / p.size
    idx = _persistence(y)
    if smooth and idx.size:
        d = 2.0 * (p[idx] - p[idx - 1]) / idx.size
        np.add.at(g, idx, d)
        np.add.at(g, idx - 1, -d)
    return g


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_lm(logits, targets, mask):
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise ShapeError("expected logits (N, V), targets (N,), mask (N,)")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise InvalidTargetError("target id outside vocabulary")
    return logits, targets, mask


def loss_main(logits, targets, mask) -> float:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    logits, targets, mask = _check_lm(logits, targets, mask)
    if not mask.any():
        logger.warning("loss_main: empty mask (all-silent sample), returning 0")
        return 0.0
    lp = _log_softmax(logits[mask])
    return float(-lp[np.arange(lp.shape[0]), targets[mask]].mean())


def grad_main(logits, targets, mask) -> np.ndarray:
    """Gradient of :func:`loss_main` with respect to ``logits``."""
    logits, targets, mask = _check_lm(logits, targets, mask)
    g = np.zeros_like(logits)
    m = int(mask.sum())
    if not m:
        return g
    sm = np.exp(_log_softmax(logits[mask]))
    sm[np.arange(m), targets[mask]] -= 1.0
    g[mask] = sm / m
    return g


def loss_resp(p, y, cfg: LossConfig = LossConfig()) -> float:
    return loss_cls(p, y, cfg) + loss_reg(p, y)


def loss_total(main: float, cls: float, reg: float, cfg: LossConfig = LossConfig()) -> float:
    return main + cfg.alpha * (cls + reg)


def grad_response(
    p,
    y,
    cfg: LossConfig,
    chain: Callable[[np.ndarray], dict[str, np.ndarray]],
    use_cls: bool = True,
    use_reg: bool = True,
) -> dict[str, np.ndarray]:
    """Gradient of ``alpha * (L_cls + L_reg)`` with respect to the head parameters.

    ``chain`` is the head's vector-Jacobian product: it maps ``dL/dp`` (one
    value per FLAG position) to per-parameter gradients.
    """
    dl_dp = np.zeros(np.shape(p))
    if use_cls:
        dl_dp += grad_cls(p, y, cfg)
    if use_reg:
        dl_dp += grad_reg(p, y)
    return chain(cfg.alpha * dl_dp)
