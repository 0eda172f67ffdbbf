"""Head training on a frozen backbone.

Streams are featurized once with teacher forcing (ground-truth assistant
turns in context): the penultimate-layer FLAG state per second, plus the
final-norm hidden state at every assistant position for the LM head. Training
then runs Adam over 36-second clips cut from those streams, with per-clip
losses averaged over a batch.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import losses as L
from .data import segment_clips
from .errors import NumericError
from .model import HEAD_PARAMS, Model, fit_head_standardization, response_backward, response_forward
from .streaming import ChunkInput, StreamEngine
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)


@dataclass
class StreamFeatures:
    flag_h: np.ndarray  # (T, d_model)
    labels: np.ndarray  # (T,)
    lm_h: np.ndarray  # (N, d_model)
    lm_targets: np.ndarray  # (N,)
    lm_mask: np.ndarray  # (N,)
    lm_second: np.ndarray  # (N,) index of the second each row belongs to


@dataclass
class Clip:
    h: np.ndarray
    y: np.ndarray
    lm_h: np.ndarray
    lm_targets: np.ndarray
    lm_mask: np.ndarray


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    batch_clips: int = 32
    clip_len: int = 36
    overlap: int = 18
    seed: int = 0
    max_grad_norm: float = 1.0
    use_cls: bool = True
    use_smooth: bool = True
    use_rate: bool = True
    train_lm_head: bool = True
    standardize: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    curve: list[dict] = field(default_factory=list)


def featurize(
    model: Model,
    tok: Tokenizer,
    chunks: Sequence[ChunkInput],
    labels: Sequence[int],
    captions: Sequence[str | None],
    window: int | None = None,
) -> StreamFeatures:
    engine = StreamEngine(model, tok, window=window)
    flags, lm_h, lm_t, lm_m, lm_s = [], [], [], [], []
    for i, (chunk, y, cap) in enumerate(zip(chunks, labels, captions)):
        target = tok.encode(cap) if y else []
        fs, feats, targets, mask = engine.teacher_step(chunk, bool(y) and bool(target), target)
        flags.append(fs.hidden)
        lm_h.append(feats)
        lm_t.append(targets)
        lm_m.append(mask)
        lm_s.append(np.full(len(targets), i))
    return StreamFeatures(
        np.array(flags),
        np.asarray(labels, dtype=np.int64),
        np.concatenate(lm_h),
        np.concatenate(lm_t),
        np.concatenate(lm_m),
        np.concatenate(lm_s),
    )


def make_clips(features: Sequence[StreamFeatures], clip_len: int = 36, overlap: int = 18) -> list[Clip]:
    clips = []
    for f in features:
        T = len(f.labels)
        specs = segment_clips(T, clip_len, overlap) or ([] if T == 0 else [None])
        for spec in specs:
            lo, hi = (0, T) if spec is None else (spec.start_s, spec.end_s)
            rows = (f.lm_second >= lo) & (f.lm_second < hi)
            clips.append(Clip(f.flag_h[lo:hi], f.labels[lo:hi], f.lm_h[rows], f.lm_targets[rows], f.lm_mask[rows]))
    return clips


def batch_loss(
    params: dict[str, np.ndarray],
    clips: Sequence[Clip],
    loss_cfg: L.LossConfig,
    tcfg: TrainConfig,
    with_grad: bool = True,
):
    """Mean over clips of ``main + alpha * (cls + reg)`` and its parameter gradients."""
    B = len(clips)
    h = np.concatenate([c.h for c in clips])
    p, tape = response_forward(h, params)
    dl_dp = np.zeros_like(p)
    parts = {"main": 0.0, "cls": 0.0, "reg": 0.0}
    grad_lm = np.zeros_like(params["lm_head"]) if with_grad else None
    start = 0
    for c in clips:
        sl = slice(start, start + len(c.y))
        start = sl.stop
        pc = p[sl]
        if tcfg.use_cls:
            parts["cls"] += L.loss_cls(pc, c.y, loss_cfg) / B
            dl_dp[sl] += L.grad_cls(pc, c.y, loss_cfg) / B
        if tcfg.use_smooth or tcfg.use_rate:
            parts["reg"] += L.loss_reg(pc, c.y, tcfg.use_smooth, tcfg.use_rate) / B
            dl_dp[sl] += L.grad_reg(pc, c.y, tcfg.use_smooth, tcfg.use_rate) / B
        if tcfg.train_lm_head and c.lm_mask.any():
            logits = c.lm_h @ params["lm_head"]
            parts["main"] += L.loss_main(logits, c.lm_targets, c.lm_mask) / B
            if with_grad:
                grad_lm += c.lm_h.T @ L.grad_main(logits, c.lm_targets, c.lm_mask) / B
    parts["total"] = L.loss_total(parts["main"], parts["cls"], parts["reg"], loss_cfg)
    if not with_grad:
        return parts, None
    grads = response_backward(tape, loss_cfg.alpha * dl_dp, params)
    if tcfg.train_lm_head:
        grads["lm_head"] = grad_lm
    return parts, grads


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))
    if max_norm and norm > max_norm:
        for k in grads:
            grads[k] = grads[k] * (max_norm / norm)
    return norm


def train_head(
    params: dict[str, np.ndarray],
    clips: Sequence[Clip],
    loss_cfg: L.LossConfig = L.LossConfig(),
    tcfg: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Train the response head (and the LM head) on pre-featurized clips.

    Only the trainable entries are copied and updated; backbone arrays are
    shared with the input dict.
    """
    trainable = list(HEAD_PARAMS) + (["lm_head"] if tcfg.train_lm_head else [])
    params = {k: (v.copy() if k in trainable else v) for k, v in params.items()}
    if not clips:
        raise ValueError("no training clips")
    if tcfg.standardize and tcfg.steps > 0 and loss_cfg.alpha > 0:
        fit_head_standardization(params, np.concatenate([c.h for c in clips]))
    rng = np.random.default_rng(tcfg.seed)
    opt = Adam({k: params[k] for k in trainable}, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    curve = []
    for step in range(1, tcfg.steps + 1):
        idx = rng.choice(len(clips), size=min(tcfg.batch_clips, len(clips)), replace=False)
        parts, grads = batch_loss(params, [clips[i] for i in idx], loss_cfg, tcfg)
        if not np.isfinite(parts["total"]):
            raise NumericError(f"non-finite loss at step {step}: {parts}")
        clip_grad_norm(grads, tcfg.max_grad_norm)
        opt.step(params, grads)
        curve.append({"step": step, **parts})
    return TrainResult(params, curve)


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "main", "cls", "reg", "total"])
        w.writeheader()
        for row in curve:
            w.writerow({k: row[k] for k in w.fieldnames})
