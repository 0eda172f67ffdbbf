"""Toy decoder-only transformer with RoPE attention and a FLAG response head.

Pre-norm residual blocks (RMS norm, multi-head causal attention, SiLU MLP),
float64 throughout. The backbone is seeded random and frozen; the LM output
head and the response head are the trainable parts.

Attention against the cache is split into a cached part and a new-token part
so the cache is never copied during decoding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidConfigError, MissingFlagError, ShapeError
from .kvcache import STREAMING, SYSTEM, DualCache, EvictionReport
from .rope import RopeFreqs, default_freqs, rope_rotate

HEAD_PARAMS = ("head.w_g", "head.b_g", "head.w_v", "head.b_v", "head.w", "head.b")
# fixed input standardization of the head, fitted from data, never trained
HEAD_BUFFERS = ("head.mu", "head.inv_std")


@dataclass
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    head_hidden: int = 64
    max_window: int = 2048
    rope_base: float = 10000.0
    gen_budget: int = 12
    norm_eps: float = 1e-6
    evict_fraction: float = 0.2
    # first-layer recency bias, see init_weights
    local_first_layer: bool = True
    locality_strength: float = 1.5
    locality_min_pair: int = 4
    locality_qk_scale: float = 0.3

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise InvalidConfigError("d_model must be divisible by n_heads")
        if self.d_head % 2:
            raise InvalidConfigError(f"d_head must be even, got {self.d_head}")
        if self.gen_budget < 1:
            raise InvalidConfigError("gen_budget must be >= 1")
        if self.n_layers < 1:
            raise InvalidConfigError("need at least one layer")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class FlagState:
    hidden: np.ndarray
    chunk_index: int = 0


class ForwardOutput(NamedTuple):
    hidden: np.ndarray  # (n_layers + 1, n, d_model); [0] is the embedding, [l + 1] block l output
    final: np.ndarray  # (n, d_model) after the final norm, input of the LM head
    logits: np.ndarray  # (n, vocab)
    positions: np.ndarray
    evictions: list[EvictionReport] = []


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split branches so large |x| never overflows exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def init_weights(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, F, R, V = cfg.d_model, cfg.d_ff, cfg.head_hidden, cfg.vocab_size

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    p = {"tok_emb": normal((V, D), 1.0)}
    for l in range(cfg.n_layers):
        p[f"l{l}.ln1"] = np.ones(D)
        p[f"l{l}.wq"] = normal((D, D), D**-0.5)
        p[f"l{l}.wk"] = normal((D, D), D**-0.5)
        p[f"l{l}.wv"] = normal((D, D), D**-0.5)
        p[f"l{l}.wo"] = normal((D, D), D**-0.5)
        p[f"l{l}.ln2"] = np.ones(D)
        p[f"l{l}.w1"] = normal((D, F), D**-0.5)
        p[f"l{l}.w2"] = normal((F, D), F**-0.5)
    if cfg.local_first_layer:
        _add_recency_bias(p, cfg, rng)
    p["ln_f"] = np.ones(D)
    p["lm_head"] = normal((D, V), D**-0.5)
    p["head.w_g"] = normal((R, D), D**-0.5)
    p["head.b_g"] = np.zeros(R)
    p["head.w_v"] = normal((R, D), D**-0.5)
    p["head.b_v"] = np.zeros(R)
    p["head.w"] = normal((R,), R**-0.5)
    p["head.b"] = np.zeros(())
    p["head.mu"] = np.zeros(D)
    p["head.inv_std"] = np.ones(D)
    return p


def _add_recency_bias(p: dict[str, np.ndarray], cfg: ModelConfig, rng) -> None:
    """Give the first layer's heads a smooth preference for nearby tokens.

    Every embedding gets a shared component along a unit direction ``e``.
    Query and key projections of layer 0 map ``e`` to the same per-head
    vector ``u`` spread over rotation pairs ``locality_min_pair..d_head/2-1``,
    so the shared part of every query-key score is
    ``sum_m |u_m|^2 cos(dist * freqs[m])``, which decays with distance. The
    random part of those projections is scaled down so it does not swamp the
    bias. Without this a frozen random backbone attends almost uniformly and
    the FLAG state cannot localize the current chunk.
    """
    D, H, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    e = rng.normal(size=D)
    e /= np.linalg.norm(e)
    p["tok_emb"] += math.sqrt(D) * e
    p["l0.wq"] *= cfg.locality_qk_scale
    p["l0.wk"] *= cfg.locality_qk_scale
    for j in range(H):
        u = np.zeros(dh)
        # small heads: fall back to the slowest pair rather than an empty set
        pairs = np.arange(min(cfg.locality_min_pair, dh // 2 - 1), dh // 2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=pairs.size)
        u[2 * pairs] = np.cos(phase)
        u[2 * pairs + 1] = np.sin(phase)
        u /= np.linalg.norm(u)
        bias = cfg.locality_strength * np.outer(e, u)
        p["l0.wq"][:, j * dh : (j + 1) * dh] += bias
        p["l0.wk"][:, j * dh : (j + 1) * dh] += bias


# -- response head ---------------------------------------------------------


def response_forward(h: np.ndarray, params: dict[str, np.ndarray]):
    """Gated MLP + sigmoid. ``h`` is ``(d_model,)`` or ``(T, d_model)``.

    The input is first standardized with the fixed ``head.mu`` /
    ``head.inv_std`` buffers (identity unless fitted). Returns ``(p, tape)``
    where ``tape`` feeds :func:`response_backward`.
    """
    h = (np.asarray(h, dtype=np.float64) - params["head.mu"]) * params["head.inv_std"]
    gate = sigmoid(h @ params["head.w_g"].T + params["head.b_g"])
    val = np.tanh(h @ params["head.w_v"].T + params["head.b_v"])
    z = (gate * val) @ params["head.w"] + params["head.b"]
    p = sigmoid(z)
    return p, (h, gate, val, p)


def response_score(h, params: dict[str, np.ndarray]):
    """Speaking probability for a FLAG hidden state (or a batch of them)."""
    if isinstance(h, FlagState):
        h = h.hidden
    return response_forward(h, params)[0]


def response_backward(tape, dl_dp, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of the head: gradients of a loss given ``dL/dp``."""
    h, gate, val, p = tape
    batched = h.ndim == 2
    if not batched:
        h, gate, val, p = h[None], gate[None], val[None], np.atleast_1d(p)
    dl_dp = np.atleast_1d(np.asarray(dl_dp, dtype=np.float64))
    dz = dl_dp * p * (1.0 - p)  # (T,)
    w = params["head.w"]
    grads = {"head.b": np.asarray(dz.sum()), "head.w": dz @ (gate * val)}
    dprod = dz[:, None] * w[None, :]
    dgate_pre = dprod * val * gate * (1.0 - gate)
    dval_pre = dprod * gate * (1.0 - val * val)
    grads["head.w_g"] = dgate_pre.T @ h
    grads["head.b_g"] = dgate_pre.sum(axis=0)
    grads["head.w_v"] = dval_pre.T @ h
    grads["head.b_v"] = dval_pre.sum(axis=0)
    return grads


def fit_head_standardization(params: dict[str, np.ndarray], h: np.ndarray, floor: float = 1e-6) -> None:
    """Set the head's input buffers to the mean and inverse std of ``h`` (rows are samples)."""
    params["head.mu"] = h.mean(axis=0)
    params["head.inv_std"] = 1.0 / np.maximum(h.std(axis=0), floor)


def decide(p_t: float, tau: float) -> bool:
    """True means speak: ``p_t >= tau``."""
    return bool(p_t >= tau)


# -- backbone --------------------------------------------------------------


def find_flag(tokens, flag_id: int) -> int:
    idx = np.flatnonzero(np.asarray(tokens) == flag_id)
    if idx.size == 0:
        raise MissingFlagError("no FLAG token in chunk")
    if idx.size > 1:
        raise MissingFlagError(f"expected one FLAG token, found {idx.size}")
    return int(idx[0])


def flag_hidden(hidden: np.ndarray, flag_pos: int | None, chunk_index: int = 0) -> FlagState:
    """Penultimate-layer residual stream at the FLAG position.

    ``hidden[l]`` is the output of block ``l - 1`` (``hidden[0]`` the
    embeddings), so the penultimate block output is ``hidden[-2]``.
    """
    n = hidden.shape[1]
    if flag_pos is None or not -n <= flag_pos < n:
        raise MissingFlagError(f"flag position {flag_pos} outside chunk of {n} tokens")
    return FlagState(hidden=hidden[-2, flag_pos].copy(), chunk_index=chunk_index)


class Model:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_weights(cfg, seed)
        self.freqs: RopeFreqs = default_freqs(cfg.d_head, cfg.rope_base)

    def new_cache(self, window: int | None = None) -> DualCache:
        c = self.cfg
        return DualCache(
            c.n_layers, c.n_heads, c.d_head, window or c.max_window, evict_fraction=c.evict_fraction
        )

    def _forward(self, tokens, positions, cache: DualCache | None, on_kv: Callable | None = None):
        cfg, P = self.cfg, self.params
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ShapeError("tokens must be a non-empty 1-D sequence")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise ShapeError("token id outside vocabulary")
        positions = np.asarray(positions, dtype=np.int64)
        n, H, dh = tokens.size, cfg.n_heads, cfg.d_head
        scale = 1.0 / math.sqrt(dh)
        causal = np.triu(np.ones((n, n), dtype=bool), k=1)

        x = P["tok_emb"][tokens]
        hidden = [x]
        new_k, new_v = [], []
        for l in range(cfg.n_layers):
            h = rms_norm(x, P[f"l{l}.ln1"], cfg.norm_eps)
            q = (h @ P[f"l{l}.wq"]).reshape(n, H, dh).transpose(1, 0, 2)
            k = (h @ P[f"l{l}.wk"]).reshape(n, H, dh).transpose(1, 0, 2)
            v = (h @ P[f"l{l}.wv"]).reshape(n, H, dh).transpose(1, 0, 2)
            if on_kv is not None:
                on_kv(l, k.copy(), v.copy(), positions.copy())
            q = rope_rotate(q, positions, self.freqs)
            k = rope_rotate(k, positions, self.freqs)

            s_new = (q @ k.transpose(0, 2, 1)) * scale
            s_new[:, causal] = -np.inf
            if cache is not None and len(cache):
                kc, vc = cache.layer_kv(l)
                s_old = (q @ kc.transpose(0, 2, 1)) * scale
                a = softmax(np.concatenate([s_old, s_new], axis=-1))
                m = s_old.shape[-1]
                att = a[..., :m] @ vc + a[..., m:] @ v
            else:
                att = softmax(s_new) @ v
            x = x + att.transpose(1, 0, 2).reshape(n, cfg.d_model) @ P[f"l{l}.wo"]
            h2 = rms_norm(x, P[f"l{l}.ln2"], cfg.norm_eps)
            x = x + silu(h2 @ P[f"l{l}.w1"]) @ P[f"l{l}.w2"]
            hidden.append(x)
            new_k.append(k)
            new_v.append(v)

        final = rms_norm(x, P["ln_f"], cfg.norm_eps)
        logits = final @ P["lm_head"]
        return np.stack(hidden), final, logits, np.stack(new_k), np.stack(new_v)

    def prefill(
        self,
        tokens,
        cache: DualCache,
        segment: str = STREAMING,
        on_kv: Callable | None = None,
    ) -> ForwardOutput:
        """Run ``tokens`` causally on top of ``cache`` and append their keys/values.

        Streaming prefills first make room in the window (which may evict and
        re-base older streaming entries). ``on_kv(layer, raw_k, v, positions)``
        is an optional observer that sees keys before rotation.
        """
        n = len(tokens)
        evictions = []
        if segment == STREAMING:
            evictions = cache.maybe_evict(n, self.freqs)
        elif segment != SYSTEM:
            raise ValueError(f"unknown segment {segment!r}")
        positions = cache.next_position() + np.arange(n, dtype=np.int64)
        hidden, final, logits, k, v = self._forward(tokens, positions, cache, on_kv)
        cache.append(k, v, positions, segment)
        return ForwardOutput(hidden, final, logits, positions, evictions)

    def decode_step(self, token: int, cache: DualCache) -> np.ndarray:
        return self.prefill([int(token)], cache).logits[-1]

    def forward_full(self, tokens, positions=None) -> ForwardOutput:
        """Cache-free forward pass; the reference for incremental equivalence."""
        if positions is None:
            positions = np.arange(len(tokens), dtype=np.int64)
        hidden, final, logits, _, _ = self._forward(tokens, positions, None)
        return ForwardOutput(hidden, final, logits, np.asarray(positions))

    def head_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in HEAD_PARAMS}

    # -- checkpoints -----------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        """Write an ``.npz`` of little-endian float64 arrays plus a JSON config entry."""
        arrays = {k: np.asarray(v, dtype="<f8") for k, v in self.params.items()}
        meta = {"config": asdict(self.cfg), **(extra or {})}
        arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> tuple["Model", dict]:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            params = {k: z[k].astype(np.float64) for k in z.files if k != "__meta__"}
        cfg = ModelConfig(**meta.pop("config"))
        return cls(cfg, params), meta
