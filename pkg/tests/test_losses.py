import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proact import losses as L
from proact.errors import InvalidConfigError, InvalidTargetError, ShapeError
from proact.model import HEAD_PARAMS, ModelConfig, init_weights, response_backward, response_forward
from proact.train import Clip, TrainConfig, batch_loss, train_head, write_curve
from oracles import central_fd, rel_err


@pytest.mark.parametrize(
    "y,gamma,w",
    [([0, 0, 0], 5, [1, 1, 1]), ([0, 1, 1, 0], 5, [1, 5, 1, 5]), ([1], 7, [1]), ([1, 0], 2.5, [1, 2.5])],
)
def test_transition_weights(y, gamma, w):
    assert L.transition_weights(y, gamma).tolist() == w


@pytest.mark.parametrize("kw", [{"gamma": 0.5}, {"alpha": -0.1}, {"epsilon": 0.0}, {"epsilon": 0.5}])
def test_config_invariants(kw):
    with pytest.raises(InvalidConfigError):
        L.LossConfig(**kw)


def test_cls_half_is_ln2_examples():
    assert abs(L.loss_cls([0.5, 0.5], [0, 1]) - math.log(2)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=50), st.floats(1.0, 50.0))
def test_cls_half_is_ln2_any_labels(y, gamma):
    p = np.full(len(y), 0.5)
    assert abs(L.loss_cls(p, y, L.LossConfig(gamma=gamma)) - math.log(2)) < 1e-12


def test_cls_perfect_prediction_limit():
    eps = 1e-7
    y = np.array([0, 1, 1, 0])
    assert L.loss_cls(y.astype(float), y, L.LossConfig(epsilon=eps)) <= -math.log(1 - eps) + 1e-15


def test_cls_shape_mismatch():
    with pytest.raises(ShapeError):
        L.loss_cls([0.5], [0, 1])
    with pytest.raises(ShapeError):
        L.loss_reg([0.5, 0.1], [0])


def test_reg_examples():
    assert L.loss_reg([0.2, 0.8], [0, 0]) == pytest.approx(0.61, abs=1e-15)
    assert L.loss_reg([0.2, 0.8], [0, 1]) == 0.0


def test_reg_fixed_point_exact():
    for y in ([1, 1, 1], [0, 0], [1]):
        assert L.loss_reg(np.full(len(y), float(np.mean(y))), y) == 0.0


def test_reg_zero_set_by_construction():
    y = np.array([0, 0, 1, 1, 1, 0])
    # constant on each persistence run, mean matching
    p = np.array([0.2, 0.2, 0.6, 0.6, 0.6, 0.0])
    p[5] = y.mean() * 6 - p[:5].sum()
    assert L.loss_reg(p, y) == pytest.approx(0.0, abs=1e-30)
    p2 = p.copy()
    p2[1] += 0.1
    assert L.loss_reg(p2, y) > 0


def test_main_uniform_logits():
    V = 17
    assert L.loss_main(np.zeros((3, V)), [1, 2, 3], [False, True, False]) == pytest.approx(math.log(V), abs=1e-12)


def test_main_empty_mask_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert L.loss_main(np.zeros((2, 5)), [0, 1], [False, False]) == 0.0
    assert "empty mask" in caplog.text
    assert not L.grad_main(np.zeros((2, 5)), [0, 1], [False, False]).any()


def test_main_invalid_target():
    with pytest.raises(InvalidTargetError):
        L.loss_main(np.zeros((1, 4)), [4], [True])


def test_main_mask_isolation():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(6, 9))
    targets = rng.integers(0, 9, size=6)
    mask = np.array([1, 0, 1, 0, 0, 1], dtype=bool)
    base = L.loss_main(logits, targets, mask)
    logits[~mask] = rng.normal(scale=20, size=(3, 9))
    assert L.loss_main(logits, targets, mask) == base


def test_total():
    assert L.loss_total(1.0, 0.5, 0.1) == pytest.approx(1.12, abs=1e-15)
    assert L.loss_total(1.0, 0.5, 0.1, L.LossConfig(alpha=0.0)) == 1.0
    assert L.LossConfig().alpha == 0.2 and L.LossConfig().gamma == 5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
def test_losses_nonnegative(pairs):
    p = np.array([a for a, _ in pairs])
    y = np.array([b for _, b in pairs])
    assert L.loss_cls(p, y) >= 0
    assert L.loss_reg(p, y) >= 0


def random_instance(rng, T=None):
    T = T or int(rng.integers(2, 30))
    y = rng.integers(0, 2, size=T)
    p = rng.uniform(0.05, 0.95, size=T)
    return p, y


def test_cls_gradient_fd_100():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p, y = random_instance(rng)
        cfg = L.LossConfig(gamma=float(rng.uniform(1, 8)))
        num = central_fd(lambda: L.loss_cls(p, y, cfg), p)
        assert rel_err(L.grad_cls(p, y, cfg), num) < 1e-4


def test_reg_gradient_fd_100():
    rng = np.random.default_rng(2)
    for _ in range(100):
        p, y = random_instance(rng)
        num = central_fd(lambda: L.loss_reg(p, y), p)
        assert rel_err(L.grad_reg(p, y), num) < 1e-4


def test_main_gradient_fd():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = rng.normal(size=(5, 7))
        targets = rng.integers(0, 7, size=5)
        mask = rng.random(5) < 0.6
        mask[0] = True
        num = central_fd(lambda: L.loss_main(logits, targets, mask), logits)
        assert rel_err(L.grad_main(logits, targets, mask), num) < 1e-4


def test_rate_gradient_formula():
    rng = np.random.default_rng(4)
    p, y = random_instance(rng, T=16)
    g = L.grad_reg(p, y, smooth=False, rate=True)
    np.testing.assert_allclose(g, 2 * (p.mean() - y.mean()) / 16, rtol=0, atol=1e-15)


def test_cls_gradient_zero_at_clamp_boundary():
    y = np.array([0, 1, 1])
    assert np.all(L.grad_cls(y.astype(float), y) == 0)


def small_head(seed):
    cfg = ModelConfig(vocab_size=10, d_model=12, n_heads=2, head_hidden=5, d_ff=16)
    return init_weights(cfg, seed)


def test_grad_response_fd_16_step():
    rng = np.random.default_rng(5)
    params = small_head(5)
    h = rng.normal(size=(16, 12))
    y = rng.integers(0, 2, size=16)
    cfg = L.LossConfig()

    def total():
        p = response_forward(h, params)[0]
        return cfg.alpha * (L.loss_cls(p, y, cfg) + L.loss_reg(p, y))

    p, tape = response_forward(h, params)
    grads = L.grad_response(p, y, cfg, lambda d: response_backward(tape, d, params))
    for name in HEAD_PARAMS:
        assert rel_err(grads[name], central_fd(total, params[name])) < 1e-4, name


def test_batch_loss_gradient_fd():
    rng = np.random.default_rng(6)
    params = small_head(6)
    clips = []
    for T in (5, 9):
        n = 4
        clips.append(Clip(rng.normal(size=(T, 12)), rng.integers(0, 2, size=T),
                          rng.normal(size=(n, 12)), rng.integers(0, 10, size=n), rng.random(n) < 0.7))
    tcfg = TrainConfig()
    cfg = L.LossConfig()
    _, grads = batch_loss(params, clips, cfg, tcfg)
    for name in (*HEAD_PARAMS, "lm_head"):
        num = central_fd(lambda: batch_loss(params, clips, cfg, tcfg, with_grad=False)[0]["total"], params[name])
        assert rel_err(grads[name], num) < 1e-4, name


def synthetic_clips(rng, n_clips=40, T=36, rate=0.4, d=12):
    clips = []
    for _ in range(n_clips):
        y = (rng.random(T) < rate).astype(np.int64)
        clips.append(Clip(rng.normal(size=(T, d)), y, np.zeros((0, d)), np.zeros(0, np.int64), np.zeros(0, bool)))
    return clips


def test_rate_only_training_matches_rate():
    rng = np.random.default_rng(7)
    clips = synthetic_clips(rng)
    tcfg = TrainConfig(steps=300, lr=1e-2, batch_clips=8, use_cls=False, use_smooth=False, train_lm_head=False)
    res = train_head(small_head(7), clips, L.LossConfig(), tcfg)
    p = response_forward(np.concatenate([c.h for c in clips]), res.params)[0]
    label_rate = np.mean(np.concatenate([c.y for c in clips]))
    assert abs(label_rate - 0.4) < 0.05
    assert abs(p.mean() - label_rate) < 0.05


def test_alpha_zero_leaves_head_unchanged():
    rng = np.random.default_rng(8)
    start = small_head(8)
    res = train_head(start, synthetic_clips(rng, 8), L.LossConfig(alpha=0.0),
                     TrainConfig(steps=20, batch_clips=4, train_lm_head=False))
    for k in start:
        assert np.array_equal(res.params[k], start[k]), k


def test_training_loss_trends_down(tmp_path):
    rng = np.random.default_rng(9)
    clips = synthetic_clips(rng, 30)
    for c in clips:
        c.h[:, 0] += 3 * c.y  # separable signal
    res = train_head(small_head(9), clips, L.LossConfig(),
                     TrainConfig(steps=200, batch_clips=8, train_lm_head=False))
    totals = [r["total"] for r in res.curve]
    assert np.mean(totals[-20:]) < 0.5 * np.mean(totals[:20])
    path = tmp_path / "curve.csv"
    write_curve(path, res.curve)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,main,cls,reg,total"
    assert len(lines) == 201


def test_nan_loss_aborts():
    from proact.errors import NumericError

    rng = np.random.default_rng(10)
    clips = synthetic_clips(rng, 4)
    clips[0].h[0, 0] = np.nan
    with pytest.raises(NumericError):
        train_head(small_head(10), clips, L.LossConfig(), TrainConfig(steps=3, batch_clips=4, standardize=False))
