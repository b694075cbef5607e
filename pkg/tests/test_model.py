from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from segpipe import model
from segpipe.errors import CheckpointError, DomainError, NumericsError, ShapeError
from segpipe.model import ModelSpec

from conftest import network_gradient_check


def _count_oracle(dim, depth, base, cin, ncls):
    # enumerate layers directly: two 3^d convs per encoder level and bottleneck,
    # an up conv plus two convs per decoder level, a 1x1 head
    taps = 3 ** dim
    conv = lambda a, b: taps * a * b + b  # noqa: E731
    ch = [base * 2 ** l for l in range(depth + 1)]
    total, prev = 0, cin
    for l in range(depth):
        total += conv(prev, ch[l]) + conv(ch[l], ch[l])
        prev = ch[l]
    total += conv(prev, ch[depth]) + conv(ch[depth], ch[depth])
    for l in range(depth):
        total += conv(ch[l + 1], ch[l]) + conv(2 * ch[l], ch[l]) + conv(ch[l], ch[l])
    return total + base * ncls + ncls


def test_param_count_default_spec():
    spec = ModelSpec(3, 2, 8, 1, 2)
    # 224+1736 | 3472+6928 | 13856+27680 | 13840+13840+6928 | 3464+3464+1736 | 18
    assert spec.param_count() == 97186 == _count_oracle(3, 2, 8, 1, 2)
    assert model.init_params(spec, 0).count() == 97186


@given(st.sampled_from([2, 3]), st.integers(1, 4), st.integers(1, 8), st.integers(1, 3), st.integers(2, 5))
def test_param_count_oracle(dim, depth, base, cin, ncls):
    assert ModelSpec(dim, depth, base, cin, ncls).param_count() == _count_oracle(dim, depth, base, cin, ncls)


def test_init_deterministic_and_seeded():
    spec = ModelSpec(3, 1, 4)
    a, b, c = model.init_params(spec, 3), model.init_params(spec, 3), model.init_params(spec, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a.keys())
    assert any(not np.array_equal(a[k], c[k]) for k in a.keys() if k.endswith(".w"))
    w = a["enc0.conv1.w"]
    assert np.abs(w).max() <= math.sqrt(2) * math.sqrt(3 / 27) + 1e-7
    assert all(np.all(a[k] == 0) for k in a.keys() if k.endswith(".b"))


@pytest.mark.parametrize("spec", [ModelSpec(3, 2, 8), ModelSpec(2, 3, 4, 2, 3)])
def test_shape_contract(spec):
    p = model.init_params(spec, 0)
    S = (16,) * spec.dim
    assert model.forward(p, spec, np.zeros((spec.in_channels,) + S, np.float32)).shape == (spec.num_classes,) + S
    assert model.forward(p, spec, np.zeros((2, spec.in_channels) + S, np.float32)).shape == (2, spec.num_classes) + S
    with pytest.raises(ShapeError):
        model.forward(p, spec, np.zeros((spec.in_channels,) + (6,) * spec.dim))
    with pytest.raises(ShapeError):
        model.forward(p, spec, np.zeros((spec.in_channels + 1,) + S))


@pytest.mark.parametrize("kw", [{"dim": 4}, {"depth": 0}, {"num_classes": 1}])
def test_bad_spec(kw):
    with pytest.raises(DomainError):
        ModelSpec(**kw)


def test_zero_params_zero_logits(rng):
    spec = ModelSpec(3, 2, 4)
    out = model.forward(model.zero_params(spec), spec, rng.standard_normal((1, 8, 8, 8)))
    assert np.all(out == 0)


def test_head_linearity(rng):
    spec = ModelSpec(3, 1, 4)
    p = model.init_params(spec, 0, np.float64)
    x = rng.standard_normal((1, 8, 8, 8))
    base = model.forward(p, spec, x)
    q = p.copy()
    q.arrays["head.w"] *= 2
    assert np.allclose(model.forward(q, spec, x), 2 * base, rtol=1e-12, atol=1e-12)


def test_conv_matches_scipy_correlate(rng):
    # same-padded 3^d cross-correlation, checked against scipy for both gemm paths
    for cin, cout in [(1, 2), (5, 3)]:
        x = rng.standard_normal((1, 6, 5, 4, cin))
        w = rng.standard_normal((cout, cin, 3, 3, 3))
        b = rng.standard_normal(cout)
        y, _ = model._conv_forward(x, w, b)
        for o in range(cout):
            ref = sum(ndimage.correlate(x[0, ..., i], w[o, i], mode="constant") for i in range(cin)) + b[o]
            assert np.allclose(y[0, ..., o], ref, atol=1e-10)


def test_softmax_rows(rng):
    z = rng.standard_normal((4, 5, 6)) * 50
    assert np.allclose(model.softmax(z, 0).sum(0), 1, atol=1e-6)


def test_uniform_logits_ce_is_ln2():
    target = np.zeros((4, 4, 4), int)
    target[:2] = 1
    loss, _ = model.dice_ce_loss(np.zeros((2, 4, 4, 4)), target, smooth=0.0)
    # CE = ln 2 exactly; foreground soft dice = 2*16*0.5 / (32 + 32) = 0.5
    assert loss == pytest.approx(math.log(2) + 0.5, abs=1e-12)


def test_large_margin_loss_vanishes():
    target = np.zeros((4, 4, 4), int)
    target[1:3] = 1
    logits = np.stack([(target == 0) * 40.0, (target == 1) * 40.0])
    loss, _ = model.dice_ce_loss(logits, target)
    assert loss < 1e-12 + 1e-6


def test_loss_label_out_of_range():
    with pytest.raises(DomainError):
        model.dice_ce_loss(np.zeros((2, 3, 3)), np.full((3, 3), 2))


def test_loss_gradient_finite_difference(rng):
    z = rng.standard_normal((3, 4, 4, 4))
    t = rng.integers(0, 3, (4, 4, 4))
    _, dz = model.dice_ce_loss(z, t)
    num = np.zeros_like(z)
    h = 1e-4
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        num[idx] = (model.dice_ce_loss(zp, t)[0] - model.dice_ce_loss(zm, t)[0]) / (2 * h)
    assert np.abs(num - dz).max() / np.abs(num).max() < 1e-4


def test_network_gradient_float64(rng):
    x = rng.standard_normal((1, 8, 8, 8))
    t = rng.integers(0, 2, (8, 8, 8))
    spec = ModelSpec(3, 1, 2)
    keys = ["enc0.conv1.w", "mid.conv2.b", "dec0.conv2.b", "head.w"]
    assert network_gradient_check(spec, x, t, keys=keys) < 1e-5


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([2, 3]), st.integers(1, 2), st.integers(2, 3))
def test_network_gradient_random_specs(seed, dim, depth, ncls):
    r = np.random.default_rng(seed)
    spec = ModelSpec(dim, depth, 2, 1, ncls)
    S = (4 * 2 ** (depth - 1),) * dim
    x = r.standard_normal((1,) + S)
    t = r.integers(0, ncls, S)
    assert network_gradient_check(spec, x, t, seed=seed, keys=["enc0.conv1.w", "head.b", "mid.conv1.b"]) < 1e-5


def test_float32_gradients_close_to_float64(rng):
    spec = ModelSpec(3, 1, 2)
    x = rng.standard_normal((1, 8, 8, 8))
    t = rng.integers(0, 2, (8, 8, 8))
    p64 = model.init_params(spec, 0, np.float64)
    grads = {}
    for dt in (np.float64, np.float32):
        p = p64.astype(dt)
        z, cache = model.forward_with_cache(p, spec, x.astype(dt))
        _, dz = model.dice_ce_loss(z, t)
        grads[dt] = model.backward(p, spec, None, dz, cache)
    a = np.concatenate([grads[np.float32][k].ravel() for k in p64.keys()]).astype(np.float64)
    b = np.concatenate([grads[np.float64][k].ravel() for k in p64.keys()])
    assert np.abs(a - b).max() / np.abs(b).max() < 1e-3


def test_backward_completeness_and_zero_grad(rng):
    spec = ModelSpec(2, 2, 2, 1, 3)
    p = model.init_params(spec, 0)
    x = rng.standard_normal((1, 8, 8)).astype(np.float32)
    g = model.backward(p, spec, x, np.zeros((3, 8, 8), np.float32))
    assert set(g) == set(p.keys())
    assert all(g[k].shape == p[k].shape and not g[k].any() for k in g)


def test_optimizer_examples(rng):
    spec = ModelSpec(2, 1, 2)
    p = model.init_params(spec, 0, np.float64)
    g = {k: rng.standard_normal(v.shape) for k, v in p.arrays.items()}
    same, _ = model.optimizer_step(p, g, None, lr=0.0)
    assert all(np.array_equal(same[k], p[k]) for k in p.keys())
    p1, s1 = model.optimizer_step(p, g, None, lr=0.1)
    assert all(np.allclose(p1[k], p[k] - 0.1 * g[k], rtol=0, atol=1e-15) for k in p.keys())
    p2, _ = model.optimizer_step(p1, g, s1, lr=0.1, momentum=0.9)
    assert all(np.allclose(p2[k], p[k] - 0.1 * g[k] - 0.1 * (0.9 * g[k] + g[k]), atol=1e-14) for k in p.keys())
    bad = dict(g)
    bad["head.b"] = np.array([np.nan, 0.0])
    with pytest.raises(NumericsError):
        model.optimizer_step(p, bad, None, lr=0.1)


def test_training_determinism_and_overfit(rng):
    spec = ModelSpec(3, 2, 4)
    x = rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32)
    t = np.zeros((1, 8, 8, 8), int)
    t[0, 2:6, 2:6, 2:6] = 1
    x[0, 0][t[0] == 1] += 2.0

    def run(n):
        p, s, losses = model.init_params(spec, 0), None, []
        for _ in range(n):
            z, cache = model.forward_with_cache(p, spec, x)
            loss, dz = model.dice_ce_loss(z, t)
            p, s = model.optimizer_step(p, model.backward(p, spec, x, dz, cache), s, lr=0.01)
            losses.append(loss)
        return p, losses

    pa, la = run(100)
    pb, lb = run(100)
    assert la == lb and all(np.array_equal(pa[k], pb[k]) for k in pa.keys())
    smooth = np.convolve(la, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(smooth) < 0)
    assert la[-1] < 0.2 * la[0]


def test_checkpoint_round_trip_and_stability(tmp_path, rng):
    spec = ModelSpec(2, 1, 2)
    p = model.init_params(spec, 9)
    state = {k: rng.standard_normal(v.shape).astype(np.float32) for k, v in p.arrays.items()}
    h1 = model.save_checkpoint(tmp_path / "a.ckpt", spec, p, state, 12, {"x": 1})
    h2 = model.save_checkpoint(tmp_path / "b.ckpt", spec, p, state, 12, {"x": 1})
    assert h1 == h2 and (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ck = model.load_checkpoint(tmp_path / "a.ckpt")
    assert ck.spec == spec and ck.step == 12 and ck.extra == {"x": 1} and ck.sha256 == h1
    assert all(np.array_equal(ck.params[k], p[k]) and np.array_equal(ck.opt_state[k], state[k]) for k in p.keys())
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        model.load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "trunc.ckpt").write_bytes((tmp_path / "a.ckpt").read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        model.load_checkpoint(tmp_path / "trunc.ckpt")
    with pytest.raises(CheckpointError):
        model.load_checkpoint(tmp_path / "missing.ckpt")


def test_predictor_deterministic(rng):
    spec = ModelSpec(2, 1, 2)
    pred = model.UNetPredictor(model.init_params(spec, 0), spec)
    x = rng.standard_normal((1, 8, 8)).astype(np.float32)
    assert pred.dim == 2 and pred.divisor == 2
    assert np.array_equal(pred(x), pred.predict_logits(x))
