import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _util import numeric_grads, worst_error
from ats.core_math import Rng, ShapeError
from ats.encoder import EncoderConfig, encoder_backward, encoder_forward, export_attention_csv, get_attention_profile, init_encoder
from ats.adapter import StaleCacheError


def small(attention=True):
    return EncoderConfig(3, 5, 4, 4, use_temporal_attention=attention)


def random_params(cfg, rng):
    p = init_encoder(cfg, rng.child("init"))
    p["alpha"] = rng.normal(size=cfg.time_steps)
    p["b1"] = rng.normal(size=cfg.hidden_dim) * 0.1
    p["b2"] = rng.normal(size=cfg.out_dim) * 0.1
    p["ln_gain"] = rng.normal(size=cfg.out_dim)
    p["ln_bias"] = rng.normal(size=cfg.out_dim)
    return p


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(0, 5, 4, 4)
    with pytest.raises(ValueError):
        EncoderConfig(2, 1, 4, 4)


def test_fresh_profile_uniform():
    prof = get_attention_profile(init_encoder(EncoderConfig(4, 100, 8, 8), Rng(0)))
    np.testing.assert_allclose(prof, 0.01, atol=1e-12, rtol=0)


def test_two_step_closed_form():
    cfg = EncoderConfig(1, 2, 3, 3)
    p = init_encoder(cfg, Rng(0))
    p["alpha"] = np.array([0.0, math.log(3.0)])
    x = np.array([[[2.0, 4.0]]])
    _, cache = encoder_forward(p, cfg, x)
    np.testing.assert_allclose(cache.flat, [[0.5, 3.0]], atol=1e-15)


def test_uniform_attention_equals_scaled_baseline():
    on = small(True)
    off = small(False)
    p = init_encoder(on, Rng(1))
    q = dict(p)
    q["W1"] = p["W1"] / on.time_steps
    X = Rng(2).normal(size=(6, 3, 5))
    Z_on, _ = encoder_forward(p, on, X)
    Z_off, _ = encoder_forward(q, off, X)
    np.testing.assert_allclose(Z_on, Z_off, atol=1e-10)


def test_shape_error():
    with pytest.raises(ShapeError):
        encoder_forward(init_encoder(small(), Rng(0)), small(), np.ones((2, 3, 4)))


@given(st.integers(0, 1000))
def test_batch_equivariance(seed):
    cfg = small()
    rng = Rng(seed)
    p = random_params(cfg, rng)
    X = rng.normal(size=(7, 3, 5))
    perm = rng.permutation(7)
    np.testing.assert_array_equal(encoder_forward(p, cfg, X[perm])[0], encoder_forward(p, cfg, X)[0][perm])


@given(st.integers(0, 1000), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_attention_is_shared_across_samples(seed, c):
    cfg = small()
    rng = Rng(seed)
    p = random_params(cfg, rng)
    X = rng.normal(size=(2, 3, 5))
    Xs = X.copy()
    Xs[0] *= c
    _, a = encoder_forward(p, cfg, X)
    _, b = encoder_forward(p, cfg, Xs)
    np.testing.assert_allclose(b.flat[0], c * a.flat[0], rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(b.flat[1], a.flat[1])


@given(st.integers(0, 1000))
def test_profile_sums_to_one(seed):
    p = {"alpha": Rng(seed).normal(size=20) * 5}
    prof = get_attention_profile(p)
    assert abs(prof.sum() - 1) < 1e-12
    assert np.all(prof > 0)


def test_zero_upstream_gives_zero_grads():
    cfg = small()
    p = random_params(cfg, Rng(0))
    _, cache = encoder_forward(p, cfg, Rng(1).normal(size=(3, 3, 5)))
    grads, dX = encoder_backward(cache, np.zeros((3, 4)))
    assert all(not g.any() for g in grads.values())
    assert not dX.any()


def test_stale_cache():
    cfg = small()
    _, cache = encoder_forward(init_encoder(cfg, Rng(0)), cfg, np.ones((2, 3, 5)))
    encoder_backward(cache, np.ones((2, 4)))
    with pytest.raises(StaleCacheError):
        encoder_backward(cache, np.ones((2, 4)))


@pytest.mark.parametrize("attention", [True, False])
def test_gradients_match_fd(attention):
    cfg = small(attention)
    for point in range(10):
        rng = Rng(200 + point)
        p = random_params(cfg, rng)
        X, G = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 4))
        _, cache = encoder_forward(p, cfg, X)
        grads, dX = encoder_backward(cache, G)
        numeric = numeric_grads(lambda q: float(np.sum(encoder_forward(q, cfg, X)[0] * G)), p)
        key, err = worst_error(grads, numeric)
        assert err < 1e-5, (key, err)
        num_dX = numeric_grads(lambda q: float(np.sum(encoder_forward(p, cfg, q["X"])[0] * G)), {"X": X})["X"]
        assert worst_error({"X": dX}, {"X": num_dX})[1] < 1e-5
        if not attention:
            assert not grads["alpha"].any()


def test_export_attention_csv(tmp_path):
    cfg = EncoderConfig(2, 10, 3, 3)
    path = export_attention_csv(init_encoder(cfg, Rng(0)), tmp_path / "att.csv", digest="abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_digest: abc"
    assert lines[1] == "t,weight"
    rows = [ln.split(",") for ln in lines[2:]]
    assert [int(t) for t, _ in rows] == list(range(10))
    np.testing.assert_allclose([float(w) for _, w in rows], 0.1, atol=1e-12, rtol=0)
