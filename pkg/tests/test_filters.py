import numpy as np
import pytest

from nkf_aec.errors import InvalidConfig, NumericalError, ShapeError
from nkf_aec.filters import (
    PnlmsConfig, TfdkfConfig, TfdkfState, nlms_config, pnlms_run, tfdkf_run, tfdkf_step,
)
from nkf_aec.metrics import erle_curve, frames_to_threshold
from nkf_aec.signal import ctf_frames


def crandn(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def ctf_scene(rng, frames=10, bins=3, taps=2, near=0.1):
    """Far spectrum, a fixed CTF per bin and the resulting mic spectrum."""
    X = crandn(rng, frames, bins)
    h_true = crandn(rng, bins, taps)
    xs = ctf_frames(X, taps)
    D = np.sum(np.conj(h_true)[None] * xs, axis=-1)
    S = near * crandn(rng, frames, bins)
    return X, xs, h_true, D + S


def information_form_oracle(xs, Y, p0, obs_power):
    """Kalman filter for conj(Y) = x^H h + noise with a static state,
    written with explicit inverses: P+ = (P^-1 + x x^H / R)^-1,
    h+ = h + P+ x conj(e) / R. ``obs_power(e)`` returns R for the frame."""
    L = xs.shape[-1]
    h = np.zeros(L, complex)
    P = p0 * np.eye(L, dtype=complex)
    gains, hs = [], []
    for x, y in zip(xs, Y):
        e = y - np.conj(h) @ x
        R = obs_power(e)
        P = np.linalg.inv(np.linalg.inv(P) + np.outer(x, np.conj(x)) / R)
        k = P @ x / R
        h = h + k * np.conj(e)
        gains.append(k)
        hs.append(h.copy())
    return np.array(gains), np.array(hs)


ORACLE = dict(transition=1.0, estimate_q=False, taps=2, eps=1e-10)


def run_steps(xs, Y, config):
    state = TfdkfState.initial(config, (xs.shape[1],))
    gains, hs, drift = [], [], []
    for m in range(len(xs)):
        _, state = tfdkf_step(state, xs[m], Y[m], config)
        gains.append(state.gain)
        hs.append(state.h_hat)
        drift.append(state.drift)
    return np.array(gains), np.array(hs), np.array(drift), state


class TestOracle:
    def test_fixed_observation_power(self):
        rng = np.random.default_rng(0)
        _, xs, _, Y = ctf_scene(rng)
        cfg = TfdkfConfig(fixed_s_pow=0.02, **ORACLE)
        gains, hs, _, _ = run_steps(xs, Y, cfg)
        for b in range(xs.shape[1]):
            og, oh = information_form_oracle(xs[:, b], Y[:, b], 1.0, lambda e: 0.02 + 1e-10)
            assert np.max(np.abs(gains[:, b] - og)) < 1e-10
            assert np.max(np.abs(hs[:, b] - oh)) < 1e-10

    def test_smoothed_observation_power(self):
        rng = np.random.default_rng(1)
        _, xs, _, Y = ctf_scene(rng)
        cfg = TfdkfConfig(**ORACLE)
        gains, hs, _, _ = run_steps(xs, Y, cfg)
        for b in range(xs.shape[1]):
            r = [0.0]

            def obs_power(e):
                r[0] = 0.8 * r[0] + 0.2 * abs(e) ** 2
                return r[0] + 1e-10

            og, oh = information_form_oracle(xs[:, b], Y[:, b], 1.0, obs_power)
            assert np.max(np.abs(gains[:, b] - og)) < 1e-10
            assert np.max(np.abs(hs[:, b] - oh)) < 1e-10


def test_noise_free_convergence():
    rng = np.random.default_rng(2)
    X = crandn(rng, 200, 5)
    h_true = crandn(rng, 5, 4)
    xs = ctf_frames(X, 4)
    Y = np.sum(np.conj(h_true)[None] * xs, axis=-1)
    cfg = TfdkfConfig(transition=1.0, estimate_q=False, fixed_s_pow=0.0, eps=1e-10)
    _, _, _, state = run_steps(xs, Y, cfg)
    err = np.linalg.norm(state.h_hat - h_true, axis=-1) / np.linalg.norm(h_true, axis=-1)
    assert np.all(err < 1e-3)


def test_zero_covariance_gives_zero_gain():
    rng = np.random.default_rng(3)
    cfg = TfdkfConfig()
    state = TfdkfState.initial(cfg, (2,))
    state.P[:] = 0
    h0 = crandn(rng, 2, 4)
    state.h_hat = h0.copy()
    x = crandn(rng, 2, 4)
    _, new = tfdkf_step(state, x, crandn(rng, 2), cfg)
    assert not np.any(new.gain)
    np.testing.assert_allclose(new.h_hat, cfg.transition * h0)


def test_zero_far_end_is_passthrough():
    rng = np.random.default_rng(4)
    mic = crandn(rng, 30, 9)
    est = tfdkf_run(np.zeros((30, 9)), mic)
    np.testing.assert_array_equal(est, mic)


def test_bin_permutation_invariance():
    rng = np.random.default_rng(5)
    X, _, _, Y = ctf_scene(rng, frames=40, bins=7, taps=4)
    perm = rng.permutation(7)
    a = tfdkf_run(X, Y)
    b = tfdkf_run(X[:, perm], Y[:, perm])
    np.testing.assert_allclose(b, a[:, perm], rtol=0, atol=1e-13)
    c = tfdkf_run(X, Y, bins=perm)
    np.testing.assert_allclose(c, a, rtol=0, atol=1e-13)


def test_covariance_stays_hermitian_and_gain_bounded():
    rng = np.random.default_rng(6)
    _, xs, _, Y = ctf_scene(rng, frames=300, bins=6, taps=4, near=0.5)
    cfg = TfdkfConfig()
    state = TfdkfState.initial(cfg, (6,))
    for m in range(300):
        P_prior = cfg.transition ** 2 * state.P + (1 - cfg.transition ** 2) * state.q_acc
        x = xs[m]
        _, state = tfdkf_step(state, x, Y[m], cfg)
        assert state.drift < 1e-6
        P = state.P
        assert np.max(np.abs(P - np.conj(np.swapaxes(P, -1, -2)))) < 1e-10
        assert np.all(np.real(np.diagonal(P, axis1=-2, axis2=-1)) >= -1e-12)
        assert np.all(state.s_pow >= 0)
        xPx = np.real(np.einsum("bi,bij,bj->b", np.conj(x), P_prior, x))
        proj = np.abs(np.sum(np.conj(x) * state.gain, axis=-1))
        bound = xPx / (xPx + state.s_pow + cfg.eps)
        assert np.all(proj <= bound + 1e-12)
        assert np.all(bound <= 1)


def test_scale_equivariance():
    # scaling the mic by c (echo and near end alike) with P0 and eps scaled
    # by c^2 leaves every gain unchanged; the estimate and the error scale by c
    rng = np.random.default_rng(7)
    X, _, _, Y = ctf_scene(rng, frames=60, bins=4, taps=4, near=0.3)
    xs = ctf_frames(X, 4)
    c = 2.0
    base = TfdkfConfig()
    scaled = TfdkfConfig(p_init_scale=c * c, eps=base.eps * c * c)
    g1, h1, _, _ = run_steps(xs, Y, base)
    g2, h2, _, _ = run_steps(xs, c * Y, scaled)
    assert np.max(np.abs(g1 - g2)) < 1e-8
    np.testing.assert_allclose(h2, c * h1, rtol=1e-8, atol=1e-12)


def test_non_finite_input():
    cfg = TfdkfConfig()
    with pytest.raises(NumericalError):
        tfdkf_step(TfdkfState.initial(cfg, (1,)), np.full((1, 4), np.nan), np.zeros(1), cfg)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        tfdkf_run(np.zeros((5, 3)), np.zeros((5, 4)))


@pytest.mark.parametrize("kwargs", [dict(taps=0), dict(transition=0.0), dict(transition=1.1),
                                    dict(q_forgetting=1.0), dict(obs_smoothing=1.0), dict(eps=0.0)])
def test_invalid_tfdkf_config(kwargs):
    with pytest.raises(InvalidConfig):
        TfdkfConfig(**kwargs)


class TestPnlms:
    def test_zero_far_end(self):
        mic = np.random.default_rng(8).standard_normal(500)
        np.testing.assert_array_equal(pnlms_run(np.zeros(500), mic, PnlmsConfig(filter_len=32)), mic)

    def test_zero_step(self):
        rng = np.random.default_rng(9)
        far, mic = rng.standard_normal((2, 500))
        np.testing.assert_array_equal(pnlms_run(far, mic, PnlmsConfig(filter_len=32, mu=0.0)), mic)

    def test_identifies_short_path(self):
        rng = np.random.default_rng(10)
        far = rng.standard_normal(4000)
        h = rng.standard_normal(16)
        mic = np.convolve(far, h)[:4000]
        out, w = pnlms_run(far, mic, PnlmsConfig(filter_len=16), return_weights=True)
        np.testing.assert_allclose(w, h, atol=1e-6)
        assert np.sum(out[-500:] ** 2) < 1e-10 * np.sum(mic[-500:] ** 2)

    def test_proportionate_beats_nlms_on_sparse_path(self):
        rng = np.random.default_rng(11)
        far = rng.standard_normal(6000)
        h = np.zeros(256)
        h[rng.choice(256, 8, replace=False)] = rng.standard_normal(8)
        mic = np.convolve(far, h)[:6000]
        times = {}
        for name, cfg in (("pnlms", PnlmsConfig(filter_len=256, mu=0.5)),
                          ("nlms", nlms_config(filter_len=256, mu=0.5))):
            out = pnlms_run(far, mic, cfg)
            _, curve = erle_curve(mic, mic - out, 256, 64)
            times[name] = frames_to_threshold(curve, 0, 10.0)
        assert times["pnlms"] < times["nlms"]

    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            PnlmsConfig(mu=2.0)
        with pytest.raises(ShapeError):
            pnlms_run(np.zeros(3), np.zeros(4))
