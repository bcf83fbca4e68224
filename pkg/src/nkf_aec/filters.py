"""Model-based echo cancellers: a per-bin Kalman filter on the CTF
coefficients (TFDKF) and a time-domain proportionate NLMS filter."""

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidConfig, NumericalError, ShapeError
from .signal import ctf_frames


@dataclass(frozen=True)
class TfdkfConfig:
    """TFDKF hyper-parameters.

    ``estimate_q=False`` pins the state-noise covariance at zero and
    ``fixed_s_pow`` pins the observation-noise power; both exist for
    analysis against the textbook recursion.
    """

    taps: int = 4
    transition: float = 0.999
    q_forgetting: float = 0.99
    obs_smoothing: float = 0.8
    eps: float = 1e-10
    p_init_scale: float = 1.0
    estimate_q: bool = True
    fixed_s_pow: float | None = None

    def __post_init__(self):
        if self.taps < 1:
            raise InvalidConfig("taps must be >= 1")
        if not 0 < self.transition <= 1:
            raise InvalidConfig("transition must lie in (0, 1]")
        if not 0 < self.q_forgetting < 1:
            raise InvalidConfig("q_forgetting must lie in (0, 1)")
        if not 0 <= self.obs_smoothing < 1:
            raise InvalidConfig("obs_smoothing must lie in [0, 1)")
        if self.eps <= 0 or self.p_init_scale <= 0:
            raise InvalidConfig("eps and p_init_scale must be positive")


@dataclass
class TfdkfState:
    """Kalman state for a batch of bins; leading dimensions are arbitrary.

    ``h_hat`` (..., L), ``P`` (..., L, L), ``q_acc`` (..., L, L), ``s_pow`` (...).
    ``gain`` and ``drift`` hold the last Kalman gain and the Hermitian
    asymmetry of P measured before re-symmetrization.
    """

    h_hat: np.ndarray
    P: np.ndarray
    q_acc: np.ndarray
    s_pow: np.ndarray
    gain: np.ndarray
    drift: float = 0.0

    @classmethod
    def initial(cls, config, shape=()):
        L = config.taps
        eye = np.broadcast_to(np.eye(L, dtype=complex), shape + (L, L))
        s0 = 0.0 if config.fixed_s_pow is None else config.fixed_s_pow
        return cls(
            h_hat=np.zeros(shape + (L,), dtype=complex),
            P=config.p_init_scale * eye.copy(),
            q_acc=np.zeros(shape + (L, L), dtype=complex),
            s_pow=np.full(shape, s0, dtype=float),
            gain=np.zeros(shape + (L,), dtype=complex),
        )


def _hermitian(a):
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def tfdkf_step(state, x, Y, config):
    """One Kalman predict/update at one frame for every bin in ``state``.

    With the observation ``Y = h^H x + S`` the innovation enters the
    state update conjugated: ``h+ = h + k conj(e)``.

    Returns ``(S_hat, new_state)`` where ``S_hat = Y - (h+)^H x``.
    """
    x = np.asarray(x)
    Y = np.asarray(Y)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(Y))):
        raise NumericalError("non-finite input to tfdkf_step")
    A = config.transition
    if config.estimate_q:
        Q = (1.0 - A * A) * state.q_acc
    else:
        Q = 0.0
    h = A * state.h_hat
    P = A * A * state.P + Q

    e = Y - np.sum(np.conj(h) * x, axis=-1)
    if config.fixed_s_pow is None:
        beta = config.obs_smoothing
        s_pow = beta * state.s_pow + (1.0 - beta) * np.abs(e) ** 2
    else:
        s_pow = state.s_pow
    Px = np.einsum("...ij,...j->...i", P, x)
    xPx = np.real(np.sum(np.conj(x) * Px, axis=-1))
    k = Px / (xPx + s_pow + config.eps)[..., None]
    h = h + k * np.conj(e)[..., None]
    # (I - k x^H) P
    P = P - k[..., :, None] * np.einsum("...j,...jk->...k", np.conj(x), P)[..., None, :]
    drift = float(np.max(np.abs(P - np.conj(np.swapaxes(P, -1, -2))), initial=0.0))
    P = _hermitian(P)
    S_hat = Y - np.sum(np.conj(h) * x, axis=-1)

    lam = config.q_forgetting
    q_acc = lam * state.q_acc + (1.0 - lam) * h[..., :, None] * np.conj(h)[..., None, :]
    return S_hat, TfdkfState(h, P, q_acc, s_pow, k, drift)


def tfdkf_run(far_spec, mic_spec, config=TfdkfConfig(), bins=None):
    """Run the TF-domain Kalman filter over a whole spectrogram.

    Bins are independent; ``bins`` optionally restricts (and orders) the
    bins that are processed, all others pass through unchanged.
    """
    far_spec = np.asarray(far_spec)
    mic_spec = np.asarray(mic_spec)
    if far_spec.shape != mic_spec.shape:
        raise ShapeError(f"far {far_spec.shape} vs mic {mic_spec.shape}")
    idx = np.arange(far_spec.shape[1]) if bins is None else np.asarray(bins)
    xs = ctf_frames(far_spec[:, idx], config.taps).astype(complex)
    est = np.array(mic_spec, dtype=complex)
    state = TfdkfState.initial(config, (len(idx),))
    for m in range(far_spec.shape[0]):
        est[m, idx], state = tfdkf_step(state, xs[m], mic_spec[m, idx], config)
    return est


@dataclass(frozen=True)
class PnlmsConfig:
    filter_len: int = 1024
    mu: float = 0.5
    delta_p: float = 0.01
    rho: float = 0.01
    eps: float = 1e-6
    proportionate: bool = True

    def __post_init__(self):
        if self.filter_len < 1:
            raise InvalidConfig("filter_len must be >= 1")
        if not 0 <= self.mu < 2:
            raise InvalidConfig("mu must lie in [0, 2)")


def nlms_config(**kw):
    """A :class:`PnlmsConfig` with uniform step distribution (plain NLMS)."""
    return replace(PnlmsConfig(**kw), proportionate=False)


def pnlms_run(far, mic, config=PnlmsConfig(), return_weights=False):
    """Sample-by-sample proportionate NLMS. Returns the error signal ``mic - d_hat``."""
    far = np.asarray(far, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    if far.shape != mic.shape:
        raise ShapeError(f"far {far.shape} vs mic {mic.shape}")
    L = config.filter_len
    padded = np.concatenate((np.zeros(L - 1), far))
    # weights stored time-reversed so padded[n:n+L] lines up without a copy
    w = np.zeros(L)
    out = np.empty_like(mic)
    mu, eps = config.mu, config.eps
    for n in range(len(mic)):
        xv = padded[n:n + L]
        e = mic[n] - w @ xv
        out[n] = e
        if mu == 0.0:
            continue
        if config.proportionate:
            aw = np.abs(w)
            gam = np.maximum(config.rho * max(config.delta_p, aw.max()), aw)
            g = gam / gam.mean()
            gx = g * xv
            w += (mu * e / (xv @ gx + eps)) * gx
        else:
            w += (mu * e / (xv @ xv + eps)) * xv
    if return_weights:
        return out, w[::-1].copy()
    return out
