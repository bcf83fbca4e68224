"""Neural Kalman filter runtime.

A small complex-valued network (FC -> PReLU -> GRU -> GRU -> FC -> PReLU -> FC)
maps the feature vector ``[x; delta_h; e]`` of one frequency bin to a Kalman
gain. The same weights serve every bin, so bins are simply rows of a batch.

Complex conventions used throughout:

* affine maps are fully complex, ``W @ x + b``;
* sigmoid, tanh and PReLU act on the real and imaginary parts separately;
* GRU gating products are complex multiplications.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError
from .signal import ctf_frames


class InitMode(str, enum.Enum):
    ZEROS = "zeros"
    NOISE = "noise"


@dataclass(frozen=True)
class NkfConfig:
    taps: int = 4
    init_mode: InitMode = InitMode.ZEROS
    noise_scale: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "init_mode", InitMode(self.init_mode))
        if self.taps < 1:
            raise ValueError("taps must be >= 1")

    @property
    def feature_dim(self):
        return 2 * self.taps + 1

    @property
    def fc_units(self):
        d = self.feature_dim
        return (2 * d, 2 * d, self.taps)

    @property
    def gru_units(self):
        return self.taps ** 2 + 2


def param_shapes(config):
    """Name -> (shape, is_complex) for every trainable tensor."""
    d = config.feature_dim
    f1, f2, f3 = config.fc_units
    h = config.gru_units
    return {
        "fc1.W": ((f1, d), True),
        "fc1.b": ((f1,), True),
        "fc1.slope": ((f1,), False),
        "gru1.W_i": ((3 * h, f1), True),
        "gru1.W_h": ((3 * h, h), True),
        "gru1.b_i": ((3 * h,), True),
        "gru1.b_h": ((3 * h,), True),
        "gru2.W_i": ((3 * h, h), True),
        "gru2.W_h": ((3 * h, h), True),
        "gru2.b_i": ((3 * h,), True),
        "gru2.b_h": ((3 * h,), True),
        "fc2.W": ((f2, h), True),
        "fc2.b": ((f2,), True),
        "fc2.slope": ((f2,), False),
        "fc3.W": ((f3, f2), True),
        "fc3.b": ((f3,), True),
    }


class ModelWeights(dict):
    """Named parameter tensors. Complex tensors are ``complex128`` (or
    ``complex64`` after :meth:`astype`); PReLU slopes are real."""

    def __init__(self, config, tensors):
        super().__init__(tensors)
        self.config = config
        shapes = param_shapes(config)
        if set(tensors) != set(shapes):
            missing = set(shapes) - set(tensors)
            extra = set(tensors) - set(shapes)
            raise ShapeError(f"weight names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, (shape, _) in shapes.items():
            if self[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self[name].shape}")
            if not np.all(np.isfinite(self[name])):
                raise NumericalError(f"{name} has non-finite entries", name)

    @classmethod
    def zeros(cls, config):
        return cls(config, {
            name: np.zeros(shape, dtype=complex if cplx else float)
            for name, (shape, cplx) in param_shapes(config).items()
        })

    @classmethod
    def glorot(cls, config, seed=0, slope=0.25, output_scale=1e-3):
        """Complex Glorot init: each part ~ U(+-sqrt(3 / fan_avg) / sqrt(2)) so
        the complex variance is ``1 / fan_avg``. Biases start at zero.

        The output layer is further scaled by ``output_scale``: a full-size
        random gain makes the untrained recursion diverge within a few frames,
        while a near-zero gain starts training from a stable passthrough.
        """
        rng = np.random.default_rng(seed)
        out = {}
        for name, (shape, cplx) in param_shapes(config).items():
            if name.endswith("slope"):
                out[name] = np.full(shape, slope)
            elif len(shape) == 1:
                out[name] = np.zeros(shape, dtype=complex)
            else:
                limit = np.sqrt(3.0 / ((shape[0] + shape[1]) / 2.0)) / np.sqrt(2.0)
                out[name] = (rng.uniform(-limit, limit, shape)
                             + 1j * rng.uniform(-limit, limit, shape))
                if name == "fc3.W":
                    out[name] *= output_scale
        return cls(config, out)

    def real_param_count(self):
        return sum(v.size * (2 if np.iscomplexobj(v) else 1) for v in self.values())

    def astype(self, dtype):
        """Copy with complex tensors cast to ``dtype`` and slopes to its real part."""
        real = np.empty(0, dtype=dtype).real.dtype
        return ModelWeights(self.config, {
            k: v.astype(dtype if np.iscomplexobj(v) else real) for k, v in self.items()
        })

    def copy(self):
        return ModelWeights(self.config, {k: v.copy() for k, v in self.items()})


def _split(fn, a):
    return fn(a.real) + 1j * fn(a.imag)


def complex_linear(x, W, b):
    """``W x + b`` on the last axis of ``x``."""
    x = np.asarray(x)
    if x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"input {x.shape} / W {W.shape} / b {b.shape} mismatch")
    return x @ W.T + b


def complex_prelu(x, slope):
    """PReLU on real and imaginary parts with a shared per-channel slope."""
    x = np.asarray(x)
    re, im = x.real, x.imag
    return (np.where(re > 0, re, slope * re) + 1j * np.where(im > 0, im, slope * im))


def real_gru_cell(x, h_prev, W_i, W_h, b_i, b_h, cache=None):
    """One real GRU step; gate blocks are stacked ``[reset, update, new]``.

    r = sig(Wi_r x + bi_r + Wh_r h + bh_r)
    u = sig(Wi_u x + bi_u + Wh_u h + bh_u)
    n = tanh(Wi_n x + bi_n + r * (Wh_n h + bh_n))
    h' = u * h + (1 - u) * n

    ``x`` is ``(..., rows, D)``; stacked parameters (``W_i`` of shape
    ``(..., 3H, D)``, biases ``(..., 1, 3H)``) broadcast over the leading axes.
    """
    H = W_h.shape[-1]
    gi = x @ np.swapaxes(W_i, -1, -2) + b_i
    gh = h_prev @ np.swapaxes(W_h, -1, -2) + b_h
    # logistic via tanh: same values, half the cost of scipy's expit here
    gates = 0.5 + 0.5 * np.tanh(0.5 * (gi[..., :2 * H] + gh[..., :2 * H]))
    r, u = gates[..., :H], gates[..., H:]
    ghn = gh[..., 2 * H:]
    n = np.tanh(gi[..., 2 * H:] + r * ghn)
    if cache is not None:
        cache.update(r=r, u=u, n=n, ghn=ghn)
    return u * h_prev + (1 - u) * n


def _stack_parts(a):
    return np.stack((a.real, a.imag))


def complex_gru_cell(x, g_prev, W_i, W_h, b_i, b_h, cache=None):
    """One complex GRU step built from two real GRUs.

    The real parts of the parameters form GRU ``R``, the imaginary parts GRU
    ``I``. Each runs separately on the real and imaginary part of the input,
    with its own complex hidden vector ``p`` (for ``R``) and ``q`` (for ``I``):

        p' = R(Re x, Re p) + i R(Im x, Im p)
        q' = I(Re x, Re q) + i I(Im x, Im q)
        y  = p' + i q'     (= (R - I)-style complex product of the outputs)

    ``g_prev`` holds ``[p, q]`` along axis -2, shape ``(..., 2, H)``. Every
    real hidden component is a convex mix of its past and a tanh, so the
    state stays inside the unit box however long the recursion runs.

    Returns ``(y, g_new)``.
    """
    H = W_h.shape[1]
    if (g_prev.shape[-2:] != (2, H) or W_h.shape[0] != 3 * H or W_i.shape[0] != 3 * H
            or x.shape[-1] != W_i.shape[1]):
        raise ShapeError(f"input {x.shape} / hidden {g_prev.shape} inconsistent with "
                         f"W_i {W_i.shape}, W_h {W_h.shape}")
    lead = x.shape[:-1]
    x2 = np.asarray(x).reshape(-1, x.shape[-1])
    g2 = g_prev.reshape(-1, 2, H)
    # axes: (gru R/I, input part re/im, rows, units)
    xs = _stack_parts(x2)[None]
    hs = np.stack([_stack_parts(g2[:, j]) for j in range(2)])
    W_i2, W_h2 = (_stack_parts(a)[:, None] for a in (W_i, W_h))
    b_i2, b_h2 = (_stack_parts(a)[:, None, None] for a in (b_i, b_h))
    hn = real_gru_cell(xs, hs, W_i2, W_h2, b_i2, b_h2, cache)
    g_new = np.stack([hn[j, 0] + 1j * hn[j, 1] for j in range(2)], axis=-2)
    if cache is not None:
        cache.update(xs=xs, hs=hs, lead=lead)
    y = g_new[:, 0] + 1j * g_new[:, 1]
    return y.reshape(lead + (H,)), g_new.reshape(lead + (2, H))


def nkf_gain(z, g1, g2, weights, cache=None):
    """Network forward pass: returns ``(gain, g1_new, g2_new)``.

    ``cache`` (a dict) receives the intermediates needed for backpropagation.
    """
    w = weights
    if z.shape[-1] != w["fc1.W"].shape[1]:
        raise ShapeError(f"feature length {z.shape[-1]} != {w['fc1.W'].shape[1]}")
    a1 = complex_linear(z, w["fc1.W"], w["fc1.b"])
    p1 = complex_prelu(a1, w["fc1.slope"])
    c1 = {} if cache is not None else None
    c2 = {} if cache is not None else None
    y1, g1n = complex_gru_cell(p1, g1, w["gru1.W_i"], w["gru1.W_h"], w["gru1.b_i"], w["gru1.b_h"], c1)
    y2, g2n = complex_gru_cell(y1, g2, w["gru2.W_i"], w["gru2.W_h"], w["gru2.b_i"], w["gru2.b_h"], c2)
    a2 = complex_linear(y2, w["fc2.W"], w["fc2.b"])
    p2 = complex_prelu(a2, w["fc2.slope"])
    k = complex_linear(p2, w["fc3.W"], w["fc3.b"])
    if cache is not None:
        cache.update(z=z, a1=a1, gru1=c1, gru2=c2, y2=y2, a2=a2, p2=p2)
    return k, g1n, g2n


@dataclass
class NkfState:
    """Per-bin recurrent state; rows are bins (or bins x clips)."""

    h_hat: np.ndarray
    g1: np.ndarray
    g2: np.ndarray
    delta_h: np.ndarray


def init_state(config, rows=1, seed=None, mode=None, dtype=np.complex128):
    """Zero or white-Gaussian initial state for ``rows`` bins.

    Noise draws give every real component variance ``noise_scale ** 2``.
    """
    mode = InitMode(mode or config.init_mode)
    L, H = config.taps, config.gru_units
    shapes = ((rows, L), (rows, 2, H), (rows, 2, H), (rows, L))
    if mode is InitMode.ZEROS:
        return NkfState(*(np.zeros(s, dtype=dtype) for s in shapes))
    rng = np.random.default_rng(seed)
    s = config.noise_scale
    return NkfState(*(
        (s * (rng.standard_normal(sh) + 1j * rng.standard_normal(sh))).astype(dtype)
        for sh in shapes
    ))


def features(x, delta_h, e):
    """``z = [x; delta_h; e]`` along the last axis."""
    return np.concatenate((x, delta_h, e[..., None]), axis=-1)


def nkf_forward_frame(state, x, Y, weights, cache=None):
    """One frame of the neural Kalman recursion for every row.

    With the observation ``Y = h^H x`` the innovation enters conjugated,
    ``delta_h = k * conj(e)``; the output uses the updated estimate.

    Returns ``(S_hat, new_state)``.
    """
    e = Y - np.sum(np.conj(state.h_hat) * x, axis=-1)
    z = features(x, state.delta_h, e)
    k, g1, g2 = nkf_gain(z, state.g1, state.g2, weights, cache)
    dh = k * np.conj(e)[..., None]
    h = state.h_hat + dh
    S_hat = Y - np.sum(np.conj(h) * x, axis=-1)
    if cache is not None:
        cache.update(x=x, e=e, k=k, h_prev=state.h_hat)
    return S_hat, NkfState(h, g1, g2, dh)


def nkf_run(far_spec, mic_spec, weights, config=None, init_seed=None, dtype=np.complex128,
            bins=None, check_finite=True):
    """Run the neural Kalman filter over a spectrogram (frames x bins).

    ``bins`` optionally restricts and orders the processed bins; the rest pass
    through. Inference normally uses zero initialization.
    """
    config = config or weights.config
    far_spec = np.asarray(far_spec)
    mic_spec = np.asarray(mic_spec)
    if far_spec.shape != mic_spec.shape:
        raise ShapeError(f"far {far_spec.shape} vs mic {mic_spec.shape}")
    if config.taps != weights.config.taps:
        raise ShapeError("config taps differ from the weights' taps")
    w = weights if dtype == np.complex128 else weights.astype(dtype)
    idx = np.arange(far_spec.shape[1]) if bins is None else np.asarray(bins)
    xs = ctf_frames(far_spec[:, idx].astype(dtype), config.taps)
    Ys = mic_spec[:, idx].astype(dtype)
    est = np.array(mic_spec, dtype=dtype)
    state = init_state(config, len(idx), init_seed, dtype=dtype)
    for m in range(far_spec.shape[0]):
        est[m, idx], state = nkf_forward_frame(state, xs[m], Ys[m], w)
    if check_finite and not np.all(np.isfinite(est)):
        raise NumericalError("non-finite output from nkf_run")
    return est
