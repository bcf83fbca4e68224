"""End-to-end training of the neural Kalman filter.

The loss is the squared error between the true and estimated echo spectra,
summed over frames, bins and clips. Gradients come from a hand-written
reverse pass through the unrolled recursion (:func:`backward`); the gradient
of a real loss w.r.t. a complex tensor ``w = a + ib`` is reported as
``dL/da + i dL/db``.
"""

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DegenerateInput, NumericalError, ShapeError
from .nkf import InitMode, ModelWeights, NkfConfig, NkfState, init_state, nkf_forward_frame
from .signal import StftConfig, ctf_frames, stft
from .sim import SpeechCorpus, sample_train_config, scene_from_config

log = logging.getLogger(__name__)


def echo_loss(D, D_hat):
    """Sum of ``|D - D_hat|^2`` over every entry."""
    D = np.asarray(D)
    D_hat = np.asarray(D_hat)
    if D.shape != D_hat.shape:
        raise ShapeError(f"{D.shape} vs {D_hat.shape}")
    diff = D - D_hat
    return float(np.sum(diff.real ** 2 + diff.imag ** 2))


# ---------------------------------------------------------------------------
# forward with trace / reverse pass

@dataclass
class Trace:
    caches: list
    D_hat: np.ndarray
    D: np.ndarray
    loss: float


def forward_trace(far_spec, mic_spec, echo_spec, weights, state=None):
    """Run the recursion on ``(frames, rows)`` spectra and keep what the
    reverse pass needs."""
    config = weights.config
    frames, rows = far_spec.shape
    xs = ctf_frames(far_spec, config.taps)
    if state is None:
        state = init_state(config, rows)
    caches = []
    D_hat = np.zeros((frames, rows), dtype=complex)
    for m in range(frames):
        cache = {}
        S_hat, state = nkf_forward_frame(state, xs[m], mic_spec[m], weights, cache)
        D_hat[m] = mic_spec[m] - S_hat
        caches.append(cache)
    return Trace(caches, D_hat, echo_spec, echo_loss(echo_spec, D_hat))


def _split_grad(g, out, dfn):
    # out = f(Re a) + i f(Im a); dfn maps the output part to f'
    return g.real * dfn(out.real) + 1j * g.imag * dfn(out.imag)


def _prelu_backward(g, a, slope, grads, name):
    re, im = a.real, a.imag
    ga = g.real * np.where(re > 0, 1.0, slope) + 1j * g.imag * np.where(im > 0, 1.0, slope)
    grads[name] += np.sum(g.real * np.minimum(re, 0.0) + g.imag * np.minimum(im, 0.0), axis=0)
    return ga


def _linear_backward(g, x, W, grads, prefix, wname="W", bname="b"):
    grads[f"{prefix}.{wname}"] += g.T @ np.conj(x)
    grads[f"{prefix}.{bname}"] += g.sum(axis=0)
    return g @ np.conj(W)


def _stack_parts(a):
    return np.stack((a.real, a.imag))


def _real_gru_backward(G, c, xs, hs, W_i, W_h):
    """Reverse of :func:`real_gru_cell` on stacked real streams.

    Returns ``(g_gi, g_gh, g_h)``: gradients of the input and hidden gate
    pre-activations and the direct path to the previous hidden state.
    """
    r, u, n, ghn = c["r"], c["u"], c["n"], c["ghn"]
    g_u = G * (hs - n)
    g_h = G * u
    g_an = G * (1.0 - u) * (1.0 - n * n)
    g_ar = g_an * ghn * r * (1.0 - r)
    g_au = g_u * u * (1.0 - u)
    g_gi = np.concatenate((g_ar, g_au, g_an), axis=-1)
    g_gh = np.concatenate((g_ar, g_au, g_an * r), axis=-1)
    return g_gi, g_gh, g_h


def _gru_backward(g_y, g_next, c, weights, grads, prefix):
    """Reverse of :func:`complex_gru_cell` for 2-D inputs.

    ``g_y`` is the gradient on the layer output, ``g_next`` the gradient on
    the new hidden state coming from the next frame. Returns the gradients
    on the input and on the previous hidden state.
    """
    # y = p' + i q'  ->  dL/dp' = g_y, dL/dq' = -i g_y
    g_state = g_next + np.stack((g_y, -1j * g_y), axis=-2)
    G = np.stack([_stack_parts(g_state[:, j]) for j in range(2)])
    xs, hs = c["xs"], c["hs"]
    W_i2, W_h2 = (_stack_parts(weights[f"{prefix}.{n}"])[:, None] for n in ("W_i", "W_h"))
    g_gi, g_gh, g_h = _real_gru_backward(G, c, xs, hs, W_i2, W_h2)
    for name, g, inp in (("W_i", g_gi, xs), ("W_h", g_gh, hs)):
        gw = np.sum(np.swapaxes(g, -1, -2) @ inp, axis=1)
        gb = np.sum(g, axis=(1, 2))
        grads[f"{prefix}.{name}"] += gw[0] + 1j * gw[1]
        grads[f"{prefix}.b_{name[-1]}"] += gb[0] + 1j * gb[1]
    g_xs = np.sum(g_gi @ W_i2, axis=0)
    g_hs = g_h + g_gh @ W_h2
    g_prev = np.stack([g_hs[j, 0] + 1j * g_hs[j, 1] for j in range(2)], axis=-2)
    return g_xs[0] + 1j * g_xs[1], g_prev


def zero_grads(weights):
    return {k: np.zeros_like(v) for k, v in weights.items()}


def backward(trace, weights, grads=None):
    """Reverse-mode gradient of ``trace.loss`` w.r.t. every weight tensor.

    Accumulates into ``grads`` when given. Returns the gradient dict
    (same names and shapes as ``weights``).
    """
    w = weights
    if grads is None:
        grads = zero_grads(weights)
    if not trace.caches:
        return grads
    rows = trace.D.shape[1]
    L = w.config.taps
    H = w.config.gru_units
    g_h_next = np.zeros((rows, L), dtype=complex)
    g_dh_next = np.zeros((rows, L), dtype=complex)
    g_g1_next = np.zeros((rows, 2, H), dtype=complex)
    g_g2_next = np.zeros((rows, 2, H), dtype=complex)
    for m in range(len(trace.caches) - 1, -1, -1):
        c = trace.caches[m]
        x, e, k = c["x"], c["e"], c["k"]
        g_dhat = 2.0 * (trace.D_hat[m] - trace.D[m])
        # D_hat = sum conj(h) x
        g_h = g_h_next + np.conj(g_dhat)[:, None] * x
        g_dh = g_h + g_dh_next
        # dh = k * conj(e)
        g_k = g_dh * e[:, None]
        g_e = np.sum(np.conj(g_dh) * k, axis=-1)

        g_p2 = _linear_backward(g_k, c["p2"], w["fc3.W"], grads, "fc3")
        g_a2 = _prelu_backward(g_p2, c["a2"], w["fc2.slope"], grads, "fc2.slope")
        g_y2 = _linear_backward(g_a2, c["y2"], w["fc2.W"], grads, "fc2")
        g_y1, g_g2_next = _gru_backward(g_y2, g_g2_next, c["gru2"], w, grads, "gru2")
        g_p1, g_g1_next = _gru_backward(g_y1, g_g1_next, c["gru1"], w, grads, "gru1")
        g_a1 = _prelu_backward(g_p1, c["a1"], w["fc1.slope"], grads, "fc1.slope")
        g_z = _linear_backward(g_a1, c["z"], w["fc1.W"], grads, "fc1")

        g_dh_next = g_z[:, L:2 * L]
        g_e = g_e + g_z[:, 2 * L]
        # e = Y - sum conj(h_prev) x
        g_h_next = g_h - np.conj(g_e)[:, None] * x
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}", name)
    return grads


def loss_and_grad(weights, far_spec, mic_spec, echo_spec, state=None, grads=None):
    trace = forward_trace(far_spec, mic_spec, echo_spec, weights, state)
    return trace.loss, backward(trace, weights, grads)


def grad_check(weights, sample, eps=1e-5, grads=None, atol=1e-8):
    """Compare reverse-mode gradients against central finite differences on
    every real parameter component.

    ``sample`` is ``(far_spec, mic_spec, echo_spec[, state])``. ``grads``
    overrides the analytic gradients (for fault injection). The relative
    error of one component is ``|a - n| / max(|a|, |n|, atol)``.

    Returns ``(max_relative_error, tensor_name)``.
    """
    far, mic, echo = sample[:3]
    state = sample[3] if len(sample) > 3 else None

    def loss(wts):
        st = None if state is None else NkfState(*(a.copy() for a in (state.h_hat, state.g1, state.g2, state.delta_h)))
        return forward_trace(far, mic, echo, wts, st).loss

    if grads is None:
        grads = loss_and_grad(weights, far, mic, echo, state)[1]
    worst, worst_name = 0.0, None
    probe = weights.copy()
    for name, value in weights.items():
        parts = [(1.0, lambda g: g.real)]
        if np.iscomplexobj(value):
            parts.append((1j, lambda g: g.imag))
        for unit, take in parts:
            analytic = take(grads[name]).ravel()
            flat = probe[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + unit * eps
                up = loss(probe)
                flat[i] = orig - unit * eps
                down = loss(probe)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), atol)
                if err > worst:
                    worst, worst_name = err, name
    return worst, worst_name


# ---------------------------------------------------------------------------
# optimizers

def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.abs(g) ** 2)) for g in grads.values()))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class SGD:
    def __init__(self):
        pass

    def step(self, weights, grads, lr):
        for k, g in grads.items():
            weights[k] -= lr * g


class Adam:
    """Adam treating real and imaginary parts as independent parameters."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, weights, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros(g.shape + ((2,) if np.iscomplexobj(g) else ()))
            parts = np.stack((g.real, g.imag), -1) if np.iscomplexobj(g) else g
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * parts ** 2
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = np.sqrt(self.v[k] / (1 - b2 ** self.t)) + self.eps
            if np.iscomplexobj(g):
                upd = mhat.real / vhat[..., 0] + 1j * mhat.imag / vhat[..., 1]
            else:
                upd = mhat / vhat
            weights[k] -= lr * upd


# ---------------------------------------------------------------------------
# data and training loop

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    decay_start: int = 20
    decay_every: int = 10
    epochs: int = 5
    batch_size: int = 16
    num_clips: int = 200
    far_len: float = 1.0
    near_range: tuple = (0.5, 1.0)
    ser_range: tuple = (-5.0, 5.0)
    level_range: tuple = (0.0, 0.0)
    rir_length: int = 1024
    init_noise_prob: float = 0.5
    clip_norm: float | None = 5.0
    optimizer: str = "sgd"
    chunk_clips: int = 4
    bins_per_clip: int | None = None
    seed: int = 0
    weight_seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 0 or self.batch_size < 1 or self.num_clips < 1:
            raise ConfigError("invalid training configuration")
        if not 0 <= self.init_noise_prob <= 1:
            raise ConfigError("init_noise_prob must lie in [0, 1]")
        if self.level_range[0] > self.level_range[1]:
            raise ConfigError("level_range must be ordered")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def lr_at(epoch, config=TrainConfig()):
    """Learning rate for a 1-based epoch: constant, then halved every
    ``decay_every`` epochs from ``decay_start`` on."""
    if epoch < config.decay_start:
        return config.lr
    return config.lr * 0.5 ** ((epoch - config.decay_start) // config.decay_every + 1)


@dataclass
class Example:
    far: np.ndarray
    mic: np.ndarray
    echo: np.ndarray


def sample_example(corpus, config=TrainConfig(), seed=0, stft_config=StftConfig()):
    """One training scene and its spectra ``Example(far, mic, echo)``.

    The whole scene is scaled by a gain drawn uniformly in dB from
    ``config.level_range`` so the network sees a spread of playback levels;
    the SER is unaffected.
    """
    rng = np.random.default_rng(seed)
    for _ in range(100):
        scene_cfg = sample_train_config(rng, config.far_len, config.near_range, config.ser_range,
                                        config.rir_length)
        try:
            scene = scene_from_config(scene_cfg, corpus, int(rng.integers(0, 2 ** 31)))
            break
        except DegenerateInput:
            # silent far end under the near-end segment; redraw
            continue
    else:
        raise ConfigError("could not draw a non-degenerate training scene")
    gain = 10.0 ** (rng.uniform(*config.level_range) / 20.0)
    return scene, Example(gain * stft(scene.far, stft_config), gain * stft(scene.mic, stft_config),
                          gain * stft(scene.echo, stft_config))


def _example_seeds(config):
    return np.random.default_rng([config.seed, 0]).integers(0, 2 ** 31, size=config.num_clips)


def noise_init_flags(count, prob, rng):
    """Which of ``count`` clips start from a noise state this epoch.

    Every clip is noisy with probability ``prob``, but the number of noisy
    clips is fixed at ``prob * count`` (randomly rounded) rather than
    binomial, so epoch means are not shifted by the coin flips.
    """
    target = prob * count
    n = int(math.floor(target)) + int(rng.random() < target - math.floor(target))
    flags = np.zeros(count, dtype=bool)
    flags[rng.permutation(count)[:n]] = True
    return flags


def _batch_states(nkf_config, rows_per_clip, flags, rng):
    parts = []
    for noisy in flags:
        seed = int(rng.integers(0, 2 ** 31))
        mode = InitMode.NOISE if noisy else InitMode.ZEROS
        parts.append(init_state(nkf_config, rows_per_clip, seed, mode))
    return NkfState(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                      ("h_hat", "g1", "g2", "delta_h")))


def stratified_bins(num_bins, count, rng):
    """One random bin from each of ``count`` equal-width frequency bands.

    The network is shared across bins, so a subset of bins estimates the
    summed loss. Echo energy is concentrated in the low bins; plain random
    subsets often miss them entirely, while every stratified draw spans the
    whole spectrum.
    """
    edges = np.linspace(0, num_bins, count + 1).astype(int)
    return edges[:-1] + np.floor(rng.random(count) * np.diff(edges)).astype(int)


def _stack(examples, bins=None):
    if bins is None:
        bins = [slice(None)] * len(examples)
    return tuple(np.concatenate([getattr(ex, f)[:, b] for ex, b in zip(examples, bins)], axis=1)
                 for f in ("far", "mic", "echo"))


def write_checkpoint(out_dir, weights, epoch, lr, loss):
    from .weights_io import save_weights

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"epoch{epoch:03d}.nkfw"
    save_weights(path, weights)
    with open(f"{path}.txt", "w") as f:
        f.write(f"epoch = {epoch}\nlr = {lr!r}\nloss = {loss!r}\n")
    save_weights(out_dir / "last.nkfw", weights)
    with open(out_dir / "last.nkfw.txt", "w") as f:
        f.write(f"epoch = {epoch}\nlr = {lr!r}\nloss = {loss!r}\n")
    return path


def read_sidecar(path):
    out = {}
    with open(path) as f:
        for line in f:
            if "=" in line:
                k, v = line.split("=", 1)
                out[k.strip()] = v.strip()
    return out


def write_loss_csv(path, history):
    with open(path, "w") as f:
        f.write("epoch,mean_loss,lr\n")
        for row in history:
            f.write(f"{row['epoch']},{row['mean_loss']!r},{row['lr']!r}\n")


def train(corpus=None, config=TrainConfig(), nkf_config=NkfConfig(), weights=None,
          start_epoch=1, out_dir=None, examples=None, progress=None):
    """Train NKF weights.

    Clips are drawn once from ``corpus`` (``config.num_clips`` of them) and
    reshuffled every epoch; each clip in each epoch starts from a zero or a
    noise state with probability ``init_noise_prob``. Every epoch writes a
    checkpoint to ``out_dir`` when given.

    Returns ``(weights, history)``; ``history`` rows hold ``epoch``,
    ``mean_loss`` (per clip) and ``lr``. A non-finite loss aborts with
    NumericalError carrying the last good weights as ``.weights``.
    """
    corpus = corpus or SpeechCorpus()
    if weights is None:
        weights = ModelWeights.glorot(nkf_config, config.weight_seed)
    else:
        weights = weights.copy()
    if examples is None:
        examples = [sample_example(corpus, config, int(s))[1] for s in _example_seeds(config)]
    opt = Adam() if config.optimizer == "adam" else SGD()
    num_bins = examples[0].far.shape[1]
    rows = num_bins if config.bins_per_clip is None else min(config.bins_per_clip, num_bins)
    history = []
    for epoch in range(start_epoch, start_epoch + config.epochs):
        lr = lr_at(epoch, config)
        rng = np.random.default_rng([config.seed, 1, epoch])
        order = rng.permutation(len(examples))
        noisy = noise_init_flags(len(examples), config.init_noise_prob, rng)
        good = weights.copy()
        total = 0.0
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            grads = zero_grads(weights)
            for c0 in range(0, len(batch), config.chunk_clips):
                idx = batch[c0:c0 + config.chunk_clips]
                chunk = [examples[i] for i in idx]
                bins = None
                if rows < num_bins:
                    bins = [stratified_bins(num_bins, rows, rng) for _ in chunk]
                far, mic, echo = _stack(chunk, bins)
                state = _batch_states(nkf_config, rows, noisy[idx], rng)
                try:
                    loss, grads = loss_and_grad(weights, far, mic, echo, state, grads)
                    if not np.isfinite(loss):
                        raise NumericalError(f"non-finite loss in epoch {epoch}")
                except NumericalError as err:
                    err.weights = good
                    err.history = history
                    raise
                total += loss
            grads, _ = clip_by_global_norm(grads, config.clip_norm)
            opt.step(weights, grads, lr)
        row = {"epoch": epoch, "mean_loss": total / len(examples) * num_bins / rows, "lr": lr}
        history.append(row)
        log.info("epoch %d lr %.6g mean loss %.6g", epoch, lr, row["mean_loss"])
        if progress is not None:
            progress(row)
        if out_dir is not None:
            write_checkpoint(out_dir, weights, epoch, lr, row["mean_loss"])
    return weights, history


def config_dict(config):
    return asdict(config)
