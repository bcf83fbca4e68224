"""Scene synthesis: speech-like sources, room impulse responses, echo
generation, SER mixing and echo-path changes.

A scene is a bit-exact function of its :class:`SceneConfig` (which carries the
seeds) and its source clips.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, DegenerateInput, InvalidConfig
from .signal import SAMPLE_RATE

SUBSETS = ("FST", "FST-EPC", "DT", "DT-EPC")

# -25 dBFS
SOURCE_RMS = 10 ** (-25 / 20)
# levels are normalized per utterance; shorter clips are crops of one
UTTERANCE_SAMPLES = 8 * SAMPLE_RATE


def speech_like(num_samples, rng, rms=SOURCE_RMS):
    """Speech-like test material: AR(2)-filtered noise with a syllabic envelope.

    The resonance is redrawn every 100-300 ms (roughly one syllable), and about
    a quarter of the syllables are pauses.
    """
    out = np.zeros(num_samples)
    env = np.zeros(num_samples)
    zi = np.zeros(2)
    segments = []
    pos = 0
    while pos < num_samples:
        seg = min(int(rng.uniform(0.1, 0.3) * SAMPLE_RATE), num_samples - pos)
        freq = rng.uniform(150.0, 3500.0)
        radius = rng.uniform(0.85, 0.98)
        a = [1.0, -2 * radius * np.cos(2 * np.pi * freq / SAMPLE_RATE), radius ** 2]
        y, zi = lfilter([1.0], a, rng.standard_normal(seg), zi=zi)
        out[pos:pos + seg] = y * (1 - radius)
        gain = 0.0 if rng.random() < 0.25 else rng.lognormal(0.0, 0.5)
        segments.append([pos, seg, gain])
        pos += seg
    if all(g == 0.0 for _, _, g in segments):
        # never return an all-pause clip
        segments[int(rng.integers(len(segments)))][2] = 1.0
    for pos, seg, gain in segments:
        env[pos:pos + seg] = gain * np.sin(np.pi * (np.arange(seg) + 0.5) / seg) ** 0.5
    sig = out * env
    power = np.mean(sig ** 2)
    if power > 0:
        sig *= rms / np.sqrt(power)
    return sig


class SpeechCorpus:
    """Source of speech clips.

    With ``directory=None`` clips come from :func:`speech_like`; otherwise
    from the 16 kHz mono WAV files in ``directory``.

    Levels are set per utterance, not per clip: a built-in utterance lasts at
    least :data:`UTTERANCE_SAMPLES` and a WAV file is one utterance, each
    normalized to :data:`SOURCE_RMS` before a random crop is taken. Short
    clips therefore keep the loud and quiet stretches of their utterance, the
    same level spread a long clip has.
    """

    def __init__(self, directory=None, builtin=True):
        self.directory = directory
        self.files = []
        if directory is not None:
            self.files = sorted(Path(directory).glob("*.wav"))
            if not self.files and not builtin:
                raise ConfigError(f"no .wav files in {directory}")
        elif not builtin:
            raise ConfigError("empty corpus and built-in generator disabled")
        self._cache = {}

    def draw(self, rng, num_samples):
        if not self.files:
            if num_samples >= UTTERANCE_SAMPLES:
                return speech_like(num_samples, rng)
            utterance = speech_like(UTTERANCE_SAMPLES, rng)
            start = rng.integers(0, UTTERANCE_SAMPLES - num_samples + 1)
            return utterance[start:start + num_samples].copy()
        from .wavio import read_wav

        order = rng.permutation(len(self.files))
        for i in order:
            path = self.files[i]
            if path not in self._cache:
                data = read_wav(path)
                power = np.mean(data ** 2) if len(data) else 0.0
                self._cache[path] = data * (SOURCE_RMS / np.sqrt(power)) if power > 0 else data
            data = self._cache[path]
            if len(data) >= num_samples:
                start = rng.integers(0, len(data) - num_samples + 1)
                return data[start:start + num_samples].copy()
        raise ConfigError(f"no file in {self.directory} has {num_samples} samples")


def generate_rir(length, seed, mode="decay", t60=0.1, sample_rate=SAMPLE_RATE):
    """Random room impulse response with unit energy.

    ``mode="white"`` gives flat white Gaussian noise (training material);
    ``mode="decay"`` shapes it with an exponential envelope reaching -60 dB
    after ``t60`` seconds.
    """
    if length < 1:
        raise InvalidConfig("rir length must be >= 1")
    rng = np.random.default_rng(seed)
    h = rng.standard_normal(length)
    if mode == "decay":
        h *= np.exp(-3.0 * np.log(10.0) * np.arange(length) / (t60 * sample_rate))
    elif mode != "white":
        raise InvalidConfig(f"unknown rir mode {mode!r}")
    return h / np.sqrt(np.sum(h ** 2))


def convolve_echo(far, rir):
    """Linear echo ``sum_t h[t] x[n - t]``, truncated to ``len(far)``."""
    far = np.asarray(far, dtype=np.float64)
    rir = np.asarray(rir, dtype=np.float64)
    if rir.size == 0:
        raise InvalidConfig("empty rir")
    return np.convolve(far, rir)[:len(far)]


def apply_echo_path_change(far, rir_a, rir_b, switch_sample):
    """Echo produced by ``rir_a`` before ``switch_sample`` and ``rir_b`` after.

    Both filters see the same far-end history; samples are taken from one
    filter or the other, never blended.
    """
    if len(rir_a) != len(rir_b):
        raise InvalidConfig("rirs must have equal length")
    if not 0 <= switch_sample <= len(far):
        raise InvalidConfig(f"switch sample {switch_sample} outside [0, {len(far)}]")
    a = convolve_echo(far, rir_a)
    b = convolve_echo(far, rir_b)
    return np.concatenate((a[:switch_sample], b[switch_sample:]))


def mix_at_ser(near, echo, ser_db, active=slice(None)):
    """Scale ``echo`` so that near/echo power over ``active`` equals ``ser_db``.

    Returns ``(mic, scaled_echo)`` with ``mic = near + scaled_echo``.
    """
    near = np.asarray(near, dtype=np.float64)
    echo = np.asarray(echo, dtype=np.float64)
    p_near = np.mean(near[active] ** 2)
    p_echo = np.mean(echo[active] ** 2)
    if p_near == 0.0:
        raise DegenerateInput("near-end has no energy in the active segment")
    if p_echo == 0.0:
        raise DegenerateInput("echo has no energy in the active segment")
    scale = np.sqrt(p_near / p_echo * 10 ** (-ser_db / 10))
    scaled = echo * scale
    return near + scaled, scaled


def measured_ser(near, echo, active=slice(None)):
    return 10 * np.log10(np.mean(near[active] ** 2) / np.mean(echo[active] ** 2))


@dataclass(frozen=True)
class SceneConfig:
    """Everything needed to rebuild a scene from its sources.

    ``ser_db=None`` or ``near_len=0`` gives far-end single talk.
    """

    far_len: float
    near_len: float = 0.0
    near_offset: float = 0.0
    ser_db: float | None = None
    switch_time: float | None = None
    rir_seed: int = 0
    mix_seed: int = 0
    rir_length: int = 1024
    rir_mode: str = "decay"
    t60: float = 0.1
    subset: str = ""

    def __post_init__(self):
        if self.far_len <= 0:
            raise InvalidConfig("far_len must be positive")
        if self.near_len < 0 or self.near_offset < 0:
            raise InvalidConfig("near segment must have non-negative length and offset")
        if self.near_offset + self.near_len > self.far_len + 1e-9:
            raise InvalidConfig("near segment does not fit inside the far-end segment")
        if self.switch_time is not None and not 0 <= self.switch_time <= self.far_len:
            raise InvalidConfig("switch_time outside the signal")
        if self.near_len > 0 and self.ser_db is None:
            raise InvalidConfig("double-talk scene needs ser_db")

    @property
    def double_talk(self):
        return self.near_len > 0

    def to_record(self):
        return asdict(self)

    @classmethod
    def from_record(cls, rec):
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in rec.items() if k in names})


@dataclass
class Scene:
    far: np.ndarray
    near: np.ndarray
    echo: np.ndarray
    mic: np.ndarray
    rirs: list
    config: SceneConfig
    sample_rate: int = SAMPLE_RATE

    @property
    def switch_sample(self):
        t = self.config.switch_time
        return None if t is None else int(round(t * self.sample_rate))


def _samples(seconds, sr=SAMPLE_RATE):
    return int(round(seconds * sr))


def build_scene(far_src, near_src, config, sample_rate=SAMPLE_RATE):
    """Assemble a scene from source clips.

    ``far_src`` and ``near_src`` are cropped at offsets drawn from
    ``config.mix_seed``; ``near_src`` may be None for single-talk scenes.
    """
    n = _samples(config.far_len, sample_rate)
    rng = np.random.default_rng(config.mix_seed)
    far_src = np.asarray(far_src, dtype=np.float64)
    if len(far_src) < n:
        raise InvalidConfig(f"far-end source has {len(far_src)} samples, need {n}")
    start = rng.integers(0, len(far_src) - n + 1)
    far = far_src[start:start + n]

    rir_rng = np.random.default_rng(config.rir_seed)
    seeds = rir_rng.integers(0, 2 ** 32, size=2)
    rir_a = generate_rir(config.rir_length, int(seeds[0]), config.rir_mode, config.t60, sample_rate)
    rirs = [rir_a]
    if config.switch_time is None:
        echo = convolve_echo(far, rir_a)
    else:
        rir_b = generate_rir(config.rir_length, int(seeds[1]), config.rir_mode, config.t60, sample_rate)
        rirs.append(rir_b)
        echo = apply_echo_path_change(far, rir_a, rir_b, _samples(config.switch_time, sample_rate))

    near = np.zeros(n)
    if config.double_talk:
        nn_ = _samples(config.near_len, sample_rate)
        off = _samples(config.near_offset, sample_rate)
        nn_ = min(nn_, n - off)
        if near_src is None or len(near_src) < nn_:
            raise InvalidConfig(f"near-end source too short, need {nn_} samples")
        near_src = np.asarray(near_src, dtype=np.float64)
        nstart = rng.integers(0, len(near_src) - nn_ + 1)
        near[off:off + nn_] = near_src[nstart:nstart + nn_]
        mic, echo = mix_at_ser(near, echo, config.ser_db, slice(off, off + nn_))
    else:
        mic = near + echo
    return Scene(far, near, echo, mic, rirs, config, sample_rate)


def sample_eval_config(subset, rng, duration=8.0, ser_range=(-10.0, 10.0),
                       switch_range=(3.5, 4.5), rir_length=1024, t60=0.1):
    """Draw a test-set scene config for one of :data:`SUBSETS`."""
    if subset not in SUBSETS:
        raise InvalidConfig(f"unknown subset {subset!r}")
    dt = subset.startswith("DT")
    epc = subset.endswith("EPC")
    ser = float(rng.uniform(*ser_range)) if dt else None
    switch = float(rng.uniform(*switch_range)) if epc else None
    return SceneConfig(
        far_len=duration,
        near_len=duration if dt else 0.0,
        near_offset=0.0,
        ser_db=ser,
        switch_time=switch,
        rir_seed=int(rng.integers(0, 2 ** 31)),
        mix_seed=int(rng.integers(0, 2 ** 31)),
        rir_length=rir_length,
        rir_mode="decay",
        t60=t60,
        subset=subset,
    )


def sample_train_config(rng, far_len=1.0, near_range=(0.5, 1.0), ser_range=(-5.0, 5.0),
                        rir_length=1024):
    """Training scene: white-noise RIR, 1 s far end, partial near-end segment."""
    near_len = float(rng.uniform(*near_range))
    near_len = min(near_len, far_len)
    offset = float(rng.uniform(0.0, far_len - near_len))
    return SceneConfig(
        far_len=far_len,
        near_len=near_len,
        near_offset=offset,
        ser_db=float(rng.uniform(*ser_range)),
        rir_seed=int(rng.integers(0, 2 ** 31)),
        mix_seed=int(rng.integers(0, 2 ** 31)),
        rir_length=rir_length,
        rir_mode="white",
    )


def scene_from_config(config, corpus, source_seed):
    """Draw source clips with ``source_seed`` and build the scene."""
    rng = np.random.default_rng(source_seed)
    n = _samples(config.far_len)
    far_src = corpus.draw(rng, n)
    near_src = corpus.draw(rng, _samples(max(config.near_len, 1.0 / SAMPLE_RATE))) \
        if config.double_talk else None
    return build_scene(far_src, near_src, config)


@dataclass
class ManifestRow:
    clip_id: str
    subset: str
    config: SceneConfig
    source_seed: int
    paths: dict = field(default_factory=dict)

    def to_json(self):
        rec = {"clip_id": self.clip_id, "subset": self.subset,
               "source_seed": self.source_seed, "paths": self.paths}
        rec.update(self.config.to_record())
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        rec = json.loads(line)
        return cls(rec["clip_id"], rec["subset"], SceneConfig.from_record(rec),
                   rec["source_seed"], rec.get("paths", {}))


def read_manifest(path):
    with open(path) as f:
        return [ManifestRow.from_json(line) for line in f if line.strip()]


def write_manifest(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(row.to_json() + "\n")
