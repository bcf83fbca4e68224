"""Watch the TF-domain Kalman filter lock onto an echo path.

Builds an 8 s far-end single-talk scene with a decaying 64 ms room
response, runs the TFDKF and PNLMS baselines, and prints the windowed ERLE
every half second plus the full-clip numbers.

    python3 demos/tfdkf_convergence.py
"""
import numpy as np

from nkf_aec.filters import PnlmsConfig, pnlms_run, tfdkf_run
from nkf_aec.metrics import erle, erle_curve
from nkf_aec.signal import StftConfig, istft, stft
from nkf_aec.sim import SpeechCorpus, sample_eval_config, scene_from_config

cfg = sample_eval_config("FST", np.random.default_rng(1))
scene = scene_from_config(cfg, SpeechCorpus(), source_seed=7)
stft_cfg = StftConfig()

# the filter works on spectra; the residual goes back to the time domain
X, Y = stft(scene.far, stft_cfg), stft(scene.mic, stft_cfg)
tfdkf_out = istft(tfdkf_run(X, Y), stft_cfg, len(scene.mic))
pnlms_out = pnlms_run(scene.far, scene.mic, PnlmsConfig())

print(f"scene: {cfg.far_len:.0f} s, rir {cfg.rir_length} taps, far-end single talk")
for name, out in (("tfdkf", tfdkf_out), ("pnlms", pnlms_out)):
    # ERLE compares the echo with what is left of it after cancellation
    ends, curve = erle_curve(scene.echo, scene.mic - out, 1024, 256)
    marks = [f"{curve[i]:5.1f}" for i in range(31, len(curve), 31)]
    print(f"{name:6s} full clip {erle(scene.echo, scene.mic - out):5.1f} dB | every ~0.5 s:",
          " ".join(marks))
