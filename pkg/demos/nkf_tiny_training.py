"""Train a neural Kalman filter for a couple of epochs and compare it
with the untrained network and the TFDKF baseline.

Kept small so it finishes in a few minutes on one core; the acceptance
test runs the full desk-scale recipe.

    python3 demos/nkf_tiny_training.py
"""
import numpy as np

from nkf_aec.filters import tfdkf_run
from nkf_aec.metrics import erle
from nkf_aec.nkf import ModelWeights, NkfConfig, nkf_run
from nkf_aec.signal import StftConfig, istft, stft
from nkf_aec.sim import SpeechCorpus, sample_eval_config, scene_from_config
from nkf_aec.train import TrainConfig, train

corpus = SpeechCorpus()
nkf_cfg = NkfConfig()
print(f"NKF with L={nkf_cfg.taps}: {ModelWeights.zeros(nkf_cfg).real_param_count()} real parameters")

untrained = ModelWeights.glorot(nkf_cfg, seed=0)
config = TrainConfig(num_clips=32, epochs=2, batch_size=8)
trained, history = train(corpus, config, nkf_cfg, weights=untrained,
                         progress=lambda row: print(f"epoch {row['epoch']}: "
                                                    f"mean loss {row['mean_loss']:.4g}"))

stft_cfg = StftConfig()
rng = np.random.default_rng(99)
scores = {"passthrough": [], "untrained": [], "trained": [], "tfdkf": []}
for i in range(3):
    scene = scene_from_config(sample_eval_config("FST", rng), corpus, 500 + i)
    X, Y = stft(scene.far, stft_cfg), stft(scene.mic, stft_cfg)
    outs = {"passthrough": Y, "untrained": nkf_run(X, Y, untrained),
            "trained": nkf_run(X, Y, trained), "tfdkf": tfdkf_run(X, Y)}
    for name, S in outs.items():
        s = istft(S, stft_cfg, len(scene.mic))
        scores[name].append(erle(scene.echo, scene.mic - s))

for name, vals in scores.items():
    print(f"{name:12s} mean ERLE {np.mean(vals):6.2f} dB")
