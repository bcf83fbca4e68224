"""Acoustic echo cancellation with a neural Kalman filter.

Modules
-------
signal      STFT / iSTFT and convolutive-transfer-function helpers
sim         synthetic speech, RIRs and test/training scenes
filters     TF-domain Kalman filter (TFDKF) and PNLMS baselines
nkf         complex-valued network and the neural Kalman recursion
train       loss, hand-written reverse pass, optimizers, training loop
metrics     ERLE / SDR and windowed ERLE curves
weights_io  NKFW weight files
cli         ``nkf-aec`` command line
"""

from .errors import (
    AecError, ConfigError, DegenerateInput, EmptyInput, InvalidConfig, NumericalError, ShapeError,
)
from .filters import PnlmsConfig, TfdkfConfig, pnlms_run, tfdkf_run
from .metrics import erle, erle_curve, sdr
from .nkf import ModelWeights, NkfConfig, nkf_run
from .signal import StftConfig, istft, stft

__version__ = "0.1.0"
