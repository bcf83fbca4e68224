"""Echo-cancellation metrics: ERLE, SDR and windowed ERLE curves."""

import numpy as np

from .errors import DegenerateInput, InvalidConfig, ShapeError

REPORT_CAP_DB = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def _ratio_db(num, den):
    if den == 0.0:
        return np.inf
    return 10.0 * np.log10(num / den)


def cap_db(value, cap=REPORT_CAP_DB):
    """Clamp a dB value (possibly +inf) to ``cap`` for reporting."""
    return float(min(value, cap))


def erle(d, d_hat):
    """Echo return loss enhancement in dB: ``10 log10(sum d^2 / sum (d - d_hat)^2)``.

    Returns ``inf`` when the estimate is exact; see :func:`cap_db`.
    """
    d, d_hat = _pair(d, d_hat)
    num = float(np.sum(d * d))
    if num == 0.0:
        raise DegenerateInput("echo signal has zero energy")
    return _ratio_db(num, float(np.sum((d - d_hat) ** 2)))


def sdr(s, s_hat):
    """Signal-to-distortion ratio in dB, without any alignment search."""
    s, s_hat = _pair(s, s_hat)
    num = float(np.sum(s * s))
    if num == 0.0:
        raise DegenerateInput("reference signal has zero energy")
    return _ratio_db(num, float(np.sum((s - s_hat) ** 2)))


def erle_curve(d, d_hat, window, hop, cap=REPORT_CAP_DB, rel_floor=1e-6):
    """ERLE over trailing windows.

    Point ``i`` covers samples ``[(i + 1) * hop - window, (i + 1) * hop)``
    (clipped at zero), so there are ``ceil(len / hop)`` points and each only
    looks at the past. Windows whose echo energy is below ``rel_floor`` times
    the mean per-window energy are gaps and come back as NaN.

    Returns
    -------
    times : ndarray
        End time of each window in samples.
    values : ndarray
        ERLE in dB, capped at ``cap``.
    """
    d, d_hat = _pair(d, d_hat)
    if not window >= hop >= 1:
        raise InvalidConfig("need window >= hop >= 1")
    n = len(d)
    ends = np.minimum(np.arange(1, -(-n // hop) + 1) * hop, n)
    starts = np.maximum(ends - window, 0)
    r2 = (d - d_hat) ** 2
    d2 = d * d
    # direct sums; cumulative-sum differences lose precision late in a clip
    num = np.array([d2[a:b].sum() for a, b in zip(starts, ends)])
    den = np.array([r2[a:b].sum() for a, b in zip(starts, ends)])
    floor = rel_floor * np.mean(num) if np.any(num > 0) else np.inf
    values = np.full(len(ends), np.nan)
    ok = num > floor
    with np.errstate(divide="ignore"):
        values[ok] = 10.0 * np.log10(num[ok] / den[ok])
    values = np.minimum(values, cap)
    return ends.astype(np.float64), values


def frames_to_threshold(values, start, threshold=10.0, settle=0):
    """Index offset from ``start + settle`` at which a curve first reaches
    ``threshold`` dB, measured from ``start``.

    Returns ``len(values) - start`` when the threshold is never reached, so a
    censored clip counts as "no faster than the remaining length".
    """
    values = np.asarray(values)
    begin = start + settle
    hits = np.nonzero(np.nan_to_num(values[begin:], nan=-np.inf) >= threshold)[0]
    if hits.size == 0:
        return len(values) - start
    return int(hits[0] + settle)
