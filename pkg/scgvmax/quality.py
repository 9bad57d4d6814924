""" Signal quality of SCG pulses: dynamic time warping against a subject template,
    the SQI = exp(-distance/path length) score, and rejection of the lowest-scoring 5%.
"""

import dataclasses
import logging
import math

import numba as nb
import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class EmptyInputException(ValueError):
    """ Thrown if a sequence or pulse list that must be non-empty is empty. """
    def __init__(self, what):
        self.what = what
        super().__init__()

    def __str__(self):
        return f"{self.what} must not be empty"


@dataclasses.dataclass(frozen=True)
class DtwResult:
    """ Accumulated |a_i - b_j| along the optimal warping path, and the number of aligned pairs on it. """
    distance: float
    path_length: int


@nb.njit(cache=False, nogil=True)
def _dtw_kernel(a, b):
    n, m = len(a), len(b)
    cost = np.full((n + 1, m + 1), np.inf)
    steps = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            # Diagonal first so that ties keep the diagonal step.
            best = cost[i - 1, j - 1]
            length = steps[i - 1, j - 1]
            if cost[i - 1, j] < best:
                best = cost[i - 1, j]
                length = steps[i - 1, j]
            if cost[i, j - 1] < best:
                best = cost[i, j - 1]
                length = steps[i, j - 1]
            cost[i, j] = abs(a[i - 1] - b[j - 1]) + best
            steps[i, j] = length + 1
    return cost[n, m], steps[n, m]

def dtw(a, b):
    """ Classic DTW with steps (1,0), (0,1), (1,1) and point cost |a_i - b_j|. """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInputException("DTW inputs")
    distance, length = _dtw_kernel(a, b)
    return DtwResult(float(distance), int(length))


def _samples(p):
    return np.asarray(getattr(p, 'samples', p), dtype=float)

def resample_linear(x, n):
    """ Linearly interpolate `x` onto `n` equally spaced points spanning the same interval. """
    x = np.asarray(x, dtype=float)
    if len(x) == n:
        return x.copy()
    return np.interp(np.linspace(0, len(x) - 1, n), np.arange(len(x)), x)

def template(pulses):
    """ Pointwise mean of all pulses after resampling them to the median pulse length. """
    if len(pulses) == 0:
        raise EmptyInputException("pulse list")
    n = int(np.median([len(_samples(p)) for p in pulses]))
    return np.mean([resample_linear(_samples(p), n) for p in pulses], axis=0)

def sqi(pulse, tmpl):
    """ exp(-D/L) from the DTW of the pulse against the template, floored at the smallest positive double. """
    result = dtw(_samples(pulse), tmpl)
    return max(math.exp(-result.distance/result.path_length), np.finfo(float).tiny)

def reject_outliers(pulses, keep_fraction=0.95):
    """ Keep the floor(keep_fraction * n) best pulses (at least one) by SQI.

        Pulses must carry an SQI. Ranking is by SQI descending, ties broken by beat index
        ascending. Returns (kept, rejected), each in ranking order.
    """
    if any(p.sqi is None for p in pulses):
        raise ValueError("every pulse needs an SQI before outlier rejection")
    if len(pulses) == 0:
        return [], []
    ranked = sorted(pulses, key=lambda p: (-p.sqi, p.beat_index))
    n_keep = max(1, int(math.floor(keep_fraction*len(ranked))))
    return ranked[:n_keep], ranked[n_keep:]

def score_pulses(pulses, keep_fraction=0.95):
    """ Score one subject's pulses against their own template and reject outliers.

        Returns (kept, rejected, table) where the table has columns beat_index, sqi, kept,
        ordered by beat index.
    """
    tmpl = template(pulses)
    scored = [p.with_sqi(sqi(p, tmpl)) for p in pulses]
    kept, rejected = reject_outliers(scored, keep_fraction)
    kept_ids = {p.beat_index for p in kept}
    table = pd.DataFrame.from_records(((p.beat_index, p.sqi, p.beat_index in kept_ids) for p in scored),
                                      columns=['beat_index', 'sqi', 'kept']).sort_values('beat_index', ignore_index=True)
    logger.info("kept %d of %d pulses (min kept SQI %.4f)", len(kept), len(scored), min(p.sqi for p in kept))
    return sorted(kept, key=lambda p: p.beat_index), rejected, table
