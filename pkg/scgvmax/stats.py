""" Evaluation statistics for V_max regression and valve classification.

    Correlation and least-squares fits, Bland-Altman agreement with a one-sample t-test on
    the differences, one-vs-rest ROC curves and confusion matrices with precision and recall.
"""

import dataclasses
import logging
import math

import numpy as np
import pandas as pd
import scipy.special
import scipy.stats
from sklearn import metrics

logger = logging.getLogger(__name__)

LOA_FACTOR = 1.96
ALPHA = 0.05


class UndefinedCorrelationException(ValueError):
    """ Thrown if a correlation is requested for constant or too-short data. """
    def __init__(self, detail):
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"correlation is undefined: {self.detail}"

class SingleClassException(ValueError):
    pass


def _pair(x, y, minimum):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need two sequences of equal length, got shapes {x.shape} and {y.shape}")
    if len(x) < minimum:
        raise ValueError(f"need at least {minimum} pairs, got {len(x)}")
    return x, y


##############################################
###
### Correlation and regression
###
##############################################


@dataclasses.dataclass(frozen=True)
class PearsonResult:
    r: float
    p: float


def pearson(x, y):
    """ Product-moment correlation and its two-sided p-value. """
    if len(x) < 3:
        raise UndefinedCorrelationException(f"need at least 3 pairs, got {len(x)}")
    x, y = _pair(x, y, 3)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationException("one of the variables is constant")
    result = scipy.stats.pearsonr(x, y)
    return PearsonResult(float(np.clip(result.statistic, -1, 1)), float(result.pvalue))

def fit_through_origin(x, y):
    """ Least-squares slope of y = a x, i.e. Σxy / Σx². """
    x, y = _pair(x, y, 1)
    sxx = np.dot(x, x)
    if sxx == 0:
        raise ValueError("all x values are zero; the slope through the origin is undefined")
    return float(np.dot(x, y)/sxx)

def fit_with_intercept(x, y):
    """ Ordinary least squares y = a x + b; returns (a, b). """
    x, y = _pair(x, y, 2)
    if np.ptp(x) == 0:
        raise ValueError("x is constant; the slope is undefined")
    fit = scipy.stats.linregress(x, y)
    return float(fit.slope), float(fit.intercept)

def error_metrics(pred, true):
    """ Mean absolute percentage error, mean squared error and its root. """
    pred, true = _pair(pred, true, 1)
    err = pred - true
    mse = float(np.mean(err**2))
    return {'mpe': float(np.mean(100*np.abs(err)/true)), 'mse': mse, 'rmse': math.sqrt(mse)}


##############################################
###
### Bland-Altman
###
##############################################


def student_t_sf(t, df):
    """ Two-sided tail probability P(|T| >= |t|) of Student's t with `df` degrees of freedom.

        Uses the identity P = I_{df/(df+t²)}(df/2, 1/2) with the regularised incomplete beta.
    """
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    return float(scipy.special.betainc(df/2, 0.5, df/(df + t*t)))


@dataclasses.dataclass(frozen=True)
class BlandAltmanReport:
    bias: float
    sd: float
    loa: float
    t_statistic: float
    p_value: float
    n: int

    @property
    def fixed_bias(self):
        return self.p_value < ALPHA

    @property
    def limits(self):
        return self.bias - self.loa, self.bias + self.loa


def bland_altman(a, b):
    """ Agreement of two measurements of the same quantity.

        With d = a - b: bias = mean(d), sd the sample standard deviation, loa = 1.96 sd and a
        one-sample t-test of the bias against zero (n-1 degrees of freedom). When all
        differences are equal the t statistic is infinite, or zero for a zero bias, and the
        p-value is 0, or 1 respectively.
    """
    a, b = _pair(a, b, 2)
    d = a - b
    n = len(d)
    bias = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        t = 0.0 if bias == 0 else math.copysign(math.inf, bias)
    else:
        t = bias/(sd/math.sqrt(n))
    p = student_t_sf(t, n - 1)
    return BlandAltmanReport(bias, sd, LOA_FACTOR*sd, t, p, n)

def bland_altman_points(a, b):
    """ Per-pair means and differences, the coordinates of a Bland-Altman plot. """
    a, b = _pair(a, b, 1)
    return pd.DataFrame({'mean': (a + b)/2, 'difference': a - b})


##############################################
###
### ROC curves
###
##############################################


@dataclasses.dataclass(frozen=True, eq=False)
class RocCurve:
    """ Operating points at every distinct score, from (0,0) at +inf to (1,1) at the lowest score. """
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_frame(self):
        return pd.DataFrame({'threshold': self.thresholds, 'fpr': self.fpr, 'tpr': self.tpr})


def roc_auc(scores, labels):
    """ ROC curve of `scores` against binary `labels` and its trapezoidal area.

        Tied scores form a single operating point, so the area equals the Mann-Whitney
        statistic with ties counted one half.
    """
    scores, labels = _pair(scores, labels, 2)
    labels = labels.astype(int)
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 or 1")
    if labels.min() == labels.max():
        raise SingleClassException("ROC needs both positive and negative samples")
    fpr, tpr, thresholds = metrics.roc_curve(labels, scores, drop_intermediate=False)
    thresholds[0] = np.inf
    return RocCurve(thresholds, fpr, tpr, float(metrics.auc(fpr, tpr)))

def one_vs_rest(probs, true_classes, n_classes=4):
    """ One ROC curve per class, scoring each class by its own probability column. """
    probs = np.asarray(probs, dtype=float)
    true_classes = np.asarray(true_classes, dtype=int)
    return [roc_auc(probs[:, k], (true_classes == k).astype(int)) for k in range(n_classes)]

def mean_roc(curves, grid=None):
    """ Mean and sample SD of the TPR across curves on a common FPR grid. """
    grid = np.linspace(0, 1, 101) if grid is None else np.asarray(grid, dtype=float)
    tprs = np.array([np.interp(grid, c.fpr, c.tpr) for c in curves])
    sd = tprs.std(axis=0, ddof=1) if len(curves) > 1 else np.zeros_like(grid)
    return pd.DataFrame({'fpr': grid, 'tpr_mean': tprs.mean(axis=0), 'tpr_sd': sd})


##############################################
###
### Confusion matrices
###
##############################################


@dataclasses.dataclass(frozen=True, eq=False)
class ConfusionReport:
    """ Rows are the true class, columns the predicted class. Undefined ratios are NaN. """
    matrix: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    @property
    def accuracy(self):
        return float(np.trace(self.matrix)/self.matrix.sum())


def confusion(pred_classes, true_classes, n_classes=4):
    pred, true = _pair(pred_classes, true_classes, 1)
    pred, true = pred.astype(int), true.astype(int)
    if np.any((pred < 0) | (pred >= n_classes)) or np.any((true < 0) | (true >= n_classes)):
        raise ValueError(f"class indices must lie in [0, {n_classes})")
    matrix = metrics.confusion_matrix(true, pred, labels=list(range(n_classes)))
    tp = np.diag(matrix).astype(float)
    with np.errstate(invalid='ignore', divide='ignore'):
        precision = np.where(matrix.sum(axis=0) > 0, tp/matrix.sum(axis=0), np.nan)
        recall = np.where(matrix.sum(axis=1) > 0, tp/matrix.sum(axis=1), np.nan)
    return ConfusionReport(matrix, precision, recall)
