""" Conditioning of the acceleration channels: elliptic high-pass, Blackman boundary taper
    and sym4 wavelet denoising with FDR hard thresholds.
"""

import dataclasses
import logging
import math
import warnings

import numpy as np
import pywt
import scipy.signal
import scipy.stats

logger = logging.getLogger(__name__)


class FilterDesignException(ValueError):
    """ Thrown if a high-pass specification cannot be realised. """
    def __init__(self, spec, detail):
        self.spec = spec
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"infeasible high-pass {self.spec}: {self.detail}"

class ShortSignalException(ValueError):
    """ Thrown if a signal is too short for the requested operation. """
    def __init__(self, length, required, operation):
        self.length = length
        self.required = required
        self.operation = operation
        super().__init__()

    def __str__(self):
        return f"{self.operation} needs more than {self.required} samples, got {self.length}"

class TaperTooLongException(ValueError):
    def __init__(self, taper_len, length):
        self.taper_len = taper_len
        self.length = length
        super().__init__()

    def __str__(self):
        return f"taper of {self.taper_len} samples per side does not fit a signal of {self.length} samples"


@dataclasses.dataclass(frozen=True)
class HighpassSpec:
    """ Edges in Hz, attenuation and ripple in dB. """
    sample_rate_hz: float = 1000.0
    stopband_hz: float = 8.4
    passband_hz: float = 10.0
    stopband_atten_db: float = 60.0
    passband_ripple_db: float = 0.1

    def validate(self):
        nyquist = self.sample_rate_hz/2
        if not 0 < self.stopband_hz < self.passband_hz < nyquist:
            raise FilterDesignException(self, f"need 0 < stopband < passband < Nyquist ({nyquist} Hz)")
        if not (self.stopband_atten_db > 0 and self.passband_ripple_db > 0):
            raise FilterDesignException(self, "attenuation and ripple must be positive")
        if self.passband_ripple_db >= self.stopband_atten_db:
            raise FilterDesignException(self, "ripple must be smaller than the stop-band attenuation")


@dataclasses.dataclass(frozen=True, eq=False)
class FilterRealization:
    """ A cascade of second-order sections; rows are [b0, b1, b2, 1, a1, a2]. """
    sos: np.ndarray
    order: int
    spec: HighpassSpec

    @property
    def gain(self):
        """ Overall gain, the product of the leading numerator coefficients. """
        return float(np.prod(self.sos[:, 0]))

    def poles(self):
        return np.concatenate([np.roots(section[3:]) for section in self.sos])

    def is_stable(self):
        return bool(np.all(np.abs(self.poles()) < 1))


@dataclasses.dataclass(frozen=True)
class DenoiseConfig:
    wavelet: str = 'sym4'
    fdr_q: float = 0.05
    mode: str = 'symmetric'
    min_coarse_len: int = 8

    def __post_init__(self):
        if not 0 < self.fdr_q < 1:
            raise ValueError(f"fdr_q must lie in (0,1), got {self.fdr_q}")


@dataclasses.dataclass(frozen=True)
class ConditioningConfig:
    highpass: HighpassSpec = HighpassSpec()
    taper_frac: float = 0.01
    min_taper: int = 8
    denoise: bool = True
    denoise_cfg: DenoiseConfig = DenoiseConfig()


##############################################
###
### High-pass filtering
###
##############################################


def design_highpass(spec):
    """ Design the minimum-order elliptic high-pass meeting `spec`.

        The order comes from `scipy.signal.ellipord`; the realisation is the bilinear
        (prewarped) transform of the analogue elliptic prototype, returned as second-order sections.
    """
    spec.validate()
    fs = spec.sample_rate_hz
    order, wn = scipy.signal.ellipord(spec.passband_hz, spec.stopband_hz, spec.passband_ripple_db,
                                      spec.stopband_atten_db, fs=fs)
    # An even order has no zero at DC: |H(0)| equals the stop-band floor, not 0.
    sos = scipy.signal.ellip(order, spec.passband_ripple_db, spec.stopband_atten_db, wn,
                             btype='highpass', output='sos', fs=fs)
    filt = FilterRealization(sos, int(order), spec)
    if not filt.is_stable():
        raise FilterDesignException(spec, "design produced poles on or outside the unit circle")
    logger.debug("elliptic high-pass of order %d, %d sections", order, len(sos))
    return filt

def frequency_response(filt, freqs_hz):
    """ Single-pass magnitude response in dB at `freqs_hz`. """
    _, h = scipy.signal.sosfreqz(filt.sos, worN=np.asarray(freqs_hz, dtype=float), fs=filt.spec.sample_rate_hz)
    with np.errstate(divide='ignore'):
        return 20*np.log10(np.abs(h))

def meets_spec(filt, n_check=1024):
    """ Check the single-pass response at `n_check` log-spaced frequencies on each side of the transition band. """
    spec = filt.spec
    nyquist = spec.sample_rate_hz/2
    stop = np.geomspace(spec.stopband_hz/100, spec.stopband_hz, n_check)
    pass_ = np.geomspace(spec.passband_hz, nyquist, n_check)
    stop_ok = np.all(frequency_response(filt, stop) <= -spec.stopband_atten_db + 1e-9)
    pass_db = frequency_response(filt, pass_)
    pass_ok = np.all((pass_db >= -spec.passband_ripple_db - 1e-9) & (pass_db <= 1e-9))
    return bool(stop_ok and pass_ok)

def apply_filter(filt, x):
    """ Zero-phase (forward-backward) application of `filt`; output has the length of `x`. """
    x = np.asarray(x, dtype=float)
    try:
        return scipy.signal.sosfiltfilt(filt.sos, x)
    except ValueError:
        padlen = 3*(2*len(filt.sos) + 1)
        raise ShortSignalException(len(x), padlen, "zero-phase filtering")


##############################################
###
### Boundary taper
###
##############################################


def default_taper_len(n, frac=0.01, minimum=8):
    """ `frac` of the signal per side, at least `minimum`, never more than half the signal. """
    return min(n//2, max(minimum, int(frac*n)))

def taper_boundaries(x, taper_len):
    """ Multiply the first and last `taper_len` samples by the halves of a Blackman window of length 2*`taper_len`. """
    x = np.array(x, dtype=float)
    if taper_len < 0 or 2*taper_len > len(x):
        raise TaperTooLongException(taper_len, len(x))
    if taper_len == 0:
        return x
    w = np.blackman(2*taper_len)
    x[:taper_len] *= w[:taper_len]
    x[len(x) - taper_len:] *= w[taper_len:]
    return x


##############################################
###
### Wavelet denoising
###
##############################################


def decomposition_levels(n, cfg=DenoiseConfig()):
    """ floor(log2 n), reduced until the coarsest approximation keeps `min_coarse_len` samples (at least one level). """
    filter_len = pywt.Wavelet(cfg.wavelet).dec_len
    levels = int(math.floor(math.log2(n)))

    def coarse_len(levels):
        length = n
        for _ in range(levels):
            length = pywt.dwt_coeff_len(length, filter_len, cfg.mode)
        return length

    full = levels
    while levels > 1 and coarse_len(levels) < cfg.min_coarse_len:
        levels -= 1
    if levels < full:
        logger.debug("DWT capped at %d of %d levels for %d samples", levels, full, n)
    return max(levels, 1)

def decompose(x, cfg=DenoiseConfig()):
    """ Multilevel DWT, [cA_L, cD_L, ..., cD_1]. """
    x = np.asarray(x, dtype=float)
    if len(x) < 8:
        raise ShortSignalException(len(x), 7, "wavelet decomposition")
    with warnings.catch_warnings():
        # pywt warns once the level passes its boundary-free maximum.
        warnings.simplefilter('ignore', UserWarning)
        return pywt.wavedec(x, cfg.wavelet, mode=cfg.mode, level=decomposition_levels(len(x), cfg))

def reconstruct(coeffs, n, cfg=DenoiseConfig()):
    return pywt.waverec(coeffs, cfg.wavelet, mode=cfg.mode)[:n]

def fdr_threshold(detail, q=0.05):
    """ False discovery rate threshold for one detail level.

        Noise is estimated as median(|d|)/0.6745. Coefficients are tested as two-sided normal
        p-values; the threshold is the smallest magnitude among the k most significant
        coefficients, k being the largest rank with p_(k) <= k q / m. Returns inf when nothing
        is significant and 0 when the level is noise-free.
    """
    d = np.abs(np.asarray(detail, dtype=float))
    sigma = np.median(d)/0.6745
    if sigma == 0:
        return 0.0
    order = np.argsort(-d)
    p = 2*scipy.stats.norm.sf(d[order]/sigma)
    m = len(d)
    significant = np.nonzero(p <= q*np.arange(1, m + 1)/m)[0]
    if len(significant) == 0:
        return math.inf
    return float(d[order][significant[-1]])

def fdr_thresholds(details, q=0.05):
    return [fdr_threshold(d, q) for d in details]

def hard_threshold(coeffs, thresholds):
    """ Zero every coefficient whose magnitude is below its level threshold. """
    return [pywt.threshold(c, t, mode='hard') if math.isfinite(t) else np.zeros_like(c)
            for c, t in zip(coeffs, thresholds)]

def wavelet_denoise(x, cfg=DenoiseConfig()):
    """ sym4 decomposition, level-dependent FDR hard thresholds on the details, reconstruction. """
    x = np.asarray(x, dtype=float)
    coeffs = decompose(x, cfg)
    thresholds = fdr_thresholds(coeffs[1:], cfg.fdr_q)
    logger.debug("denoise: %d levels, thresholds %s", len(coeffs) - 1, thresholds)
    return reconstruct([coeffs[0]] + hard_threshold(coeffs[1:], thresholds), len(x), cfg)

def snr_db(clean, noisy):
    clean = np.asarray(clean, dtype=float)
    noise = np.asarray(noisy, dtype=float) - clean
    return 10*math.log10(np.sum(clean**2)/np.sum(noise**2))


##############################################
###
### Whole recordings
###
##############################################


def condition_channel(x, filt, cfg=ConditioningConfig()):
    y = apply_filter(filt, x)
    y = taper_boundaries(y, default_taper_len(len(y), cfg.taper_frac, cfg.min_taper))
    if cfg.denoise:
        y = wavelet_denoise(y, cfg.denoise_cfg)
    return y

def condition_recording(rec, cfg=ConditioningConfig()):
    """ High-pass, taper and (optionally) denoise each acceleration channel; the ECG is passed through. """
    spec = dataclasses.replace(cfg.highpass, sample_rate_hz=rec.sample_rate_hz)
    filt = design_highpass(spec)
    channels = [condition_channel(c, filt, cfg) for c in rec.accelerations()]
    logger.info("conditioned %d samples (order %d high-pass, denoise=%s)", len(rec), filt.order, cfg.denoise)
    return rec.replace(acc_x=channels[0], acc_y=channels[1], acc_z=channels[2])
