""" Time-frequency images of SCG pulses.

    A continuous wavelet transform is computed with a bank of analytic generalised Morse
    wavelets, Ψ(ω) ∝ ω^β exp(-ω^γ) for ω > 0 and zero otherwise, at 48 voices per octave.
    Every passband has peak magnitude 2 on the FFT grid, and the highest-frequency filter
    is placed so that its magnitude falls to half the peak (i.e. to 1) at the Nyquist
    frequency. The lowest
    filter is the one whose wavelet still fits two time-domain standard deviations into
    the signal. Scalograms (|CWT|) are resampled to fixed-size images with Keys' bicubic
    convolution kernel.
"""

import dataclasses
import functools
import logging
import math
import warnings

import numpy as np
import scipy.fft
import scipy.optimize
from mpmath import mp

from .signal_model import Scalogram, ScalogramImage

logger = logging.getLogger(__name__)

STANDARD_IMAGE_SIZE = 256
KEYS_A = -0.5


class ImageSizeDeviationWarning(UserWarning):
    """ Issued when images are not the standard 256x256 raster. """
    pass

class InsufficientLengthException(ValueError):
    """ Thrown if a signal is too short to hold a filter bank spanning one octave. """
    def __init__(self, signal_len, detail):
        self.signal_len = signal_len
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"signal of {self.signal_len} samples is too short: {self.detail}"

class LengthMismatchException(ValueError):
    def __init__(self, pulse_len, bank_len):
        self.pulse_len = pulse_len
        self.bank_len = bank_len
        super().__init__()

    def __str__(self):
        return f"pulse has {self.pulse_len} samples but the filter bank was built for {self.bank_len}"

class DegenerateSourceException(ValueError):
    pass


##############################################
###
### Morse wavelets
###
##############################################


def morse_peak_frequency(gamma=3, beta=20):
    """ Peak angular frequency (β/γ)^(1/γ), the root of d/dω (β ln ω - ω^γ). """
    return (beta/gamma)**(1/gamma)

@functools.cache
def morse_time_spread(gamma=3, beta=20):
    """ Time-domain standard deviation of the unit-scale wavelet.

        For a real, positive-frequency Ψ the wavelet is centred at t = 0, so the
        variance is ∫|Ψ'|² dω / ∫|Ψ|² dω.
    """
    psi2 = lambda w: w**(2*beta)*mp.exp(-2*w**gamma)
    dpsi2 = lambda w: (beta/w - gamma*w**(gamma - 1))**2*psi2(w)
    wp = morse_peak_frequency(gamma, beta)
    limits = [0, wp/2, wp, 2*wp, mp.inf]
    return float(mp.sqrt(mp.quad(dpsi2, limits)/mp.quad(psi2, limits)))

def morse_response(scaled_omega, gamma=3, beta=20):
    """ Morse frequency response with peak value 2 at the peak frequency; zero for ω <= 0. """
    w = np.asarray(scaled_omega, dtype=float)
    wp = morse_peak_frequency(gamma, beta)
    out = np.zeros_like(w)
    pos = w > 0
    out[pos] = 2*np.exp(beta*np.log(w[pos]/wp) - w[pos]**gamma + wp**gamma)
    return out

@functools.cache
def _highest_scaled_nyquist(gamma, beta):
    """ Solve Ψ(x) = 1 (half the peak) for x above the peak frequency. """
    wp = mp.mpf(beta)/gamma
    wp = wp**(mp.mpf(1)/gamma)
    f = lambda x: beta*mp.log(x/wp) - x**gamma + wp**gamma + mp.log(2)
    return float(mp.findroot(f, (wp, 10*wp), solver='anderson'))

def smallest_scale(signal_len, gamma=3, beta=20):
    """ Scale s0 of the highest filter for signals of `signal_len` samples.

        Rows are normalised to their peak on the FFT grid, which for short signals is below
        the analytic peak, so s0 is solved on that grid: Ψ(s0 π) is half the sampled peak.
        For long signals s0 tends to x/π with Ψ(x) = 1.
    """
    omega = fft_omega(signal_len)
    def excess(s):
        return float(morse_response(s*np.pi, gamma, beta)/morse_response(s*omega, gamma, beta).max()) - 0.5
    lo = morse_peak_frequency(gamma, beta)/np.pi
    hi = 1.5*_highest_scaled_nyquist(gamma, beta)/np.pi
    return scipy.optimize.brentq(excess, lo, hi, xtol=1e-15, rtol=4*np.finfo(float).eps)


@dataclasses.dataclass(frozen=True, eq=False)
class MorseFilterBank:
    """ Frequency responses (n_scales x signal_len) of a Morse CWT bank, highest frequency first. """
    gamma: float
    beta: float
    voices_per_octave: int
    scales: np.ndarray
    responses: np.ndarray
    center_freqs_hz: np.ndarray
    signal_len: int
    sample_rate_hz: float

    def __len__(self):
        return len(self.scales)

    def omega(self):
        return fft_omega(self.signal_len)


def fft_omega(n):
    """ Angular frequency of each FFT bin, with the Nyquist bin of an even length counted as +π. """
    k = np.arange(n)
    return 2*np.pi*np.where(k <= n//2, k, k - n)/n

@functools.lru_cache(maxsize=64)
def build_filter_bank(signal_len, fs, voices=48, gamma=3, beta=20):
    """ Build the Morse filter bank for signals of `signal_len` samples at `fs` Hz.

        Scales grow geometrically by 2^(1/voices) from the smallest scale s0 (see
        `smallest_scale`), which puts the highest filter at exactly half its peak at the
        Nyquist frequency. The largest scale is N/(2 σ_t) with σ_t the wavelet's time spread.
        The most recent banks are cached, so equal-length pulses share one.
    """
    if signal_len < 16:
        raise InsufficientLengthException(signal_len, "need at least 16 samples")
    s_min = smallest_scale(signal_len, gamma, beta)
    s_max = signal_len/(2*morse_time_spread(gamma, beta))
    octaves = math.log2(s_max/s_min)
    if octaves < 1:
        raise InsufficientLengthException(signal_len, f"the bank would span only {octaves:.2f} octaves")
    n_scales = int(math.floor(voices*octaves)) + 1
    scales = s_min*2.0**(np.arange(n_scales)/voices)
    responses = morse_response(np.outer(scales, fft_omega(signal_len)), gamma, beta)
    # Low-frequency peaks fall between bins; normalise on the sampled grid.
    responses = 2*responses/responses.max(axis=1, keepdims=True)
    centers = morse_peak_frequency(gamma, beta)/(2*np.pi*scales)*fs
    for a in (scales, responses, centers):
        a.flags.writeable = False
    logger.debug("Morse bank: %d scales, %.2f-%.2f Hz, N=%d", n_scales, centers[-1], centers[0], signal_len)
    return MorseFilterBank(gamma, beta, voices, scales, responses, centers, signal_len, fs)

def scale_to_frequency(bank):
    """ f_k = ω_p / (2π s_k) * fs for each scale of the bank. """
    return morse_peak_frequency(bank.gamma, bank.beta)/(2*np.pi*bank.scales)*bank.sample_rate_hz


##############################################
###
### Transform
###
##############################################


def cwt(pulse, bank, pad=False):
    """ Scalogram |CWT| of a pulse (or plain sequence) with a filter bank.

        The pulse must have `bank.signal_len` samples; with `pad` a shorter pulse is
        zero-padded and the result cropped back to the pulse length. The convolution is
        periodic (FFT of the signal length).
    """
    x = np.asarray(getattr(pulse, 'samples', pulse), dtype=float)
    n = len(x)
    if n != bank.signal_len:
        if not pad or n > bank.signal_len:
            raise LengthMismatchException(n, bank.signal_len)
        x = np.concatenate([x, np.zeros(bank.signal_len - n)])
    spectrum = scipy.fft.fft(x)
    coeffs = scipy.fft.ifft(spectrum[None, :]*bank.responses, axis=1)[:, :n]
    return Scalogram(np.abs(coeffs), bank.center_freqs_hz, np.arange(n)/bank.sample_rate_hz)


##############################################
###
### Bicubic resampling
###
##############################################


def keys_kernel(x, a=KEYS_A):
    """ Keys' cubic convolution kernel. """
    x = np.abs(np.asarray(x, dtype=float))
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2)*x[near]**3 - (a + 3)*x[near]**2 + 1
    out[far] = a*x[far]**3 - 5*a*x[far]**2 + 8*a*x[far] - 4*a
    return out

def source_coordinates(n_in, n_out):
    """ Pixel-centre mapping of output samples onto source coordinates. """
    return (np.arange(n_out) + 0.5)*(n_in/n_out) - 0.5

def bicubic_weights(n_in, n_out, a=KEYS_A):
    """ (n_out, n_in) matrix of 4-tap Keys weights; taps beyond the edges are clamped. """
    src = source_coordinates(n_in, n_out)
    base = np.floor(src).astype(np.int64)
    weights = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for offset in (-1, 0, 1, 2):
        taps = base + offset
        np.add.at(weights, (rows, np.clip(taps, 0, n_in - 1)), keys_kernel(src - taps, a))
    return weights

def resize_bicubic(scalogram, out_h=STANDARD_IMAGE_SIZE, out_w=STANDARD_IMAGE_SIZE):
    """ Resample a scalogram (or matrix) to out_h x out_w, rows first then columns. """
    m = np.asarray(getattr(scalogram, 'magnitude', scalogram), dtype=float)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise DegenerateSourceException(f"bicubic resize needs a source of at least 2x2, got {m.shape}")
    pixels = bicubic_weights(m.shape[0], out_h) @ m @ bicubic_weights(m.shape[1], out_w).T
    return ScalogramImage(pixels)


##############################################
###
### Pulses to images
###
##############################################


def pulse_to_image(pulse, size=STANDARD_IMAGE_SIZE, voices=48, gamma=3, beta=20):
    """ cwt with the bank for the pulse's own length, then bicubic resize to size x size. """
    if size != STANDARD_IMAGE_SIZE:
        warnings.warn(f"images are {size}x{size}, not the standard {STANDARD_IMAGE_SIZE}x{STANDARD_IMAGE_SIZE}",
                      ImageSizeDeviationWarning)
    bank = build_filter_bank(len(pulse.samples), pulse.sample_rate_hz, voices, gamma, beta)
    img = resize_bicubic(cwt(pulse, bank), size, size)
    return ScalogramImage(img.pixels, pulse.subject_id, pulse.beat_index)

def export_pgm(img, path):
    """ Write an 8-bit binary PGM scaled to the image's own range; for viewing only. """
    p = np.asarray(img.pixels, dtype=float)
    span = p.max() - p.min()
    scaled = np.zeros_like(p) if span == 0 else (p - p.min())/span
    data = np.round(255*scaled).astype(np.uint8)
    with open(path, 'wb') as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode('ascii'))
        f.write(data.tobytes())
