""" R-wave detection, beat segmentation and the magnitude SCG pulse of each beat.

    The detector follows the Pan-Tompkins structure: band-limit (5-20 Hz), differentiate,
    square, integrate over a 150 ms moving window, then accept candidate peaks above half
    of a running estimate of the signal peak level, with a 250 ms refractory period.
    Each accepted peak is moved onto the largest band-limited ECG sample near it.
"""

import dataclasses
import logging

import numpy as np
import scipy.signal

from .signal_model import ScgPulse

logger = logging.getLogger(__name__)

REFRACTORY_S = 0.25
INTEGRATION_S = 0.15
BAND_HZ = (5.0, 20.0)
NOISE_FLOOR = 1e-12


class NoPeaksException(RuntimeError):
    """ Thrown if no R-peak can be found (flat or degenerate ECG). """
    def __init__(self, detail):
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"no R-peaks detected: {self.detail}"

class SegmentationException(ValueError):
    """ Thrown if the peaks cannot delimit any beat. """
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class RPeakList:
    """ Strictly increasing R-peak sample indices within a record of `source_len` samples. """
    indices: np.ndarray
    source_len: int

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64)
        idx.flags.writeable = False
        object.__setattr__(self, 'indices', idx)
        if np.any(np.diff(idx) <= 0):
            raise SegmentationException("R-peak indices must be strictly increasing")
        if len(idx) and (idx[0] < 0 or idx[-1] > self.source_len):
            raise SegmentationException(f"R-peak indices must lie in [0, {self.source_len}]")

    def __len__(self):
        return len(self.indices)


def _moving_average(x, width):
    return np.convolve(x, np.ones(width)/width, mode='same')

def detect_r_peaks(ecg, fs):
    """ Detect R-peaks in `ecg` sampled at `fs` Hz.

        Requires at least two seconds of signal. Raises NoPeaksException for flat input.
    """
    ecg = np.asarray(ecg, dtype=float)
    if len(ecg) < 2*fs:
        raise NoPeaksException(f"need at least {2*fs:g} samples, got {len(ecg)}")
    if np.var(ecg) < NOISE_FLOOR:
        raise NoPeaksException("ECG variance is below the noise floor")

    sos = scipy.signal.butter(2, BAND_HZ, btype='bandpass', output='sos', fs=fs)
    band = scipy.signal.sosfiltfilt(sos, ecg - np.mean(ecg))
    energy = np.gradient(band)**2
    integrated = _moving_average(energy, max(1, int(round(INTEGRATION_S*fs))))

    refractory = int(round(REFRACTORY_S*fs))
    candidates, props = scipy.signal.find_peaks(integrated, distance=refractory, height=NOISE_FLOOR*np.max(integrated))
    if len(candidates) == 0:
        raise NoPeaksException("no candidate peaks in the integrated energy")

    # Running signal level, seeded from the first two seconds.
    level = np.max(integrated[:int(2*fs)])
    accepted = []
    for c, height in zip(candidates, props['peak_heights']):
        if height > 0.5*level:
            accepted.append(c)
            level = 0.125*height + 0.875*level
    if not accepted:
        raise NoPeaksException("no candidate crossed the adaptive threshold")

    # Snap onto the band-limited ECG maximum within half an integration window.
    half = max(1, int(round(INTEGRATION_S*fs/2)))
    peaks = []
    for c in accepted:
        lo, hi = max(0, c - half), min(len(ecg), c + half + 1)
        p = lo + int(np.argmax(band[lo:hi]))
        if not peaks or p - peaks[-1] >= refractory:
            peaks.append(p)
    logger.info("detected %d R-peaks in %.1f s of ECG", len(peaks), len(ecg)/fs)
    return RPeakList(np.array(peaks), len(ecg))

def heart_rate_bpm(peaks, fs):
    """ Mean heart rate implied by the R-R intervals. """
    rr = np.diff(np.asarray(getattr(peaks, 'indices', peaks)))/fs
    return float(60/np.mean(rr))


def segment_beats(rec, peaks):
    """ Split the three acceleration channels into beats [peak_i, peak_{i+1}).

        Returns a list of (3, n_i) arrays, one per consecutive pair of peaks; their
        concatenation is exactly the span [first peak, last peak).
    """
    idx = np.asarray(getattr(peaks, 'indices', peaks), dtype=np.int64)
    if len(idx) < 2:
        raise SegmentationException(f"need at least two peaks to delimit a beat, got {len(idx)}")
    if np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] > len(rec):
        raise SegmentationException("peaks must be strictly increasing and inside the recording")
    acc = rec.accelerations()
    return [acc[:, a:b] for a, b in zip(idx[:-1], idx[1:])]

def discard_implausible(beats, fs, min_s=0.3, max_s=2.0):
    """ Return (index, beat) pairs for beats lasting between `min_s` and `max_s` seconds. """
    kept = [(i, b) for i, b in enumerate(beats) if min_s <= b.shape[1]/fs <= max_s]
    if len(kept) < len(beats):
        logger.info("discarded %d physiologically implausible beats", len(beats) - len(kept))
    return kept

def magnitude_scg(beat, fs=1000.0, beat_index=0, subject_id=''):
    """ Pointwise Euclidean norm of a (3, n) acceleration window. """
    beat = np.asarray(beat, dtype=float)
    if beat.ndim != 2 or beat.shape[0] != 3:
        raise ValueError(f"a beat must have shape (3, n), got {beat.shape}")
    return ScgPulse(np.sqrt(np.sum(beat**2, axis=0)), fs, beat_index, subject_id)

def gate_recording(rec, peaks=None, subject_id='', min_beat_s=0.3, max_beat_s=2.0):
    """ Detect (or take annotated) R-peaks, segment, drop implausible beats and return the magnitude pulses. """
    fs = rec.sample_rate_hz
    if peaks is None:
        peaks = detect_r_peaks(rec.ecg, fs)
    elif not isinstance(peaks, RPeakList):
        peaks = RPeakList(peaks, len(rec))
    beats = discard_implausible(segment_beats(rec, peaks), fs, min_beat_s, max_beat_s)
    logger.info("subject %s: %d beats at %.1f bpm", subject_id or '?', len(beats), heart_rate_bpm(peaks, fs))
    return [magnitude_scg(b, fs, i, subject_id) for i, b in beats]
