""" Deterministic synthetic cohorts with known V_max and valve class.

    Each beat of a synthetic subject carries two Hann-windowed bursts, standing in for the
    vibrations of the first and second heart sounds. The amplitude ratio of the second
    burst to the first and the delay between them are linear in the subject's V_max, with a
    class-specific delay offset, so the morphology determines the labels. The burst signal
    is projected onto a random fixed direction across the three axes and white noise at the
    requested SNR is added. The ECG is a train of raised-cosine spikes at the R-peaks.

    Per-subject random streams are seeded with splitmix64 of (seed, subject index), so a
    cohort is identical whether subjects are generated in order or in parallel.
"""

import concurrent.futures
import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from .signal_model import AccelRecording, SubjectRecord, ValveClass, Cohort, save_manifest, save_peaks, save_recording

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
ECG_SPIKE_S = 0.04
LEAD_IN_S = 0.5
RR_JITTER = 0.03


def splitmix64(x):
    """ One step of the splitmix64 mixer on a 64-bit integer. """
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30))*0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27))*0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)

def subject_seed(seed, index):
    return splitmix64(splitmix64(seed & MASK64) ^ index)


@dataclasses.dataclass(frozen=True)
class BurstParams:
    """ Morphology of one subject's beats; times are seconds after the R-peak. """
    amp1: float
    amp2: float
    carrier1_hz: float
    carrier2_hz: float
    center1_s: float
    center2_s: float
    width_s: float

    @property
    def ratio(self):
        return self.amp2/self.amp1

    @property
    def delay_s(self):
        return self.center2_s - self.center1_s


def hann_envelope(t, center, width):
    u = (np.asarray(t, dtype=float) - center)/width
    return np.where(np.abs(u) < 0.5, 0.5*(1 + np.cos(2*np.pi*u)), 0.0)

def burst_model(t, params):
    """ Clean SCG beat: the two windowed bursts evaluated at times `t` after the R-peak. """
    t = np.asarray(t, dtype=float)
    first = params.amp1*hann_envelope(t, params.center1_s, params.width_s)*np.sin(2*np.pi*params.carrier1_hz*(t - params.center1_s))
    second = params.amp2*hann_envelope(t, params.center2_s, params.width_s)*np.sin(2*np.pi*params.carrier2_hz*(t - params.center2_s))
    return first + second

def ecg_template(t):
    """ Raised-cosine spike of unit height centred on t = 0. """
    return hann_envelope(t, 0.0, ECG_SPIKE_S)

def burst_params(spec, valve_class, vmax, rng):
    ratio = spec.ratio_intercept + spec.ratio_slope*vmax
    delay = spec.delay_intercept_s + spec.delay_slope_s*vmax + spec.delay_offsets_s[int(valve_class)]
    return BurstParams(1.0, ratio, float(rng.uniform(*spec.carrier1_hz)), float(rng.uniform(*spec.carrier2_hz)),
                       spec.first_burst_s, spec.first_burst_s + delay, spec.burst_width_s)


##############################################
###
### Subjects
###
##############################################


@dataclasses.dataclass(frozen=True, eq=False)
class SyntheticSubject:
    record: SubjectRecord
    recording: AccelRecording
    peaks: np.ndarray
    params: BurstParams
    hr_bpm: float
    axis: np.ndarray
    noise_sd: float


def synth_subject(spec, index, valve_class):
    rng = np.random.default_rng(subject_seed(spec.seed, index))
    fs = spec.sample_rate_hz
    vmax = float(rng.uniform(*spec.vmax_range(valve_class)))
    n_pulses = int(rng.integers(spec.pulses_min, spec.pulses_max + 1))
    hr = float(rng.uniform(spec.hr_min_bpm, spec.hr_max_bpm))
    params = burst_params(spec, valve_class, vmax, rng)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)

    rr = 60/hr*(1 + rng.uniform(-RR_JITTER, RR_JITTER, size=n_pulses))
    peak_times = LEAD_IN_S + np.concatenate([[0.0], np.cumsum(rr)])
    peaks = np.round(peak_times*fs).astype(np.int64)
    n = int(peaks[-1] + round(LEAD_IN_S*fs))

    scg = np.zeros(n)
    for a, b in zip(peaks[:-1], peaks[1:]):
        scg[a:b] = burst_model(np.arange(b - a)/fs, params)
    t = np.arange(n)/fs
    ecg = np.zeros(n)
    for p in peaks:
        lo, hi = max(0, p - int(ECG_SPIKE_S*fs)), min(n, p + int(ECG_SPIKE_S*fs) + 1)
        ecg[lo:hi] += ecg_template(t[lo:hi] - p/fs)

    acc = axis[:, None]*scg[None, :]
    if math.isinf(spec.snr_db):
        noise_sd = 0.0
    else:
        power = np.mean(scg**2)
        noise_sd = math.sqrt(power/(3*10**(spec.snr_db/10)))
        acc = acc + rng.normal(scale=noise_sd, size=acc.shape)

    subject_id = f"S{index + 1:03d}"
    record = SubjectRecord(subject_id, weight_kg=round(float(rng.uniform(55, 100)), 1),
                           height_cm=round(float(rng.uniform(150, 195)), 1), age_years=float(rng.integers(20, 81)),
                           sex=int(rng.integers(0, 2)), valve_class=valve_class, vmax_ms=vmax)
    recording = AccelRecording(fs, acc[0], acc[1], acc[2], ecg)
    return SyntheticSubject(record, recording, peaks, params, hr, axis, noise_sd)

def class_assignment(spec):
    """ Valve class per subject index: the mix shuffled with the spec seed. """
    classes = np.repeat([int(c) for c in ValveClass], spec.class_mix)
    rng = np.random.default_rng(splitmix64(spec.seed & MASK64))
    return [ValveClass(int(c)) for c in rng.permutation(classes)]


##############################################
###
### Cohorts on disk
###
##############################################


def params_frame(subjects, spec):
    def _internal_generator():
        for s in subjects:
            p = s.params
            yield (s.record.subject_id, s.record.valve_class.name, s.record.vmax_ms, s.hr_bpm, len(s.peaks) - 1,
                   p.carrier1_hz, p.carrier2_hz, p.amp1, p.amp2, p.ratio, p.center1_s, p.center2_s, p.delay_s,
                   p.width_s, *s.axis, s.noise_sd, spec.ratio_intercept, spec.ratio_slope, spec.delay_intercept_s,
                   spec.delay_slope_s, spec.delay_offsets_s[int(s.record.valve_class)])
    return pd.DataFrame.from_records(_internal_generator(), columns=[
        'subject_id', 'valve_class', 'vmax_ms', 'hr_bpm', 'n_pulses', 'carrier1_hz', 'carrier2_hz', 'amp1', 'amp2',
        'ratio', 'center1_s', 'center2_s', 'delay_s', 'width_s', 'axis_x', 'axis_y', 'axis_z', 'noise_sd',
        'ratio_intercept', 'ratio_slope', 'delay_intercept_s', 'delay_slope_s', 'delay_offset_s'])

def generate_subjects(spec, workers=1):
    classes = class_assignment(spec)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: synth_subject(spec, i, classes[i]), range(spec.n_subjects)))

def generate_cohort(spec, out_dir, workers=1):
    """ Generate the cohort and write it under `out_dir`.

        Files: recordings/<id>.csv, recordings/<id>_peaks.csv, manifest.csv (recording paths
        relative to it) and synth_params.csv. Returns the Cohort read back from the manifest
        fields, without pulses.
    """
    out_dir = Path(out_dir)
    rec_dir = out_dir / 'recordings'
    rec_dir.mkdir(parents=True, exist_ok=True)
    subjects = generate_subjects(spec, workers)
    paths = {}
    for s in subjects:
        sid = s.record.subject_id
        save_recording(s.recording, rec_dir / f"{sid}.csv")
        save_peaks(s.peaks, rec_dir / f"{sid}_peaks.csv")
        paths[sid] = Path('recordings') / f"{sid}.csv"
    records = [dataclasses.replace(s.record, recording_path=out_dir / paths[s.record.subject_id]) for s in subjects]
    save_manifest(records, out_dir / 'manifest.csv', recording_paths=paths)
    params_frame(subjects, spec).to_csv(out_dir / 'synth_params.csv', index=False, float_format='%.17g')
    logger.info("synthesised %d subjects (%d beats) in %s", len(subjects), sum(len(s.peaks) - 1 for s in subjects), out_dir)
    return Cohort(records)

def peaks_path(recording_path):
    """ The annotation file written next to a synthetic recording. """
    p = Path(recording_path)
    return p.with_name(f"{p.stem}_peaks.csv")
