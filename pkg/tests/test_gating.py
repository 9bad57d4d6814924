import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from scgvmax import gating, synth
from scgvmax.config import SynthSpec
from scgvmax.signal_model import AccelRecording


FS = 1000.0

def recording(n, seed=0):
    rng = np.random.default_rng(seed)
    return AccelRecording(FS, *rng.normal(size=(3, n)), np.zeros(n))

def test_impulse_train():
    ecg = np.zeros(10000)
    ecg[500::1000] = 1.0
    peaks = gating.detect_r_peaks(ecg, FS)
    assert len(peaks) == 10
    assert np.all(np.abs(np.diff(peaks.indices) - 1000) <= 5)

def test_detect_75_bpm():
    t = np.arange(int(60*FS))/FS
    ecg = sum(synth.ecg_template(t - (0.4 + 0.8*k)) for k in range(75))
    peaks = gating.detect_r_peaks(ecg, FS)
    assert 74 <= len(peaks) <= 76
    assert gating.heart_rate_bpm(peaks, FS) == pytest.approx(75, rel=0.01)

def test_detect_errors():
    with pytest.raises(gating.NoPeaksException):
        gating.detect_r_peaks(np.zeros(5000), FS)
    with pytest.raises(gating.NoPeaksException) as e_info:
        gating.detect_r_peaks(np.ones(1000), FS)
    assert "2000" in str(e_info.value)

def test_refractory():
    ecg = np.zeros(6000)
    ecg[[1000, 1100, 3000, 5000]] = 1.0
    peaks = gating.detect_r_peaks(ecg, FS)
    assert np.all(np.diff(peaks.indices) >= 250)

def test_peak_list():
    with pytest.raises(gating.SegmentationException):
        gating.RPeakList([5, 5, 10], 100)
    with pytest.raises(gating.SegmentationException):
        gating.RPeakList([5, 200], 100)
    assert gating.heart_rate_bpm([0, 800, 1600], FS) == pytest.approx(75)

def test_segment_beats():
    rec = recording(1200)
    beats = gating.segment_beats(rec, [100, 600, 1100])
    assert [b.shape for b in beats] == [(3, 500), (3, 500)]

    whole = gating.segment_beats(rec, [0, len(rec)])
    assert len(whole) == 1
    assert np.array_equal(whole[0], rec.accelerations())

    rec = recording(6100)
    peaks = np.arange(61)*100
    beats = gating.segment_beats(rec, peaks)
    assert len(beats) == 60
    assert np.array_equal(np.concatenate(beats, axis=1), rec.accelerations()[:, peaks[0]:peaks[-1]])

    with pytest.raises(gating.SegmentationException):
        gating.segment_beats(rec, [100])

def test_magnitude_scg():
    beat = np.array([[3.0, 1.0, 0.0], [4.0, 2.0, 0.0], [0.0, 2.0, 0.0]])
    pulse = gating.magnitude_scg(beat, FS, beat_index=7, subject_id='S1')
    assert np.array_equal(pulse.samples, [5.0, 3.0, 0.0])
    assert pulse.beat_index == 7 and pulse.subject_id == 'S1'
    assert np.array_equal(gating.magnitude_scg(np.zeros((3, 4))).samples, np.zeros(4))
    with pytest.raises(ValueError):
        gating.magnitude_scg(np.zeros((2, 4)))

def test_magnitude_bounds_and_rotation():
    beat = np.random.default_rng(4).normal(size=(3, 500))
    mag = gating.magnitude_scg(beat).samples
    assert np.all(mag >= np.max(np.abs(beat), axis=0))
    assert np.all(mag <= np.sum(np.abs(beat), axis=0) + 1e-15)

    rotation = Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix()
    rotated = gating.magnitude_scg(rotation @ beat).samples
    assert np.allclose(rotated, mag, rtol=1e-12, atol=0)

def test_gate_recording():
    rec = recording(3000, seed=2)
    pulses = gating.gate_recording(rec, peaks=[0, 200, 1000, 1800, 2900], subject_id='S9')
    # The first beat lasts 200 ms and is dropped.
    assert [p.beat_index for p in pulses] == [1, 2, 3]
    assert [len(p.samples) for p in pulses] == [800, 800, 1100]
    assert all(p.subject_id == 'S9' and p.sqi is None for p in pulses)
    assert gating.gate_recording(rec, peaks=[0, 1000, 3000], max_beat_s=1.5)[0].beat_index == 0

def test_detect_synthetic_cohort():
    spec = SynthSpec(n_subjects=20, class_mix=[5, 5, 5, 5], pulses_min=50, pulses_max=50, seed=7)
    total = 0
    for s in synth.generate_subjects(spec):
        detected = gating.detect_r_peaks(s.recording.ecg, FS)
        assert len(detected) == len(s.peaks), s.record.subject_id
        assert np.max(np.abs(detected.indices - s.peaks)) <= 5, s.record.subject_id
        pulses = gating.gate_recording(s.recording, subject_id=s.record.subject_id)
        assert [p.beat_index for p in pulses] == list(range(50))
        total += len(pulses)
    assert total == 1000
