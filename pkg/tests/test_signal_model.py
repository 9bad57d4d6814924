import numpy as np
import pytest

from scgvmax import signal_model
from scgvmax.signal_model import (AccelRecording, Cohort, ScalogramImage, ScgPulse, SubjectRecord, ValveClass)


def write_lines(path, lines):
    path.write_text('\n'.join(lines) + '\n')
    return path

def test_load_recording(tmp_path):
    rows = [f"{i/1000},{i},{2*i},{3*i},{-i}" for i in range(5)]
    rec = signal_model.load_recording(write_lines(tmp_path / 'r.csv', ['sample_rate_hz=1000'] + rows))
    assert len(rec) == 5
    assert rec.sample_rate_hz == 1000
    assert np.array_equal(rec.acc_y, [0, 2, 4, 6, 8])
    assert np.array_equal(rec.ecg, [0, -1, -2, -3, -4])
    assert rec.accelerations().shape == (3, 5)

def test_load_recording_errors(tmp_path):
    good = ["0,1,2,3,4", "0.001,1,2,3,4"]
    with pytest.raises(signal_model.MalformedHeaderException):
        signal_model.load_recording(write_lines(tmp_path / 'a.csv', ['fs=1000'] + good))
    with pytest.raises(signal_model.RaggedRowException) as e_info:
        signal_model.load_recording(write_lines(tmp_path / 'b.csv', ['sample_rate_hz=1000', good[0], "0.001,1,2,3"]))
    assert e_info.value.line == 3
    with pytest.raises(signal_model.NonFiniteSampleException):
        signal_model.load_recording(write_lines(tmp_path / 'c.csv', ['sample_rate_hz=1000', good[0], "0.001,nan,2,3,4"]))
    with pytest.raises(signal_model.InvalidSampleRateException):
        signal_model.load_recording(write_lines(tmp_path / 'd.csv', ['sample_rate_hz=0'] + good))

    # All four are distinct, and all are recording format errors.
    kinds = {signal_model.MalformedHeaderException, signal_model.RaggedRowException,
             signal_model.NonFiniteSampleException, signal_model.InvalidSampleRateException}
    assert len(kinds) == 4
    assert all(issubclass(k, signal_model.RecordingFormatException) for k in kinds)

def test_recording_save_load(tmp_path):
    rng = np.random.default_rng(1)
    rec = AccelRecording(1000.0, *rng.normal(size=(4, 300)))
    signal_model.save_recording(rec, tmp_path / 'r.csv')
    back = signal_model.load_recording(tmp_path / 'r.csv')
    assert back.sample_rate_hz == rec.sample_rate_hz
    assert np.array_equal(back.accelerations(), rec.accelerations())
    assert np.array_equal(back.ecg, rec.ecg)

def test_recording_invariants():
    with pytest.raises(ValueError):
        AccelRecording(1000, [1, 2, 3], [1, 2], [1, 2, 3], [1, 2, 3])
    rec = AccelRecording(1000, [3, 1], [4, 2], [0, 2], [0, 0])
    assert np.array_equal(rec.magnitude(), [5, 3])
    with pytest.raises(ValueError):
        rec.acc_x[0] = 1

def test_pulse_invariants():
    with pytest.raises(ValueError):
        ScgPulse([1.0], 1000, 0)
    with pytest.raises(ValueError):
        ScgPulse([1.0, -1.0], 1000, 0)
    with pytest.raises(ValueError):
        ScgPulse([1.0, 1.0], 1000, 0, sqi=0.0)
    p = ScgPulse([1.0, 2.0], 1000, 3).with_sqi(0.5)
    assert p.sqi == 0.5 and p.beat_index == 3

def test_scalogram_image_format(tmp_path):
    rng = np.random.default_rng(2)
    img = ScalogramImage(rng.random((4, 4)).astype(np.float32))
    signal_model.save_scalogram_image(img, tmp_path / 'a.scgi')
    back = signal_model.load_scalogram_image(tmp_path / 'a.scgi')
    assert np.array_equal(back.pixels, img.pixels)

    signal_model.save_scalogram_image(ScalogramImage(np.zeros((256, 256))), tmp_path / 'b.scgi')
    assert (tmp_path / 'b.scgi').stat().st_size == 4 + 8 + 256*256*4

    (tmp_path / 'c.scgi').write_bytes(b'XXXX' + (tmp_path / 'a.scgi').read_bytes()[4:])
    with pytest.raises(signal_model.ImageFormatException):
        signal_model.load_scalogram_image(tmp_path / 'c.scgi')

    (tmp_path / 'd.scgi').write_bytes((tmp_path / 'a.scgi').read_bytes()[:-4])
    with pytest.raises(signal_model.ImageFormatException):
        signal_model.load_scalogram_image(tmp_path / 'd.scgi')

def test_pulse_tables(tmp_path):
    pulses = [ScgPulse([1.0, 2.0, 3.0], 1000, 0, 'S1', 0.9), ScgPulse([0.5, 0.25], 1000, 4, 'S1')]
    signal_model.save_pulses(pulses, tmp_path / 'p.csv')
    back = signal_model.load_pulses(tmp_path / 'p.csv')
    assert [p.beat_index for p in back] == [0, 4]
    assert back[0].sqi == 0.9 and back[1].sqi is None
    assert np.array_equal(back[1].samples, [0.5, 0.25])
    assert back[0].subject_id == 'S1'

def test_valve_class():
    assert ValveClass.parse('bav') == ValveClass.BAV
    assert ValveClass.parse(2) == ValveClass.MAV
    assert [int(c) for c in ValveClass] == [0, 1, 2, 3]
    with pytest.raises(signal_model.CohortException):
        ValveClass.parse('XYZ')
    with pytest.raises(signal_model.CohortException):
        ValveClass.parse(7)

def subject(sid, vmax=1.2, cls='TAV'):
    return SubjectRecord(sid, 70.0, 175.0, 40.0, 1, cls, vmax)

def test_cohort():
    with pytest.raises(signal_model.CohortException):
        Cohort([subject('A'), subject('A')])
    with pytest.raises(signal_model.CohortException):
        subject('A', vmax=0.0)
    with pytest.raises(signal_model.CohortException):
        SubjectRecord('A', 70.0, 175.0, 40.0, 2, 'TAV', 1.0)
    c = Cohort([subject('A').with_pulses([ScgPulse([1.0, 1.0], 1000, 0, 'A')]), subject('B')])
    assert c.pulse_counts() == {'A': 1, 'B': 0}
    assert c['B'].subject_id == 'B'

def test_manifest(tmp_path):
    subjects = [subject('S01', 1.1, 'TAV'), subject('S02', 3.3, 'AS')]
    signal_model.save_manifest(subjects, tmp_path / 'manifest.csv', {'S01': 'rec/S01.csv', 'S02': 'rec/S02.csv'})
    cohort = signal_model.load_cohort(tmp_path / 'manifest.csv')
    assert cohort.subject_ids == ['S01', 'S02']
    assert cohort['S02'].valve_class == ValveClass.AS
    assert cohort['S02'].vmax_ms == 3.3
    assert cohort['S01'].recording_path == (tmp_path / 'rec' / 'S01.csv').resolve()

    (tmp_path / 'dup.csv').write_text((tmp_path / 'manifest.csv').read_text().replace('S02', 'S01'))
    with pytest.raises(signal_model.CohortException):
        signal_model.load_cohort(tmp_path / 'dup.csv')

def random_rows(rng, n):
    values = rng.normal(scale=rng.uniform(0.1, 100), size=(n, 5))
    return values, [','.join(repr(float(v)) for v in row) for row in values]

def test_random_valid_recordings(tmp_path):
    rng = np.random.default_rng(5)
    for i in range(100):
        rate = float(rng.choice([100.0, 250.0, 500.0, 1000.0, 1234.5]))
        values, rows = random_rows(rng, int(rng.integers(2, 200)))
        rec = signal_model.load_recording(write_lines(tmp_path / f"{i}.csv", [f"sample_rate_hz={rate!r}"] + rows))
        assert rec.sample_rate_hz == rate and len(rec) == len(values)
        assert np.array_equal(rec.accelerations(), values[:, 1:4].T)
        assert np.array_equal(rec.ecg, values[:, 4])

def test_random_invalid_recordings(tmp_path):
    rng = np.random.default_rng(6)
    corruptions = ['ragged', 'nan', 'inf', 'text', 'header', 'rate']
    for i in range(120):
        kind = corruptions[i % len(corruptions)]
        _, rows = random_rows(rng, int(rng.integers(2, 50)))
        header = 'sample_rate_hz=1000'
        k = int(rng.integers(0, len(rows)))
        fields = rows[k].split(',')
        col = int(rng.integers(0, 5))
        if kind == 'ragged':
            rows[k] = ','.join(fields[:int(rng.integers(1, 5))] if rng.random() < 0.5 else fields + ['0'])
            expected = signal_model.RaggedRowException
        elif kind in ('nan', 'inf'):
            fields[col] = kind if rng.random() < 0.5 else f"-{kind}"
            rows[k] = ','.join(fields)
            expected = signal_model.NonFiniteSampleException
        elif kind == 'text':
            fields[col] = 'x1'
            rows[k] = ','.join(fields)
            expected = signal_model.RecordingFormatException
        elif kind == 'header':
            header = str(rng.choice(['fs=1000', 'sample_rate_hz 1000', 'sample_rate_hz=fast', '']))
            expected = signal_model.MalformedHeaderException
        else:
            header = f"sample_rate_hz={rng.choice(['0', '-250', 'inf', 'nan'])}"
            expected = signal_model.InvalidSampleRateException
        with pytest.raises(signal_model.RecordingFormatException) as e_info:
            signal_model.load_recording(write_lines(tmp_path / f"{i}.csv", [header] + rows))
        assert type(e_info.value) is expected, kind
        if kind in ('ragged', 'nan', 'inf'):
            assert e_info.value.line == k + 2
