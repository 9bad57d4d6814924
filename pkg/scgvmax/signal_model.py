""" Core data types of the SCG pipeline and their on-disk formats.

    Recordings, pulses, scalograms and cohort labels live here, together with the
    readers and writers for the plain-file artefacts that pass between stages:

      * recording CSV -- `sample_rate_hz=<float>` header, then rows `t,acc_x,acc_y,acc_z,ecg`;
      * cohort manifest CSV -- one row per subject;
      * pulse table CSV -- long format, one row per sample of every pulse;
      * scalogram image binary -- `SCGI`, u32 LE height, u32 LE width, float32 LE pixels.

    All numerics are double precision; only the image format stores 32-bit floats.
"""

import csv
import dataclasses
import logging
import math
import struct
from enum import IntEnum
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

IMAGE_MAGIC = b'SCGI'
MAX_IMAGE_SIDE = 1 << 16

MANIFEST_COLUMNS = ['subject_id', 'weight_kg', 'height_cm', 'age_years', 'sex', 'valve_class', 'vmax_ms', 'recording_path']
PULSE_COLUMNS = ['subject_id', 'beat_index', 'sample_rate_hz', 'sqi', 'sample', 'value']


class RecordingFormatException(ValueError):
    """ Base class for malformed recording files. """
    def __init__(self, path, detail):
        self.path = path
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"{self.path}: {self.detail}"

class MalformedHeaderException(RecordingFormatException):
    """ Thrown if the first line is not `sample_rate_hz=<float>`. """
    pass

class RaggedRowException(RecordingFormatException):
    """ Thrown if a sample row does not have exactly five fields. """
    def __init__(self, path, line, fields):
        self.line = line
        self.fields = fields
        super().__init__(path, f"line {line} has {fields} fields, expected 5")

class NonFiniteSampleException(RecordingFormatException):
    """ Thrown if a sample is NaN or infinite. """
    def __init__(self, path, line):
        self.line = line
        super().__init__(path, f"non-finite sample on line {line}")

class InvalidSampleRateException(RecordingFormatException):
    """ Thrown if the header sample rate is not strictly positive. """
    def __init__(self, path, rate):
        self.rate = rate
        super().__init__(path, f"sample rate must be positive, got {rate}")

class ImageFormatException(ValueError):
    """ Thrown if a scalogram image file has the wrong magic or impossible dimensions. """
    def __init__(self, path, detail):
        self.path = path
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"{self.path}: {self.detail}"

class CohortException(ValueError):
    """ Thrown if a manifest or cohort violates its invariants (duplicate ids, bad labels). """
    pass


class ValveClass(IntEnum):
    """ Aortic valve condition; the integer codes are the classifier's output indices. """
    TAV = 0
    BAV = 1
    MAV = 2
    AS = 3

    @classmethod
    def parse(cls, value):
        if isinstance(value, ValveClass):
            return value
        try:
            if isinstance(value, (int, np.integer)):
                return cls(int(value))
            return cls[str(value).strip().upper()]
        except (KeyError, ValueError):
            raise CohortException(f"unknown valve class {value!r}; expected one of {[c.name for c in cls]}")


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclasses.dataclass(frozen=True, eq=False)
class AccelRecording:
    """ Three-axis chest acceleration (m/s²) and the simultaneous ECG (mV) on one time base. """
    sample_rate_hz: float
    acc_x: np.ndarray
    acc_y: np.ndarray
    acc_z: np.ndarray
    ecg: np.ndarray

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        for name in ('acc_x', 'acc_y', 'acc_z', 'ecg'):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        lengths = {len(self.acc_x), len(self.acc_y), len(self.acc_z), len(self.ecg)}
        if len(lengths) != 1:
            raise ValueError(f"channel lengths differ: {sorted(lengths)}")
        if len(self.ecg) < 2:
            raise ValueError("a recording needs at least two samples")

    def __len__(self):
        return len(self.ecg)

    @property
    def duration_s(self):
        return len(self) / self.sample_rate_hz

    def accelerations(self):
        """ Return the (3, N) acceleration array. """
        return np.stack([self.acc_x, self.acc_y, self.acc_z])

    def magnitude(self):
        """ Pointwise Euclidean norm of the acceleration vector over the whole record. """
        return np.linalg.norm(self.accelerations(), axis=0)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclasses.dataclass(frozen=True, eq=False)
class ScgPulse:
    """ One magnitude-SCG beat spanning a single R-R interval. """
    samples: np.ndarray
    sample_rate_hz: float
    beat_index: int
    subject_id: str = ''
    sqi: float = None

    def __post_init__(self):
        object.__setattr__(self, 'samples', _frozen(self.samples))
        if len(self.samples) < 2:
            raise ValueError("a pulse needs at least two samples")
        if np.any(self.samples < 0):
            raise ValueError("pulse samples are magnitudes and must be non-negative")
        if self.sqi is not None and not 0 < self.sqi <= 1:
            raise ValueError(f"SQI must lie in (0,1], got {self.sqi}")

    def __len__(self):
        return len(self.samples)

    def with_sqi(self, sqi):
        return dataclasses.replace(self, sqi=float(sqi))


@dataclasses.dataclass(frozen=True, eq=False)
class Scalogram:
    """ |CWT| magnitudes, rows indexed by frequency and columns by time. """
    magnitude: np.ndarray
    freqs_hz: np.ndarray
    times_s: np.ndarray

    def __post_init__(self):
        for name in ('magnitude', 'freqs_hz', 'times_s'):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.magnitude.shape != (len(self.freqs_hz), len(self.times_s)):
            raise ValueError(f"scalogram shape {self.magnitude.shape} does not match axes "
                             f"({len(self.freqs_hz)}, {len(self.times_s)})")
        if np.any(self.magnitude < 0):
            raise ValueError("scalogram magnitudes must be non-negative")


@dataclasses.dataclass(frozen=True, eq=False)
class ScalogramImage:
    """ A fixed-size raster resampled from a scalogram. """
    pixels: np.ndarray
    subject_id: str = ''
    beat_index: int = -1

    def __post_init__(self):
        object.__setattr__(self, 'pixels', _frozen(self.pixels))
        if self.pixels.ndim != 2:
            raise ValueError("image pixels must be a matrix")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("image pixels must be finite")

    @property
    def shape(self):
        return self.pixels.shape


@dataclasses.dataclass(frozen=True, eq=False)
class SubjectRecord:
    """ Demographics, labels and pulses of one subject. """
    subject_id: str
    weight_kg: float
    height_cm: float
    age_years: float
    sex: int
    valve_class: ValveClass
    vmax_ms: float
    pulses: tuple = ()
    recording_path: Path = None

    def __post_init__(self):
        object.__setattr__(self, 'valve_class', ValveClass.parse(self.valve_class))
        object.__setattr__(self, 'pulses', tuple(self.pulses))
        if not self.vmax_ms > 0:
            raise CohortException(f"subject {self.subject_id}: vmax must be positive, got {self.vmax_ms}")
        if self.sex not in (0, 1):
            raise CohortException(f"subject {self.subject_id}: sex must be 1 (female) or 0 (male), got {self.sex}")
        if min(self.weight_kg, self.height_cm, self.age_years) < 0:
            raise CohortException(f"subject {self.subject_id}: demographics must be non-negative")

    def demographics(self):
        """ Raw (weight, height, age, sex) vector. """
        return np.array([self.weight_kg, self.height_cm, self.age_years, self.sex], dtype=float)

    def with_pulses(self, pulses):
        return dataclasses.replace(self, pulses=tuple(pulses))


@dataclasses.dataclass(frozen=True, eq=False)
class Cohort:
    """ A list of subjects with unique ids. """
    subjects: tuple

    def __post_init__(self):
        object.__setattr__(self, 'subjects', tuple(self.subjects))
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise CohortException("subject ids must be unique")

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, subject_id):
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    @property
    def subject_ids(self):
        return [s.subject_id for s in self.subjects]

    @property
    def pulse_count(self):
        return sum(len(s.pulses) for s in self.subjects)

    def pulse_counts(self):
        """ Map subject id -> number of pulses. """
        return {s.subject_id: len(s.pulses) for s in self.subjects}


##############################################
###
### Recordings
###
##############################################


def load_recording(path):
    """ Read and validate a recording CSV.

        The header must be `sample_rate_hz=<float>`; each following non-blank row must be
        `t,acc_x,acc_y,acc_z,ecg`. The time column is not used (the sample rate defines the
        time base) but must be present.
    """
    path = Path(path)
    with open(path, newline='') as f:
        header = f.readline().strip()
        key, sep, value = header.partition('=')
        if sep != '=' or key.strip() != 'sample_rate_hz':
            raise MalformedHeaderException(path, f"expected 'sample_rate_hz=<float>', got {header!r}")
        try:
            rate = float(value)
        except ValueError:
            raise MalformedHeaderException(path, f"sample rate {value!r} is not a number")
        if not (math.isfinite(rate) and rate > 0):
            raise InvalidSampleRateException(path, rate)

        rows = []
        for line, fields in enumerate(csv.reader(f), start=2):
            if not fields or all(not x.strip() for x in fields):
                continue
            if len(fields) != 5:
                raise RaggedRowException(path, line, len(fields))
            try:
                row = [float(x) for x in fields]
            except ValueError:
                raise RecordingFormatException(path, f"line {line} is not numeric")
            if not all(math.isfinite(x) for x in row):
                raise NonFiniteSampleException(path, line)
            rows.append(row)

    if len(rows) < 2:
        raise RecordingFormatException(path, "a recording needs at least two samples")
    data = np.asarray(rows, dtype=float)
    logger.debug("loaded %s: %d samples at %g Hz", path, len(data), rate)
    return AccelRecording(rate, data[:, 1], data[:, 2], data[:, 3], data[:, 4])

def save_recording(rec, path):
    """ Write `rec` in the recording CSV format. """
    path = Path(path)
    t = np.arange(len(rec)) / rec.sample_rate_hz
    frame = pd.DataFrame({'t': t, 'acc_x': rec.acc_x, 'acc_y': rec.acc_y, 'acc_z': rec.acc_z, 'ecg': rec.ecg})
    with open(path, 'w', newline='') as f:
        f.write(f"sample_rate_hz={rec.sample_rate_hz!r}\n")
        frame.to_csv(f, header=False, index=False, float_format='%.17g')


##############################################
###
### Peak annotations
###
##############################################


def load_peaks(path):
    """ Read an annotation file holding one R-peak sample index per line. """
    values = pd.read_csv(path, header=None, comment='#').iloc[:, 0]
    return np.asarray(values, dtype=np.int64)

def save_peaks(indices, path):
    pd.Series(np.asarray(indices, dtype=np.int64)).to_csv(path, header=False, index=False)


##############################################
###
### Pulse tables
###
##############################################


def pulses_to_frame(pulses):
    """ Long-format table with one row per pulse sample. """
    def _internal_generator():
        for p in pulses:
            sqi = np.nan if p.sqi is None else p.sqi
            for n, v in enumerate(p.samples):
                yield (p.subject_id, p.beat_index, p.sample_rate_hz, sqi, n, v)
    return pd.DataFrame.from_records(_internal_generator(), columns=PULSE_COLUMNS)

def frame_to_pulses(frame):
    pulses = []
    for (subject_id, beat_index), group in frame.groupby(['subject_id', 'beat_index'], sort=False):
        group = group.sort_values('sample')
        sqi = group['sqi'].iloc[0]
        pulses.append(ScgPulse(group['value'].to_numpy(), float(group['sample_rate_hz'].iloc[0]), int(beat_index),
                               str(subject_id), None if pd.isna(sqi) else float(sqi)))
    return pulses

def save_pulses(pulses, path):
    pulses_to_frame(pulses).to_csv(path, index=False, float_format='%.17g')

def load_pulses(path):
    frame = pd.read_csv(path, dtype={'subject_id': str})
    missing = set(PULSE_COLUMNS) - set(frame.columns)
    if missing:
        raise RecordingFormatException(Path(path), f"pulse table lacks columns {sorted(missing)}")
    return frame_to_pulses(frame)


##############################################
###
### Scalogram images
###
##############################################


def save_scalogram_image(img, path):
    """ Write `img` as `SCGI`, u32 LE height, u32 LE width, then row-major float32 LE pixels. """
    h, w = img.shape
    if h >= MAX_IMAGE_SIDE or w >= MAX_IMAGE_SIDE:
        raise ImageFormatException(Path(path), f"dimensions {h}x{w} overflow the format")
    with open(path, 'wb') as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack('<II', h, w))
        f.write(np.ascontiguousarray(img.pixels, dtype='<f4').tobytes())

def load_scalogram_image(path, subject_id='', beat_index=-1):
    path = Path(path)
    with open(path, 'rb') as f:
        magic = f.read(4)
        if magic != IMAGE_MAGIC:
            raise ImageFormatException(path, f"bad magic {magic!r}")
        dims = f.read(8)
        if len(dims) != 8:
            raise ImageFormatException(path, "truncated header")
        h, w = struct.unpack('<II', dims)
        if h == 0 or w == 0 or h >= MAX_IMAGE_SIDE or w >= MAX_IMAGE_SIDE:
            raise ImageFormatException(path, f"impossible dimensions {h}x{w}")
        payload = f.read()
    if len(payload) != 4*h*w:
        raise ImageFormatException(path, f"expected {4*h*w} pixel bytes, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype='<f4').reshape(h, w).astype(float)
    return ScalogramImage(pixels, subject_id, beat_index)

def image_filename(subject_id, beat_index):
    return f"{subject_id}_{beat_index:05d}.scgi"


##############################################
###
### Cohort manifests
###
##############################################


def load_manifest(path):
    """ Read the cohort manifest into a DataFrame, validating the columns and labels. """
    path = Path(path)
    frame = pd.read_csv(path, dtype={'subject_id': str, 'recording_path': str})
    missing = set(MANIFEST_COLUMNS) - set(frame.columns)
    if missing:
        raise CohortException(f"{path}: manifest lacks columns {sorted(missing)}")
    if frame['subject_id'].duplicated().any():
        raise CohortException(f"{path}: duplicate subject ids {sorted(frame.loc[frame['subject_id'].duplicated(), 'subject_id'])}")
    frame['recording_path'] = [str((path.parent / p).resolve()) if not Path(p).is_absolute() else p
                               for p in frame['recording_path']]
    return frame

def load_cohort(path, pulses=None):
    """ Build a Cohort from a manifest; `pulses` optionally maps subject id -> pulse list. """
    frame = load_manifest(path)
    pulses = pulses or {}
    subjects = [SubjectRecord(row.subject_id, float(row.weight_kg), float(row.height_cm), float(row.age_years),
                              int(row.sex), row.valve_class, float(row.vmax_ms), pulses.get(row.subject_id, ()),
                              Path(row.recording_path))
                for row in frame.itertuples(index=False)]
    return Cohort(subjects)

def save_manifest(subjects, path, recording_paths=None):
    """ Write a manifest for `subjects`; recording paths default to each subject's own. """
    recording_paths = recording_paths or {}
    rows = [(s.subject_id, s.weight_kg, s.height_cm, s.age_years, s.sex, s.valve_class.name, s.vmax_ms,
             str(recording_paths.get(s.subject_id, s.recording_path)))
            for s in subjects]
    pd.DataFrame.from_records(rows, columns=MANIFEST_COLUMNS).to_csv(path, index=False, float_format='%.17g')
