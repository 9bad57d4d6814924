""" Configuration files for the pipeline and the synthetic cohort generator.

    Both use the same plain format: one `key=value` per line, `#` starts a comment, blank
    lines are ignored and list values are comma separated (`filters=8,16,32,32,32`).
    Unknown keys are rejected; every value is validated when the file is parsed.
"""

import logging
import math
from pathlib import Path
from typing import List, Literal

import pywt
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import conditioning, neural

logger = logging.getLogger(__name__)


class ConfigException(ValueError):
    """ Thrown if a configuration file cannot be parsed or fails validation. """
    def __init__(self, source, detail):
        self.source = source
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"{self.source}: {self.detail}"


def read_key_values(path):
    """ Parse a `key=value` file into a dict of stripped strings. """
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            raise ConfigException(path, f"line {lineno} is not of the form key=value")
        if key in values:
            raise ConfigException(path, f"line {lineno} repeats key {key!r}")
        values[key] = value.strip()
    return values

def _format_value(value):
    if isinstance(value, (list, tuple)):
        return ','.join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    return str(value)

def _split_list(value):
    if isinstance(value, str):
        return [v.strip() for v in value.split(',') if v.strip()]
    return value


class KeyValueModel(BaseModel):
    """ A validated model that reads and writes the `key=value` format. """
    model_config = ConfigDict(extra='forbid', validate_assignment=True)

    @classmethod
    def from_file(cls, path, **overrides):
        values = read_key_values(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.parse_values(values, source=path)

    @classmethod
    def parse_values(cls, values, source='<arguments>'):
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigException(source, '; '.join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}"
                                                    for err in e.errors()))

    def with_overrides(self, **overrides):
        """ Copy with the non-None overrides applied and validated. """
        values = self.model_dump()
        values.update({k: v for k, v in overrides.items() if v is not None})
        return self.parse_values(values)

    def to_file(self, path):
        lines = [f"# {type(self).__name__}"]
        lines += [f"{key}={_format_value(value)}" for key, value in self.model_dump().items()]
        Path(path).write_text('\n'.join(lines) + '\n')


##############################################
###
### Pipeline
###
##############################################


class PipelineConfig(KeyValueModel):
    # conditioning
    stopband_hz: float = Field(8.4, gt=0)
    passband_hz: float = Field(10.0, gt=0)
    stopband_atten_db: float = Field(60.0, gt=0)
    passband_ripple_db: float = Field(0.1, gt=0)
    taper_frac: float = Field(0.01, ge=0, lt=0.5)
    min_taper: int = Field(8, ge=0)
    denoise: bool = True
    wavelet: str = 'sym4'
    fdr_q: float = Field(0.05, gt=0, lt=1)
    # gating
    min_beat_s: float = Field(0.3, gt=0)
    max_beat_s: float = Field(2.0, gt=0)
    # quality
    keep_fraction: float = Field(0.95, gt=0, le=1)
    # scalogram
    img_size: int = Field(256, ge=2)
    voices: int = Field(48, ge=1)
    morse_gamma: float = Field(3.0, gt=0)
    morse_beta: float = Field(20.0, gt=0)
    # neural
    task: Literal['vmax', 'valve'] = 'vmax'
    filters: List[int] = Field(default_factory=lambda: [8, 16, 32, 32, 32], min_length=1)
    dense_widths: List[int] = Field(default_factory=lambda: [64, 4], min_length=2, max_length=2)
    mlp_widths: List[int] = Field(default_factory=lambda: [16, 4], min_length=2, max_length=2)
    dropout: float = Field(0.3, ge=0, lt=1)
    batch_size: int = Field(32, ge=2)
    learning_rate: float = Field(1e-3, ge=0)
    epochs: int = Field(150, ge=0)
    # experiment
    n_iter: int = Field(10, ge=1)
    train_frac: float = Field(0.8, gt=0, lt=1)
    # global
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)

    @field_validator('filters', 'dense_widths', 'mlp_widths', mode='before')
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @field_validator('filters', 'dense_widths', 'mlp_widths')
    @classmethod
    def positive_widths(cls, value):
        if min(value) <= 0:
            raise ValueError("layer widths must be positive")
        return value

    @field_validator('wavelet')
    @classmethod
    def known_wavelet(cls, value):
        if value not in pywt.wavelist(kind='discrete'):
            raise ValueError(f"unknown discrete wavelet {value!r}")
        return value

    @model_validator(mode='after')
    def check_ranges(self):
        if self.stopband_hz >= self.passband_hz:
            raise ValueError("stopband_hz must lie below passband_hz")
        if self.passband_ripple_db >= self.stopband_atten_db:
            raise ValueError("passband_ripple_db must be smaller than stopband_atten_db")
        if self.min_beat_s >= self.max_beat_s:
            raise ValueError("min_beat_s must be smaller than max_beat_s")
        if self.dense_widths[-1] != self.mlp_widths[-1]:
            raise ValueError("dense_widths and mlp_widths must end in the same width")
        return self

    def conditioning_config(self, sample_rate_hz=1000.0):
        highpass = conditioning.HighpassSpec(sample_rate_hz, self.stopband_hz, self.passband_hz,
                                             self.stopband_atten_db, self.passband_ripple_db)
        return conditioning.ConditioningConfig(highpass, self.taper_frac, self.min_taper, self.denoise,
                                               conditioning.DenoiseConfig(self.wavelet, self.fdr_q))

    def neural_config(self, task=None, img_size=None):
        return neural.ModelConfig(task=task or self.task, filters=tuple(self.filters),
                                  dense_widths=tuple(self.dense_widths), mlp_widths=tuple(self.mlp_widths),
                                  dropout=self.dropout, img_size=img_size or self.img_size, batch_size=self.batch_size,
                                  learning_rate=self.learning_rate, epochs=self.epochs, seed=self.seed)


def load_pipeline_config(path=None, **overrides):
    """ Defaults, then the file (if any), then the non-None overrides. """
    if path is None:
        return PipelineConfig.parse_values({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig.from_file(path, **overrides)


##############################################
###
### Synthetic cohorts
###
##############################################


class SynthSpec(KeyValueModel):
    n_subjects: int = Field(20, ge=1)
    pulses_min: int = Field(40, ge=1)
    pulses_max: int = Field(60, ge=1)
    hr_min_bpm: float = Field(60.0, gt=0)
    hr_max_bpm: float = Field(90.0, gt=0)
    class_mix: List[int] = Field(default_factory=lambda: [5, 5, 5, 5], min_length=4, max_length=4)
    vmax_tav: List[float] = Field(default_factory=lambda: [0.9, 1.5], min_length=2, max_length=2)
    vmax_bav: List[float] = Field(default_factory=lambda: [1.6, 2.2], min_length=2, max_length=2)
    vmax_mav: List[float] = Field(default_factory=lambda: [2.3, 2.9], min_length=2, max_length=2)
    vmax_as: List[float] = Field(default_factory=lambda: [3.0, 4.5], min_length=2, max_length=2)
    ratio_intercept: float = 0.2
    ratio_slope: float = 0.25
    delay_intercept_s: float = Field(0.25, gt=0)
    delay_slope_s: float = 0.02
    delay_offsets_s: List[float] = Field(default_factory=lambda: [0.0, 0.01, 0.02, 0.03], min_length=4, max_length=4)
    first_burst_s: float = Field(0.06, gt=0)
    burst_width_s: float = Field(0.08, gt=0)
    carrier1_hz: List[float] = Field(default_factory=lambda: [20.0, 60.0], min_length=2, max_length=2)
    carrier2_hz: List[float] = Field(default_factory=lambda: [40.0, 90.0], min_length=2, max_length=2)
    snr_db: float = 20.0
    sample_rate_hz: float = Field(1000.0, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator('class_mix', 'vmax_tav', 'vmax_bav', 'vmax_mav', 'vmax_as', 'delay_offsets_s',
                     'carrier1_hz', 'carrier2_hz', mode='before')
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @field_validator('snr_db')
    @classmethod
    def snr_not_nan(cls, value):
        if math.isnan(value) or value == -math.inf:
            raise ValueError("snr_db must be a number or inf (noise disabled)")
        return value

    @model_validator(mode='after')
    def check_feasible(self):
        if sum(self.class_mix) != self.n_subjects or min(self.class_mix) < 0:
            raise ValueError(f"class_mix {self.class_mix} must be non-negative and sum to n_subjects={self.n_subjects}")
        if self.pulses_min > self.pulses_max or self.hr_min_bpm > self.hr_max_bpm:
            raise ValueError("ranges must have min <= max")
        ranges = [self.vmax_tav, self.vmax_bav, self.vmax_mav, self.vmax_as]
        if any(lo > hi or lo <= 0 for lo, hi in ranges):
            raise ValueError("V_max ranges must be positive with min <= max")
        nyquist = self.sample_rate_hz/2
        if max(self.carrier1_hz + self.carrier2_hz) >= nyquist:
            raise ValueError("burst carriers must lie below the Nyquist frequency")
        # Both bursts of a beat must end before the next R-peak, even at the fastest jittered rate.
        latest = self.first_burst_s + max(self.delay_intercept_s + self.delay_slope_s*v + o
                                          for (lo, hi), o in zip(ranges, self.delay_offsets_s) for v in (lo, hi))
        shortest_rr = 0.95*60/self.hr_max_bpm
        if latest + self.burst_width_s/2 >= shortest_rr:
            raise ValueError(f"second burst ends at {latest + self.burst_width_s/2:.3f} s, "
                             f"after the shortest R-R interval {shortest_rr:.3f} s")
        if self.first_burst_s < self.burst_width_s/2:
            raise ValueError("the first burst must start after the R-peak")
        return self

    def vmax_range(self, valve_class):
        return [self.vmax_tav, self.vmax_bav, self.vmax_mav, self.vmax_as][int(valve_class)]
