import math

import pytest

from scgvmax import config
from scgvmax.config import ConfigException, PipelineConfig, SynthSpec


def test_defaults():
    cfg = config.load_pipeline_config()
    assert cfg.keep_fraction == 0.95 and cfg.img_size == 256 and cfg.voices == 48
    assert cfg.filters == [8, 16, 32, 32, 32]
    assert cfg.epochs == 150 and cfg.n_iter == 10 and cfg.train_frac == 0.8

def test_file_round_trip(tmp_path):
    cfg = PipelineConfig(seed=7, filters=[4, 8, 8, 8, 8], denoise=False, task='valve', learning_rate=5e-4)
    cfg.to_file(tmp_path / 'run.cfg')
    assert PipelineConfig.from_file(tmp_path / 'run.cfg') == cfg

def test_read_key_values(tmp_path):
    path = tmp_path / 'a.cfg'
    path.write_text("# comment\n\nseed = 3   # trailing\nfilters=2,2,2,2,2\n")
    assert config.read_key_values(path) == {'seed': '3', 'filters': '2,2,2,2,2'}
    cfg = config.load_pipeline_config(path, epochs=4)
    assert cfg.seed == 3 and cfg.filters == [2, 2, 2, 2, 2] and cfg.epochs == 4

    path.write_text("seed=1\nseed=2\n")
    with pytest.raises(ConfigException):
        config.read_key_values(path)
    path.write_text("just a line\n")
    with pytest.raises(ConfigException):
        config.read_key_values(path)

def test_validation(tmp_path):
    path = tmp_path / 'a.cfg'
    path.write_text("colour=blue\n")
    with pytest.raises(ConfigException) as e_info:
        PipelineConfig.from_file(path)
    assert 'colour' in str(e_info.value)
    for bad in ({'keep_fraction': 0}, {'stopband_hz': 12.0}, {'wavelet': 'nope'}, {'mlp_widths': '16,5'},
                {'min_beat_s': 3.0}, {'task': 'other'}, {'filters': '8,0'}, {'batch_size': 1}):
        with pytest.raises(ConfigException):
            PipelineConfig.parse_values(bad)

def test_overrides():
    cfg = PipelineConfig()
    changed = cfg.with_overrides(seed=9, epochs=None)
    assert changed.seed == 9 and changed.epochs == cfg.epochs
    with pytest.raises(ConfigException):
        cfg.with_overrides(n_iter=0)

def test_derived_configs():
    cfg = PipelineConfig(stopband_hz=5.0, passband_hz=7.0, denoise=False, filters=[4, 4, 4, 4, 4], seed=2)
    cond = cfg.conditioning_config(500.0)
    assert cond.highpass.sample_rate_hz == 500.0 and cond.highpass.stopband_hz == 5.0
    assert not cond.denoise and cond.denoise_cfg.wavelet == 'sym4'
    model = cfg.neural_config(task='valve', img_size=64)
    assert model.task == 'valve' and model.img_size == 64 and model.filters == (4, 4, 4, 4, 4) and model.seed == 2

def test_synth_spec(tmp_path):
    spec = SynthSpec()
    assert spec.n_subjects == sum(spec.class_mix)
    assert spec.vmax_range(3) == spec.vmax_as

    path = tmp_path / 'synth.cfg'
    path.write_text("n_subjects=8\nclass_mix=2,2,2,2\nsnr_db=inf\n")
    spec = SynthSpec.from_file(path, seed=5)
    assert math.isinf(spec.snr_db) and spec.seed == 5

    with pytest.raises(ConfigException):
        SynthSpec.parse_values({'n_subjects': 8})
    with pytest.raises(ConfigException):
        SynthSpec.parse_values({'hr_max_bpm': 150.0})
    with pytest.raises(ConfigException):
        SynthSpec.parse_values({'snr_db': 'nan'})

def test_batch_size_lower_bound():
    assert PipelineConfig.parse_values({'batch_size': '2'}).neural_config().batch_size == 2
    with pytest.raises(ConfigException) as e_info:
        PipelineConfig.parse_values({'batch_size': '1'})
    assert 'batch_size' in str(e_info.value)
