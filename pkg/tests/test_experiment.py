import numpy as np
import pandas as pd
import pytest

from scgvmax import experiment, signal_model
from scgvmax.experiment import Dataset, SplitPlan
from scgvmax.neural import ModelConfig
from scgvmax.signal_model import Cohort, ScalogramImage, ScgPulse, SubjectRecord


def cohort(counts):
    subjects = []
    for i, n in enumerate(counts):
        sid = f"S{i:02d}"
        pulses = [ScgPulse([1.0, 2.0], 1000.0, b, sid) for b in range(n)]
        subjects.append(SubjectRecord(sid, 60.0 + i, 160.0 + i, 30.0 + i, i % 2, i % 4, 1.0 + 0.3*i, pulses))
    return Cohort(subjects)

def dataset(n_subjects=4, n_pulses=3, size=16, seed=0):
    rng = np.random.default_rng(seed)
    rows = [(s, b) for s in range(n_subjects) for b in range(n_pulses)]
    return Dataset(images=rng.random((len(rows), size, size)),
                   demos=np.array([[60.0 + 5*s, 160.0 + 3*s, 30.0 + 7*s, s % 2] for s, _ in rows]),
                   subject_ids=np.array([f"S{s:02d}" for s, _ in rows]),
                   beat_indices=np.array([b for _, b in rows], dtype=np.int64),
                   vmax=np.array([1.0 + 0.5*s for s, _ in rows]),
                   classes=np.array([s % 4 for s, _ in rows], dtype=np.int64))

def tiny_config(**kwargs):
    base = dict(filters=(2, 2, 2, 2, 2), dense_widths=(8, 4), mlp_widths=(4, 4), img_size=16, batch_size=4, epochs=1)
    base.update(kwargs)
    return ModelConfig(**base)

def test_split_sizes():
    plans = experiment.make_splits(cohort([10]*10), n_iter=10, train_frac=0.8)
    assert len(plans) == 10
    for plan in plans:
        assert len(plan.train_subject_ids) == 8 and len(plan.test_subject_ids) == 2

def test_splits_are_exclusive():
    c = cohort([5, 40, 12, 3, 30, 8, 22, 9])
    ids = set(c.subject_ids)
    for plan in experiment.make_splits(c, n_iter=1000, seed=4):
        train, test = set(plan.train_subject_ids), set(plan.test_subject_ids)
        assert not train & test
        assert train | test == ids
        assert train and test

def test_splits_deterministic():
    c = cohort([10, 12, 8, 15, 9])
    assert experiment.make_splits(c, 5, seed=3) == experiment.make_splits(c, 5, seed=3)
    assert [p.seed for p in experiment.make_splits(c, 3, seed=3)] == [3, 4, 5]
    plans = {tuple(p.test_subject_ids) for p in experiment.make_splits(c, 30, seed=1)}
    assert len(plans) > 1

def test_split_errors():
    with pytest.raises(experiment.SplitException):
        experiment.make_splits(cohort([10]))
    with pytest.raises(experiment.SplitException):
        experiment.make_splits(cohort([10, 10]), train_frac=1.0)
    with pytest.raises(experiment.SplitException):
        SplitPlan(0, ('S00', 'S01'), ('S01',), 0)

def test_two_subjects():
    plan = experiment.make_splits(cohort([10, 10]), n_iter=1)[0]
    assert len(plan.train_subject_ids) == 1 and len(plan.test_subject_ids) == 1

def test_run_iteration_vmax():
    data = dataset()
    plan = SplitPlan(0, ('S00', 'S01', 'S02'), ('S03',), 7)
    result = experiment.run_iteration(plan, tiny_config(), data)
    assert len(result.predictions) == 3
    assert list(result.predictions['subject_id']) == ['S03']*3
    assert len(result.subjects) == 1
    row = result.subjects.iloc[0]
    assert row['n_pulses'] == 3
    assert row['pred_vmax'] == pytest.approx(result.predictions['pred_vmax'].mean())
    assert row['true_vmax'] == 2.5
    assert result.train_high_vmax_share == 0.0
    assert len(result.history) == 1

    metrics = experiment.iteration_metrics(result)
    assert np.isnan(metrics['pearson_r'])
    assert metrics['n_test_pulses'] == 3
    assert metrics['mpe'] == pytest.approx(100*abs(row['pred_vmax'] - 2.5)/2.5)

def test_run_iteration_valve():
    data = dataset(n_subjects=6, n_pulses=4)
    plan = SplitPlan(0, ('S00', 'S01', 'S02', 'S03'), ('S04', 'S05'), 1)
    result = experiment.run_iteration(plan, tiny_config(task='valve'), data)
    probs = result.predictions[['prob_TAV', 'prob_BAV', 'prob_MAV', 'prob_AS']].to_numpy()
    assert probs.shape == (8, 4)
    assert np.allclose(probs.sum(axis=1), 1)
    assert np.array_equal(result.predictions['pred_class'], probs.argmax(axis=1))
    assert list(result.subjects['true_class']) == [0, 1]

    metrics = experiment.iteration_metrics(result)
    assert 0 <= metrics['accuracy'] <= 1
    assert np.isnan(metrics['auc_MAV'])
    assert not np.isnan(metrics['auc_TAV'])

def test_run_iteration_errors():
    with pytest.raises(experiment.SplitException):
        experiment.run_iteration(SplitPlan(0, ('S00', 'S01'), (), 0), tiny_config(), dataset())

def test_summarize():
    metrics = pd.DataFrame({'iteration': [0, 1, 2], 'mpe': [10.0, 20.0, 30.0], 'accuracy': [0.5, 0.5, 0.5]})
    summary = experiment.summarize(metrics).set_index('metric')
    assert summary.loc['mpe', 'mean'] == 20.0 and summary.loc['mpe', 'sd'] == 10.0
    assert summary.loc['accuracy', 'sd'] == 0.0
    single = experiment.summarize(metrics.iloc[:1]).set_index('metric')
    assert (single['sd'] == 0).all()

def test_run_trials(tmp_path):
    data = dataset(n_subjects=5, n_pulses=3)
    results, summary = experiment.run_trials(data, tiny_config(), n_iter=3, out_dir=tmp_path)
    assert [r.plan.iteration for r in results] == [0, 1, 2]
    for i in range(3):
        for kind in ('predictions.csv', 'subjects.csv', 'history.csv', 'model.scgm'):
            assert (tmp_path / f"iter_{i:02d}_{kind}").exists()
    metrics = pd.read_csv(tmp_path / 'metrics.csv')
    assert len(metrics) == 3
    stored = pd.read_csv(tmp_path / 'summary.csv').set_index('metric')
    assert stored.loc['mpe', 'mean'] == pytest.approx(metrics['mpe'].mean())
    info = pd.read_csv(tmp_path / 'run_info.csv').set_index('key')['value']
    assert info['task'] == 'vmax' and int(info['img_size']) == 16

    _, single = experiment.run_trials(data, tiny_config(), n_iter=1)
    assert (single['sd'] == 0).all()

def test_load_dataset(tmp_path):
    c = cohort([0, 0, 0])
    for sid, beats in (('S00', [0, 3]), ('S01', [1])):
        for b in beats:
            img = ScalogramImage(np.full((8, 8), b + 1.0, dtype=np.float32))
            signal_model.save_scalogram_image(img, tmp_path / signal_model.image_filename(sid, b))
    data = experiment.load_dataset(c, tmp_path)
    assert len(data) == 3
    assert list(data.subject_ids) == ['S00', 'S00', 'S01']
    assert list(data.beat_indices) == [0, 3, 1]
    assert data.images[1, 0, 0] == 4.0
    assert data.pulse_counts() == {'S00': 2, 'S01': 1}
    assert list(data.classes) == [0, 0, 1]
    with pytest.raises(FileNotFoundError):
        experiment.load_dataset(c, tmp_path / 'missing')
