import numpy as np
import pandas as pd
import pytest

from scgvmax import report


def write_run(results_dir, task, img_size=256):
    results_dir.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({'key': ['task', 'img_size', 'n_iter'], 'value': [task, img_size, 2]}).to_csv(
        results_dir / 'run_info.csv', index=False)
    pd.DataFrame({'metric': ['mpe'], 'mean': [12.0], 'sd': [1.0]}).to_csv(results_dir / 'summary.csv', index=False)

def test_regression_report(tmp_path):
    results = tmp_path / 'results'
    write_run(results, 'vmax', img_size=32)
    pd.DataFrame({'subject_id': ['S1', 'S2'], 'true_vmax': [1.0, 2.0], 'pred_vmax': [1.2, 1.9],
                  'n_pulses': [10, 12]}).to_csv(results / 'iter_00_subjects.csv', index=False)
    pd.DataFrame({'subject_id': ['S3', 'S4'], 'true_vmax': [3.0, 4.0], 'pred_vmax': [2.7, 4.4],
                  'n_pulses': [9, 11]}).to_csv(results / 'iter_01_subjects.csv', index=False)

    summary = report.write_report(results, tmp_path / 'out').set_index('metric')
    out = tmp_path / 'out'
    for name in ('correlation.csv', 'correlation.svg', 'bland_altman.csv', 'bland_altman.svg', 'report_summary.csv'):
        assert (out / name).exists()
    assert summary.loc['mpe', 'mean'] == 12.0
    true, pred = np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.2, 1.9, 2.7, 4.4])
    assert summary.loc['pooled_slope_origin', 'mean'] == pytest.approx(np.dot(true, pred)/np.dot(true, true))
    assert summary.loc['pooled_ba_bias', 'mean'] == pytest.approx(np.mean(pred - true))
    assert 'pooled_pearson_r' in summary.index
    assert list(pd.read_csv(out / 'correlation.csv')['iteration']) == [0, 0, 1, 1]
    assert (out / 'DEVIATIONS.txt').exists()
    assert (out / 'correlation.svg').read_text().startswith('<svg')

def test_classification_report(tmp_path):
    results = tmp_path / 'results'
    write_run(results, 'valve')
    rng = np.random.default_rng(0)
    for it in range(2):
        true = np.array([0, 0, 1, 1, 2, 2, 3, 3])
        probs = rng.dirichlet(np.ones(4), size=8)
        frame = pd.DataFrame({'subject_id': [f"S{i}" for i in range(8)], 'beat_index': 0, 'true_vmax': 1.0,
                              'true_class': true})
        for k, name in enumerate(['TAV', 'BAV', 'MAV', 'AS']):
            frame[f"prob_{name}"] = probs[:, k]
        frame['pred_class'] = probs.argmax(axis=1)
        frame.to_csv(results / f"iter_{it:02d}_predictions.csv", index=False)

    summary = report.write_report(results, tmp_path / 'out').set_index('metric')
    out = tmp_path / 'out'
    for name in ('roc_TAV.csv', 'roc_AS.csv', 'roc.svg', 'confusion.csv'):
        assert (out / name).exists()
    assert not (out / 'DEVIATIONS.txt').exists()
    confusion = pd.read_csv(out / 'confusion.csv', index_col=0)
    assert confusion[['TAV', 'BAV', 'MAV', 'AS']].to_numpy().sum() == 8
    assert list(confusion.columns[-2:]) == ['precision', 'recall']
    assert 0 <= summary.loc['pooled_auc_TAV_mean', 'mean'] <= 1
    roc = pd.read_csv(out / 'roc_TAV.csv')
    assert roc['tpr_mean'].iloc[-1] == 1.0

def test_missing_results(tmp_path):
    with pytest.raises(report.ResultsException):
        report.write_report(tmp_path, tmp_path / 'out')
    write_run(tmp_path, 'vmax')
    with pytest.raises(report.ResultsException):
        report.write_report(tmp_path, tmp_path / 'out')

def test_html_charts(tmp_path):
    results = tmp_path / 'results'
    write_run(results, 'vmax')
    pd.DataFrame({'subject_id': ['S1', 'S2', 'S3'], 'true_vmax': [1.0, 2.0, 3.0], 'pred_vmax': [1.1, 2.2, 2.8],
                  'n_pulses': [4, 4, 4]}).to_csv(results / 'iter_00_subjects.csv', index=False)
    report.write_report(results, tmp_path / 'out', html=True)
    assert (tmp_path / 'out' / 'correlation.html').exists()
    assert (tmp_path / 'out' / 'bland_altman.html').exists()
