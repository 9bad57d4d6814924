""" Report tables and charts from a cross-validation results directory.

    Regression runs produce the per-subject correlation (scatter with the fit through the
    origin) and the Bland-Altman agreement; classification runs produce mean one-vs-rest ROC
    curves per class and the confusion matrix of the first iteration. Charts are plain SVG;
    with `html` the HoloViews/Bokeh versions are written as well.
"""

import logging
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
import pandas as pd

from . import stats
from .scalogram import STANDARD_IMAGE_SIZE
from .signal_model import ValveClass

logger = logging.getLogger(__name__)

SVG_WIDTH, SVG_HEIGHT, SVG_MARGIN = 480, 400, 56


class ResultsException(ValueError):
    def __init__(self, path, detail):
        self.path = path
        self.detail = detail
        super().__init__()

    def __str__(self):
        return f"{self.path}: {self.detail}"


def _iteration_frames(results_dir, suffix):
    files = sorted(results_dir.glob(f"iter_*_{suffix}.csv"))
    if not files:
        raise ResultsException(results_dir, f"no iter_XX_{suffix}.csv files")
    frames = []
    for f in files:
        frame = pd.read_csv(f, dtype={'subject_id': str})
        frame.insert(0, 'iteration', int(f.name.split('_')[1]))
        frames.append(frame)
    return frames

def read_run_info(results_dir):
    path = Path(results_dir) / 'run_info.csv'
    if not path.exists():
        raise ResultsException(path, "missing; not a results directory")
    frame = pd.read_csv(path, dtype=str)
    return dict(zip(frame['key'], frame['value']))


##############################################
###
### SVG
###
##############################################


class SvgChart:
    """ A minimal linear-axes chart written as SVG polylines, circles and text. """

    def __init__(self, xlim, ylim, xlabel, ylabel, title=''):
        self.xlim, self.ylim = self._pad(xlim), self._pad(ylim)
        self.items = []
        self.labels = (xlabel, ylabel, title)

    @staticmethod
    def _pad(lim):
        lo, hi = float(lim[0]), float(lim[1])
        return (lo - 0.5, hi + 0.5) if hi <= lo else (lo, hi)

    def _xy(self, x, y):
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        px = SVG_MARGIN + (np.asarray(x, dtype=float) - x0)/(x1 - x0)*(SVG_WIDTH - 2*SVG_MARGIN)
        py = SVG_HEIGHT - SVG_MARGIN - (np.asarray(y, dtype=float) - y0)/(y1 - y0)*(SVG_HEIGHT - 2*SVG_MARGIN)
        return px, py

    def points(self, x, y, color='black'):
        for px, py in zip(*self._xy(x, y)):
            self.items.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="3" fill="none" stroke="{color}"/>')

    def line(self, x, y, color='black', dashed=False, label=None):
        px, py = self._xy(x, y)
        coords = ' '.join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        dash = ' stroke-dasharray="5,4"' if dashed else ''
        self.items.append(f'<polyline points="{coords}" fill="none" stroke="{color}"{dash}/>')
        if label:
            self.items.append(f'<text x="{px[-1] - 4:.2f}" y="{py[-1] - 6:.2f}" font-size="11" '
                              f'text-anchor="end" fill="{color}">{escape(label)}</text>')

    def save(self, path):
        xlabel, ylabel, title = self.labels
        (x0, x1), (y0, y1) = self.xlim, self.ylim
        w, h, m = SVG_WIDTH, SVG_HEIGHT, SVG_MARGIN
        ticks = []
        for v in np.linspace(x0, x1, 5):
            px, _ = self._xy(v, y0)
            ticks.append(f'<text x="{px:.2f}" y="{h - m + 16}" font-size="10" text-anchor="middle">{v:.3g}</text>')
        for v in np.linspace(y0, y1, 5):
            _, py = self._xy(x0, v)
            ticks.append(f'<text x="{m - 6}" y="{py + 3:.2f}" font-size="10" text-anchor="end">{v:.3g}</text>')
        body = '\n'.join([
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
            f'<rect x="{m}" y="{m}" width="{w - 2*m}" height="{h - 2*m}" fill="none" stroke="black"/>',
            f'<text x="{w/2}" y="{m/2}" font-size="13" text-anchor="middle">{escape(title)}</text>',
            f'<text x="{w/2}" y="{h - 12}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="14" y="{h/2}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {h/2})">{escape(ylabel)}</text>',
            *ticks, *self.items, '</svg>', ''])
        Path(path).write_text(body)


##############################################
###
### Regression
###
##############################################


def regression_report(results_dir, out_dir, html=False):
    subjects = pd.concat(_iteration_frames(results_dir, 'subjects'), ignore_index=True)
    true, pred = subjects['true_vmax'].to_numpy(), subjects['pred_vmax'].to_numpy()
    subjects[['iteration', 'subject_id', 'true_vmax', 'pred_vmax']].to_csv(
        out_dir / 'correlation.csv', index=False, float_format='%.17g')

    slope = stats.fit_through_origin(true, pred)
    rows = {'slope_origin': slope, 'n_points': len(subjects)}
    try:
        r = stats.pearson(pred, true)
        rows.update(pearson_r=r.r, pearson_p=r.p)
    except ValueError as e:
        logger.warning("pooled correlation undefined: %s", e)
    rows.update(stats.error_metrics(pred, true))

    points = stats.bland_altman_points(pred, true)
    points.to_csv(out_dir / 'bland_altman.csv', index=False, float_format='%.17g')
    try:
        ba = stats.bland_altman(pred, true)
        rows.update(ba_bias=ba.bias, ba_sd=ba.sd, ba_loa=ba.loa, ba_t=ba.t_statistic, ba_p=ba.p_value,
                    ba_fixed_bias=int(ba.fixed_bias))
    except ValueError as e:
        logger.warning("Bland-Altman analysis undefined: %s", e)
        ba = None

    hi = max(true.max(), pred.max())*1.05
    chart = SvgChart((0, hi), (0, hi), '4D flow V_max (m/s)', 'predicted V_max (m/s)',
                     f"y = {slope:.2f}x" + (f", r = {rows['pearson_r']:.2f}" if 'pearson_r' in rows else ''))
    chart.line([0, hi], [0, hi], color='grey', dashed=True)
    chart.line([0, hi], [0, slope*hi])
    chart.points(true, pred, color='#1b9e77')
    chart.save(out_dir / 'correlation.svg')

    if ba is not None:
        _bland_altman_chart(points, ba, out_dir / 'bland_altman.svg')

    if html:
        from . import hvhelp
        hvhelp.saveHtml(hvhelp.correlationChart(subjects, slope), out_dir / 'correlation.html')
        if ba is not None:
            hvhelp.saveHtml(hvhelp.blandAltmanChart(points, ba), out_dir / 'bland_altman.html')
    return rows

def _bland_altman_chart(points, ba, path):
    low, high = ba.limits
    span = max(abs(points['difference']).max(), abs(low), abs(high))*1.1
    xs = (points['mean'].min(), points['mean'].max())
    chart = SvgChart(xs, (-span, span), 'mean of predicted and true V_max (m/s)', 'predicted - true V_max (m/s)',
                     f"bias {ba.bias:.3f} m/s, LOA ±{ba.loa:.3f} m/s")
    chart.line(xs, [ba.bias]*2)
    chart.line(xs, [low]*2, color='grey', dashed=True)
    chart.line(xs, [high]*2, color='grey', dashed=True)
    chart.points(points['mean'], points['difference'], color='#d95f02')
    chart.save(path)


##############################################
###
### Classification
###
##############################################


def classification_report(results_dir, out_dir, html=False):
    iterations = _iteration_frames(results_dir, 'predictions')
    prob_columns = [f"prob_{k.name}" for k in ValveClass]
    rows = {}
    mean_curves = {}
    chart = SvgChart((0, 1), (0, 1), 'false positive rate', 'true positive rate', 'one-vs-rest ROC')
    chart.line([0, 1], [0, 1], color='grey', dashed=True)
    colors = ['#1b9e77', '#d95f02', '#7570b3', '#e7298a']
    for k in ValveClass:
        curves = []
        for frame in iterations:
            labels = (frame['true_class'] == int(k)).astype(int).to_numpy()
            if labels.min() == labels.max():
                continue
            curves.append(stats.roc_auc(frame[f"prob_{k.name}"].to_numpy(), labels))
        if not curves:
            logger.warning("class %s never appears with both outcomes in a test set; no ROC", k.name)
            continue
        frame = stats.mean_roc(curves)
        frame.to_csv(out_dir / f"roc_{k.name}.csv", index=False, float_format='%.17g')
        mean_curves[k.name] = frame
        aucs = [c.auc for c in curves]
        rows[f"auc_{k.name}_mean"] = float(np.mean(aucs))
        rows[f"auc_{k.name}_sd"] = float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0
        chart.line(frame['fpr'], frame['tpr_mean'], color=colors[int(k)], label=f"{k.name} {rows[f'auc_{k.name}_mean']:.2f}")
    chart.save(out_dir / 'roc.svg')

    first = iterations[0]
    pred = np.argmax(first[prob_columns].to_numpy(), axis=1)
    report = stats.confusion(pred, first['true_class'].to_numpy())
    names = [k.name for k in ValveClass]
    table = pd.DataFrame(report.matrix, index=pd.Index(names, name='true'), columns=names)
    table['precision'] = report.precision
    table['recall'] = report.recall
    table.to_csv(out_dir / 'confusion.csv', float_format='%.17g')
    rows['accuracy_first_iteration'] = report.accuracy

    if html and mean_curves:
        from . import hvhelp
        hvhelp.saveHtml(hvhelp.rocChart(mean_curves), out_dir / 'roc.html')
    return rows


def write_report(results_dir, out_dir, html=False):
    """ Write the report for a results directory; returns the report summary frame. """
    results_dir, out_dir = Path(results_dir), Path(out_dir)
    info = read_run_info(results_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if info['task'] == 'vmax':
        pooled = regression_report(results_dir, out_dir, html)
    else:
        pooled = classification_report(results_dir, out_dir, html)

    summary = pd.read_csv(results_dir / 'summary.csv')
    pooled_rows = pd.DataFrame({'metric': [f"pooled_{k}" for k in pooled], 'mean': list(pooled.values()), 'sd': np.nan})
    summary = pd.concat([summary, pooled_rows], ignore_index=True)
    summary.to_csv(out_dir / 'report_summary.csv', index=False, float_format='%.17g')

    img_size = int(info.get('img_size', STANDARD_IMAGE_SIZE))
    if img_size != STANDARD_IMAGE_SIZE:
        note = (f"Scalogram images were {img_size}x{img_size}, not the standard "
                f"{STANDARD_IMAGE_SIZE}x{STANDARD_IMAGE_SIZE}; metrics are not comparable with standard-size runs.\n")
        (out_dir / 'DEVIATIONS.txt').write_text(note)
        logger.warning(note.strip())
    logger.info("report for %s written to %s", info['task'], out_dir)
    return summary
