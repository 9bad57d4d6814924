""" Helpers for holoviews: the interactive versions of the report charts.
"""

import holoviews as hv
import holoviews.plotting.bokeh  # registers the bokeh backend
import numpy as np
import pandas as pd

default_opts = {"width": 480, "height": 400, "tools": ['hover'], "show_grid": True}
class_colors = {'TAV': '#1b9e77', 'BAV': '#d95f02', 'MAV': '#7570b3', 'AS': '#e7298a'}

def correlationChart(subjects, slope):
    """ Predicted against true per-subject V_max, with the identity line and the fit through the origin.

        `subjects` needs the columns true_vmax and pred_vmax.
    """
    lo = 0.0
    hi = float(max(subjects['true_vmax'].max(), subjects['pred_vmax'].max()))*1.05
    points = hv.Scatter(subjects, kdims=['true_vmax'], vdims=['pred_vmax'] + [c for c in ('subject_id', 'iteration') if c in subjects])
    identity = hv.Curve(([lo, hi], [lo, hi])).opts(color='grey', line_dash='dashed')
    fit = hv.Curve(([lo, hi], [lo, slope*hi]), label=f"y = {slope:.2f}x").opts(color='black')
    return (points.opts(size=6, **default_opts) * identity * fit).opts(
        xlabel='4D flow V_max (m/s)', ylabel='predicted V_max (m/s)', legend_position='top_left')

def blandAltmanChart(points, report):
    """ Differences against means, with the bias and the two limits of agreement. """
    low, high = report.limits
    scatter = hv.Scatter(points, kdims=['mean'], vdims=['difference']).opts(size=6, **default_opts)
    lines = [hv.HLine(report.bias).opts(color='black'),
             hv.HLine(low).opts(color='grey', line_dash='dashed'),
             hv.HLine(high).opts(color='grey', line_dash='dashed')]
    return hv.Overlay([scatter] + lines).opts(xlabel='mean of predicted and true V_max (m/s)',
                                              ylabel='predicted - true V_max (m/s)')

def rocChart(mean_curves):
    """ Mean ROC curve per class with a ±1 SD band; `mean_curves` maps class name -> mean_roc frame. """
    layers = []
    for name, frame in mean_curves.items():
        color = class_colors.get(name, 'black')
        lower = np.clip(frame['tpr_mean'] - frame['tpr_sd'], 0, 1)
        upper = np.clip(frame['tpr_mean'] + frame['tpr_sd'], 0, 1)
        band = pd.DataFrame({'fpr': frame['fpr'], 'lower': lower, 'upper': upper})
        layers.append(hv.Area(band, kdims=['fpr'], vdims=['lower', 'upper']).opts(color=color, alpha=0.2, line_alpha=0))
        layers.append(hv.Curve(frame, kdims=['fpr'], vdims=['tpr_mean'], label=name).opts(color=color))
    chance = hv.Curve(([0, 1], [0, 1])).opts(color='grey', line_dash='dashed')
    return hv.Overlay(layers + [chance]).opts(xlabel='false positive rate', ylabel='true positive rate',
                                              legend_position='bottom_right', **default_opts)

def saveHtml(chart, path):
    hv.save(chart, str(path), backend='bokeh')
