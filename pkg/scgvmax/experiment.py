""" Leave-subject-out cross-validation of the fusion network.

    Every iteration draws a random subject-level split that puts as close as possible to 80%
    of the pulses into the training set, trains a fresh model and predicts every pulse of the
    held-out subjects. V_max predictions are averaged per subject before scoring; valve
    classes are scored per pulse, with a per-subject majority vote as a supplement.
"""

import dataclasses
import logging
import math
import re
from pathlib import Path

import numpy as np
import pandas as pd

from . import neural, stats
from .signal_model import ValveClass, load_scalogram_image

logger = logging.getLogger(__name__)

HIGH_VMAX_MS = 2.0


class SplitException(ValueError):
    pass


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """ One row per scalogram image, with the labels and raw demographics of its subject. """
    images: np.ndarray
    demos: np.ndarray
    subject_ids: np.ndarray
    beat_indices: np.ndarray
    vmax: np.ndarray
    classes: np.ndarray

    def __len__(self):
        return len(self.images)

    def pulse_counts(self):
        ids, counts = np.unique(self.subject_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def subset(self, mask):
        return Dataset(*(getattr(self, f.name)[mask] for f in dataclasses.fields(self)))

    def subject_vmax(self):
        return pd.Series(self.vmax, index=self.subject_ids).groupby(level=0).first()


def load_dataset(cohort, images_dir):
    """ Collect every `<subject>_<beat>.scgi` image under `images_dir` for the subjects of `cohort`. """
    images_dir = Path(images_dir)
    files = sorted(images_dir.glob('*.scgi'))
    rows = []
    for subject in cohort:
        pattern = re.compile(rf"^{re.escape(subject.subject_id)}_(\d+)\.scgi$")
        matched = [(int(m.group(1)), f) for f in files if (m := pattern.match(f.name))]
        if not matched:
            logger.warning("subject %s has no images in %s", subject.subject_id, images_dir)
        for beat, f in sorted(matched):
            rows.append((subject, beat, load_scalogram_image(f, subject.subject_id, beat).pixels))
    if not rows:
        raise FileNotFoundError(f"no scalogram images for the cohort in {images_dir}")
    shapes = {img.shape for _, _, img in rows}
    if len(shapes) != 1:
        raise ValueError(f"images in {images_dir} have differing sizes {sorted(shapes)}")
    logger.info("loaded %d images of %d subjects", len(rows), len({s.subject_id for s, _, _ in rows}))
    return Dataset(np.stack([img for _, _, img in rows]),
                   np.array([s.demographics() for s, _, _ in rows]),
                   np.array([s.subject_id for s, _, _ in rows]),
                   np.array([b for _, b, _ in rows], dtype=np.int64),
                   np.array([s.vmax_ms for s, _, _ in rows]),
                   np.array([int(s.valve_class) for s, _, _ in rows], dtype=np.int64))


##############################################
###
### Splits
###
##############################################


@dataclasses.dataclass(frozen=True)
class SplitPlan:
    iteration: int
    train_subject_ids: tuple
    test_subject_ids: tuple
    seed: int

    def __post_init__(self):
        if set(self.train_subject_ids) & set(self.test_subject_ids):
            raise SplitException(f"iteration {self.iteration}: a subject is in both training and test sets")


def _greedy_split(order, counts, target):
    train, total = [], 0
    for s in order:
        if abs(total + counts[s] - target) < abs(total - target):
            train.append(s)
            total += counts[s]
    if len(train) == len(order):
        # Return the subject whose removal lands closest to the target.
        drop = min(train, key=lambda s: abs(total - counts[s] - target))
        train.remove(drop)
    if not train:
        train.append(min(order, key=lambda s: abs(counts[s] - target)))
    return train

def make_splits(cohort, n_iter=10, train_frac=0.8, seed=0):
    """ Random subject-level splits whose training pulse count is greedily packed toward
        `train_frac` of all pulses; both sides always hold at least one subject.
    """
    counts = cohort.pulse_counts()
    if len(counts) < 2:
        raise SplitException(f"leave-subject-out splits need at least 2 subjects, got {len(counts)}")
    if not 0 < train_frac < 1:
        raise SplitException(f"train_frac must lie in (0,1), got {train_frac}")
    ids = sorted(counts)
    target = train_frac*sum(counts.values())
    plans = []
    for it in range(n_iter):
        rng = np.random.default_rng([seed, it])
        order = [ids[i] for i in rng.permutation(len(ids))]
        train = set(_greedy_split(order, counts, target))
        plans.append(SplitPlan(it, tuple(s for s in ids if s in train), tuple(s for s in ids if s not in train),
                               seed + it))
    return plans


##############################################
###
### Iterations
###
##############################################


@dataclasses.dataclass(eq=False)
class IterationResult:
    plan: SplitPlan
    task: str
    predictions: pd.DataFrame
    subjects: pd.DataFrame
    history: pd.DataFrame
    train_high_vmax_share: float
    model: object = None
    scaler: object = None


def _samples(data, scaler, task):
    targets = data.vmax if task == 'vmax' else data.classes
    return neural.Samples(neural.prepare_images(data.images), scaler.transform(data.demos), targets)

def run_iteration(plan, config, dataset):
    """ Train on the plan's training subjects and predict every pulse of its test subjects. """
    if not plan.test_subject_ids:
        raise SplitException(f"iteration {plan.iteration} has an empty test set")
    if not plan.train_subject_ids:
        raise SplitException(f"iteration {plan.iteration} has an empty training set")
    config = dataclasses.replace(config, seed=plan.seed)
    train_data = dataset.subset(np.isin(dataset.subject_ids, plan.train_subject_ids))
    test_data = dataset.subset(np.isin(dataset.subject_ids, plan.test_subject_ids))
    scaler = neural.DemographicScaler().fit(train_data.demos)
    train_set = _samples(train_data, scaler, config.task)
    test_set = _samples(test_data, scaler, config.task)

    logger.info("iteration %d: %d training pulses (%d subjects), %d test pulses (%d subjects)", plan.iteration,
                len(train_set), len(plan.train_subject_ids), len(test_set), len(plan.test_subject_ids))
    model, history = neural.train(config, train_set, test_set)
    out = neural.predict(model, test_set.images, test_set.demos, config.batch_size)

    predictions = pd.DataFrame({'subject_id': test_data.subject_ids, 'beat_index': test_data.beat_indices,
                                'true_vmax': test_data.vmax, 'true_class': test_data.classes})
    if config.task == 'vmax':
        predictions['pred_vmax'] = out
        subjects = (predictions.groupby('subject_id', sort=True)
                    .agg(true_vmax=('true_vmax', 'first'), pred_vmax=('pred_vmax', 'mean'), n_pulses=('pred_vmax', 'size'))
                    .reset_index())
    else:
        for k in ValveClass:
            predictions[f"prob_{k.name}"] = out[:, int(k)]
        predictions['pred_class'] = np.argmax(out, axis=1)
        subjects = (predictions.groupby('subject_id', sort=True)
                    .agg(true_class=('true_class', 'first'),
                         vote_class=('pred_class', lambda c: int(np.bincount(c, minlength=4).argmax())),
                         n_pulses=('pred_class', 'size'))
                    .reset_index())
    share = float(np.mean(train_data.subject_vmax() > HIGH_VMAX_MS))
    return IterationResult(plan, config.task, predictions, subjects, history, share, model, scaler)


def _safe(f, *args):
    try:
        return f(*args)
    except ValueError as e:
        logger.debug("metric undefined: %s", e)
        return None

def iteration_metrics(result):
    """ Scalar metrics of one iteration as a flat dict (NaN where a metric is undefined). """
    row = {'iteration': result.plan.iteration, 'n_test_subjects': len(result.subjects),
           'n_test_pulses': len(result.predictions), 'train_high_vmax_share': result.train_high_vmax_share}
    if result.task == 'vmax':
        true, pred = result.subjects['true_vmax'].to_numpy(), result.subjects['pred_vmax'].to_numpy()
        r = _safe(stats.pearson, pred, true)
        row['pearson_r'] = r.r if r else math.nan
        row['pearson_p'] = r.p if r else math.nan
        row['slope_origin'] = stats.fit_through_origin(true, pred)
        fit = _safe(stats.fit_with_intercept, true, pred)
        row['slope'], row['intercept'] = fit if fit else (math.nan, math.nan)
        row.update(stats.error_metrics(pred, true))
        ba = _safe(stats.bland_altman, pred, true)
        row['ba_bias'] = ba.bias if ba else math.nan
        row['ba_loa'] = ba.loa if ba else math.nan
        row['ba_p'] = ba.p_value if ba else math.nan
    else:
        probs = result.predictions[[f"prob_{k.name}" for k in ValveClass]].to_numpy()
        true = result.predictions['true_class'].to_numpy()
        aucs = []
        for k in ValveClass:
            curve = _safe(stats.roc_auc, probs[:, int(k)], (true == int(k)).astype(int))
            row[f"auc_{k.name}"] = curve.auc if curve else math.nan
            aucs.append(row[f"auc_{k.name}"])
        row['auc_macro'] = float(np.nanmean(aucs)) if not all(math.isnan(a) for a in aucs) else math.nan
        row['accuracy'] = float(np.mean(result.predictions['pred_class'] == true))
        row['vote_accuracy'] = float(np.mean(result.subjects['vote_class'] == result.subjects['true_class']))
    return row

def summarize(metrics):
    """ Mean and sample SD across iterations of every metric column; SD is 0 for one iteration. """
    values = metrics.drop(columns=['iteration'])
    sd = values.std(ddof=1) if len(values) > 1 else pd.Series(0.0, index=values.columns)
    return pd.DataFrame({'metric': values.columns, 'mean': values.mean().to_numpy(), 'sd': sd.to_numpy()})


def run_trials(dataset, config, n_iter=10, train_frac=0.8, out_dir=None):
    """ Run `n_iter` cross-validation iterations and optionally write the results directory.

        Results: iter_XX_predictions.csv, iter_XX_subjects.csv, iter_XX_history.csv and
        iter_XX_model.scgm per iteration, plus metrics.csv, summary.csv and run_info.csv.
        Iterations run one after another: torch seeding is process-global.
    """
    plans = make_splits(dataset, n_iter, train_frac, config.seed)
    results = [run_iteration(plan, config, dataset) for plan in plans]
    metrics = pd.DataFrame.from_records([iteration_metrics(r) for r in results])
    summary = summarize(metrics)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for r in results:
            prefix = out_dir / f"iter_{r.plan.iteration:02d}"
            r.predictions.to_csv(f"{prefix}_predictions.csv", index=False, float_format='%.17g')
            r.subjects.to_csv(f"{prefix}_subjects.csv", index=False, float_format='%.17g')
            r.history.to_csv(f"{prefix}_history.csv", index=False, float_format='%.17g')
            neural.save_checkpoint(r.model, f"{prefix}_model.scgm", r.scaler)
        metrics.to_csv(out_dir / 'metrics.csv', index=False, float_format='%.17g')
        summary.to_csv(out_dir / 'summary.csv', index=False, float_format='%.17g')
        info = {'task': config.task, 'n_iter': n_iter, 'train_frac': train_frac, 'img_size': dataset.images.shape[1],
                'epochs': config.epochs, 'seed': config.seed, 'n_subjects': len(dataset.pulse_counts()),
                'n_pulses': len(dataset)}
        pd.DataFrame({'key': list(info), 'value': list(info.values())}).to_csv(out_dir / 'run_info.csv', index=False)
        logger.info("wrote %d iterations to %s", n_iter, out_dir)
    return results, summary
