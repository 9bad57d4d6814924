""" Command line interface: one subcommand per pipeline stage plus `pipeline` for all of them.

    Exit status is 0 on success, 2 for usage, configuration and input errors and 1 for any
    other failure; failures are reported on standard error as `<stage>: <cause>`.
"""

import argparse
import concurrent.futures
import contextlib
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import __version__, conditioning, experiment, gating, neural, quality, report, scalogram, synth
from .config import ConfigException, SynthSpec, load_pipeline_config
from .signal_model import (image_filename, load_cohort, load_peaks, load_pulses, load_recording, save_manifest,
                           save_pulses, save_recording, save_scalogram_image)

logger = logging.getLogger(__name__)

TASK_CHOICES = ('vmax', 'valve')


class InputException(Exception):
    """ Wraps an error raised while reading the inputs of a stage. """
    def __init__(self, cause):
        self.cause = cause
        super().__init__()

    def __str__(self):
        return str(self.cause)

class StageException(Exception):
    def __init__(self, stage, cause, exit_code):
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code
        super().__init__()

    def __str__(self):
        return f"{self.stage}: {self.cause}"


def read(fn, *args, **kwargs):
    """ Call a loader, classing OSError and ValueError as input errors. """
    try:
        return fn(*args, **kwargs)
    except (OSError, ValueError) as e:
        raise InputException(e)

@contextlib.contextmanager
def stage(name):
    logger.info("stage %s", name)
    try:
        yield
    except StageException:
        raise
    except (InputException, ConfigException) as e:
        raise StageException(name, e, 2)
    except Exception as e:
        logger.debug("stage %s failed", name, exc_info=True)
        raise StageException(name, f"{type(e).__name__}: {e}", 1)

def _map(threads, fn, items):
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


##############################################
###
### Stages
###
##############################################


def run_synth(spec, out_dir, threads=1):
    with stage('synth'):
        return synth.generate_cohort(spec, out_dir, workers=threads)

def run_condition(cfg, manifest, out_dir):
    """ Condition every recording of the cohort; writes recordings, copied annotations and a manifest. """
    with stage('condition'):
        cohort = read(load_cohort, manifest)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        def _one(subject):
            rec = read(load_recording, subject.recording_path)
            conditioned = conditioning.condition_recording(rec, cfg.conditioning_config(rec.sample_rate_hz))
            save_recording(conditioned, out_dir / f"{subject.subject_id}.csv")
            annotations = synth.peaks_path(subject.recording_path)
            if annotations.exists():
                shutil.copyfile(annotations, out_dir / annotations.name)

        _map(cfg.threads, _one, list(cohort))
        save_manifest(cohort, out_dir / 'manifest.csv', {s.subject_id: f"{s.subject_id}.csv" for s in cohort})
        return out_dir / 'manifest.csv'

def run_condition_file(cfg, in_path, out_path):
    """ Condition a single recording; an annotation file next to it is copied alongside the output. """
    with stage('condition'):
        rec = read(load_recording, in_path)
        conditioned = conditioning.condition_recording(rec, cfg.conditioning_config(rec.sample_rate_hz))
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        save_recording(conditioned, out_path)
        annotations = synth.peaks_path(in_path)
        if annotations.exists():
            shutil.copyfile(annotations, synth.peaks_path(out_path))
        return out_path

def run_gate_file(cfg, in_path, out_dir, peaks=None, subject_id=None, detect=False):
    with stage('gate'):
        rec = read(load_recording, in_path)
        if peaks is None and not detect and synth.peaks_path(in_path).exists():
            peaks = synth.peaks_path(in_path)
        indices = read(load_peaks, peaks) if peaks is not None else None
        subject_id = subject_id or Path(in_path).stem
        pulses = gating.gate_recording(rec, indices, subject_id, cfg.min_beat_s, cfg.max_beat_s)
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        save_pulses(pulses, Path(out_dir) / f"{subject_id}_pulses.csv")
        return len(pulses)

def run_gate(cfg, manifest, out_dir, detect=False):
    """ Segment every recording into magnitude pulses; annotated peaks are used when present. """
    with stage('gate'):
        cohort = read(load_cohort, manifest)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        def _one(subject):
            rec = read(load_recording, subject.recording_path)
            annotations = synth.peaks_path(subject.recording_path)
            peaks = read(load_peaks, annotations) if annotations.exists() and not detect else None
            pulses = gating.gate_recording(rec, peaks, subject.subject_id, cfg.min_beat_s, cfg.max_beat_s)
            save_pulses(pulses, out_dir / f"{subject.subject_id}_pulses.csv")
            return len(pulses)

        counts = _map(cfg.threads, _one, list(cohort))
        logger.info("gated %d pulses from %d subjects", sum(counts), len(counts))
        return out_dir

def _pulse_files(in_dir):
    files = sorted(Path(in_dir).glob('*_pulses.csv'))
    if not files:
        raise InputException(FileNotFoundError(f"no *_pulses.csv files in {in_dir}"))
    return files

def run_sqi(cfg, in_dir, out_dir):
    """ Score each subject's pulses and keep the best `keep_fraction`. """
    with stage('sqi'):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        def _one(path):
            pulses = read(load_pulses, path)
            kept, _, table = quality.score_pulses(pulses, cfg.keep_fraction)
            save_pulses(kept, out_dir / path.name)
            table.to_csv(out_dir / path.name.replace('_pulses.csv', '_sqi.csv'), index=False, float_format='%.17g')

        _map(cfg.threads, _one, _pulse_files(in_dir))
        return out_dir

def run_scalogram(cfg, in_dir, out_dir, export_pgm=False):
    """ One `<subject>_<beat>.scgi` image per kept pulse. """
    with stage('scalogram'):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        pulses = [p for f in _pulse_files(in_dir) for p in read(load_pulses, f)]

        def _one(pulse):
            img = scalogram.pulse_to_image(pulse, cfg.img_size, cfg.voices, cfg.morse_gamma, cfg.morse_beta)
            name = image_filename(pulse.subject_id, pulse.beat_index)
            save_scalogram_image(img, out_dir / name)
            if export_pgm:
                scalogram.export_pgm(img, out_dir / name.replace('.scgi', '.pgm'))

        _map(cfg.threads, _one, pulses)
        logger.info("wrote %d %dx%d images to %s", len(pulses), cfg.img_size, cfg.img_size, out_dir)
        return out_dir

def _dataset(manifest, images_dir):
    cohort = read(load_cohort, manifest)
    images_dir = Path(images_dir) if images_dir else Path(manifest).parent / 'images'
    return read(experiment.load_dataset, cohort, images_dir)

def run_train(cfg, manifest, images_dir, out_path):
    """ Train one model on every subject and save it with its demographic scaler. """
    with stage('train'):
        data = _dataset(manifest, images_dir)
        model_cfg = cfg.neural_config(img_size=data.images.shape[1])
        scaler = neural.DemographicScaler().fit(data.demos)
        targets = data.vmax if model_cfg.task == 'vmax' else data.classes
        samples = neural.Samples(neural.prepare_images(data.images), scaler.transform(data.demos), targets)
        model, history = neural.train(model_cfg, samples)
        neural.save_checkpoint(model, out_path, scaler)
        history.to_csv(Path(out_path).with_suffix('.history.csv'), index=False, float_format='%.17g')
        return out_path

def run_experiment(cfg, manifest, images_dir, out_dir):
    with stage('experiment'):
        data = _dataset(manifest, images_dir)
        model_cfg = cfg.neural_config(img_size=data.images.shape[1])
        _, summary = experiment.run_trials(data, model_cfg, cfg.n_iter, cfg.train_frac, out_dir)
        return summary

def run_report(results_dir, out_dir, html=False):
    with stage('report'):
        read(report.read_run_info, results_dir)
        return report.write_report(results_dir, out_dir, html)

def run_pipeline(cfg, manifest, out_dir, tasks=TASK_CHOICES, html=False):
    """ condition -> gate -> sqi -> scalogram -> experiment -> report, each into its own directory. """
    out_dir = Path(out_dir)
    conditioned = run_condition(cfg, manifest, out_dir / 'conditioned')
    run_gate(cfg, conditioned, out_dir / 'pulses')
    run_sqi(cfg, out_dir / 'pulses', out_dir / 'kept')
    run_scalogram(cfg, out_dir / 'kept', out_dir / 'images')
    for task in tasks:
        task_cfg = cfg.with_overrides(task=task)
        run_experiment(task_cfg, conditioned, out_dir / 'images', out_dir / 'results' / task)
        run_report(out_dir / 'results' / task, out_dir / 'report' / task, html)
    return out_dir / 'report'


##############################################
###
### Argument parsing
###
##############################################


def _key_value(text):
    key, sep, value = text.partition('=')
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value.strip()

def common_parser():
    """ Global flags, accepted both before and after the subcommand. """
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument('--config', type=Path, help="key=value configuration file")
    common.add_argument('--seed', type=int, help="random seed (unsigned 64-bit)")
    common.add_argument('--threads', type=int, help="worker threads for per-subject stages and torch")
    common.add_argument('--set', dest='overrides', type=_key_value, action='append', metavar='KEY=VALUE',
                        help="override any configuration key")
    common.add_argument('--dump-config', type=Path, metavar='FILE', help="write the effective configuration to FILE")
    common.add_argument('--verbose', '-v', action='store_true', help="log progress at INFO level")
    return common

def build_parser():
    common = common_parser()
    parser = argparse.ArgumentParser(prog='scgvmax', parents=[common],
                                     description="Aortic V_max and valve class from seismocardiograms.")
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')

    p = sub.add_parser('synth', parents=[common], help="generate a synthetic cohort")
    p.add_argument('--spec', type=Path, help="key=value synthetic cohort specification")
    p.add_argument('--out', type=Path, required=True, help="cohort directory")

    p = sub.add_parser('condition', parents=[common], help="high-pass, taper and denoise recordings")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--in', dest='in_path', type=Path, help="one recording CSV")
    source.add_argument('--cohort', type=Path, help="cohort manifest")
    p.add_argument('--out', type=Path, required=True,
                   help="conditioned recording CSV (with --in) or directory for recordings and manifest")
    p.add_argument('--no-denoise', dest='denoise', action='store_false', default=None, help="skip wavelet denoising")
    p.add_argument('--taper-frac', type=float, help="boundary taper length as a fraction of the recording")
    p.add_argument('--fdr-q', type=float, help="false discovery rate of the wavelet thresholds")

    p = sub.add_parser('gate', parents=[common], help="segment recordings into magnitude SCG pulses")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--in', dest='in_path', type=Path, help="one (conditioned) recording CSV")
    source.add_argument('--cohort', type=Path, help="cohort manifest, usually the conditioned one")
    p.add_argument('--out', type=Path, required=True, help="directory for <subject>_pulses.csv tables")
    p.add_argument('--peaks', type=Path, help="R-peak annotations for --in, one sample index per line")
    p.add_argument('--subject-id', help="subject of --in (default: file stem)")
    p.add_argument('--detect', action='store_true', help="detect R-peaks even when annotations exist")

    p = sub.add_parser('sqi', parents=[common], help="score pulses and drop the worst")
    p.add_argument('--in', dest='in_dir', type=Path, required=True, help="directory of pulse tables")
    p.add_argument('--out', type=Path, required=True, help="directory for kept pulses and SQI tables")
    p.add_argument('--keep', type=float, help="fraction of pulses kept per subject (default 0.95)")

    p = sub.add_parser('scalogram', parents=[common], help="turn kept pulses into scalogram images")
    p.add_argument('--in', dest='in_dir', type=Path, required=True, help="directory of kept pulse tables")
    p.add_argument('--out', type=Path, required=True, help="image directory")
    p.add_argument('--img-size', type=int, help="image side in pixels (default 256)")
    p.add_argument('--export-pgm', action='store_true', help="also write 8-bit PGM previews")

    for name, help_text in (('train', "train one model on the whole cohort"),
                            ('experiment', "leave-subject-out cross-validation")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--cohort', type=Path, required=True, help="cohort manifest")
        p.add_argument('--images', type=Path, help="image directory (default: <manifest dir>/images)")
        p.add_argument('--task', choices=TASK_CHOICES, help="V_max regression or valve classification")
        p.add_argument('--epochs', type=int, help="training epochs")
        p.add_argument('--out', type=Path, required=True,
                       help="checkpoint file" if name == 'train' else "results directory")
        if name == 'experiment':
            p.add_argument('--iters', type=int, help="cross-validation iterations")

    p = sub.add_parser('report', parents=[common], help="tables and charts from a results directory")
    p.add_argument('--results', type=Path, required=True, help="results directory")
    p.add_argument('--out', type=Path, required=True, help="report directory")
    p.add_argument('--html', action='store_true', help="also write interactive HTML charts")

    p = sub.add_parser('pipeline', parents=[common], help="run every stage from a cohort manifest")
    p.add_argument('--cohort', type=Path, required=True, help="cohort manifest")
    p.add_argument('--out', type=Path, required=True, help="output tree")
    p.add_argument('--task', choices=TASK_CHOICES + ('both',), default='both', help="which experiments to run")
    p.add_argument('--img-size', type=int, help="image side in pixels (default 256)")
    p.add_argument('--epochs', type=int, help="training epochs")
    p.add_argument('--iters', type=int, help="cross-validation iterations")
    p.add_argument('--html', action='store_true', help="also write interactive HTML charts")
    return parser

# Subcommand flag -> configuration key.
FLAG_KEYS = {'seed': 'seed', 'threads': 'threads', 'img_size': 'img_size', 'epochs': 'epochs', 'iters': 'n_iter',
             'keep': 'keep_fraction', 'taper_frac': 'taper_frac', 'fdr_q': 'fdr_q', 'denoise': 'denoise'}

def effective_config(args):
    """ Defaults, then --config, then --set, then the dedicated flags. """
    overrides = dict(getattr(args, 'overrides', []))
    overrides.update({key: getattr(args, flag) for flag, key in FLAG_KEYS.items()
                      if getattr(args, flag, None) is not None})
    if getattr(args, 'task', None) in TASK_CHOICES:
        overrides['task'] = args.task
    return read(load_pipeline_config, getattr(args, 'config', None), **overrides)

def dispatch(args, cfg):
    cmd = args.command
    if cmd == 'synth':
        seed = getattr(args, 'seed', None)
        spec = read(SynthSpec.from_file, args.spec, seed=seed) if args.spec else SynthSpec(seed=cfg.seed)
        run_synth(spec, args.out, cfg.threads)
    elif cmd == 'condition' and args.in_path:
        run_condition_file(cfg, args.in_path, args.out)
    elif cmd == 'condition':
        run_condition(cfg, args.cohort, args.out)
    elif cmd == 'gate' and args.in_path:
        run_gate_file(cfg, args.in_path, args.out, args.peaks, args.subject_id, args.detect)
    elif cmd == 'gate':
        run_gate(cfg, args.cohort, args.out, args.detect)
    elif cmd == 'sqi':
        run_sqi(cfg, args.in_dir, args.out)
    elif cmd == 'scalogram':
        run_scalogram(cfg, args.in_dir, args.out, args.export_pgm)
    elif cmd == 'train':
        run_train(cfg, args.cohort, args.images, args.out)
    elif cmd == 'experiment':
        run_experiment(cfg, args.cohort, args.images, args.out)
    elif cmd == 'report':
        run_report(args.results, args.out, args.html)
    elif cmd == 'pipeline':
        tasks = TASK_CHOICES if args.task == 'both' else (args.task,)
        run_pipeline(cfg, args.cohort, args.out, tasks, args.html)

def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    logging.basicConfig(level=logging.INFO if getattr(args, 'verbose', False) else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)
    dump = getattr(args, 'dump_config', None)
    try:
        with stage('config'):
            cfg = effective_config(args)
            if dump:
                cfg.to_file(dump)
        if args.command is None:
            if not dump:
                parser.print_usage(sys.stderr)
                return 2
            return 0
        torch.set_num_threads(cfg.threads)
        dispatch(args, cfg)
    except StageException as e:
        print(str(e), file=sys.stderr)
        return e.exit_code
    return 0

if __name__ == '__main__':
    sys.exit(main())
