"""Command-line entry point: ``python -m hwa_unetr <command>``.

Commands: train, eval, infer, phantom, ablate. Every command writes into a
fresh run directory ``<output_dir>/<timestamp>-<config hash>`` holding the
resolved ``run_config.toml``. Failures print one line to stderr,
``hwau-error code=<n> kind=<kind> reason=<text>``, and exit with the code.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint
from .config import THREADS_ENV, dump_config, load_config, resolve_threads, save_config
from .dataset import (Manifest, Volume, generate_phantom, load_split, read_manifest, read_volume, save_case,
                      split_dataset, write_manifest, write_volume)
from .engine import evaluate, train
from .errors import ConfigError, DataError, HwaError, exit_code
from .metrics import MetricReport, binarize, write_tsv
from .model import HwaUnetr, sliding_window_infer
from .transforms import case_arrays, normalize_intensity, stack_volumes
from .utils import make_run_dir, seed_everything

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
ABLATION_ROWS = (
    (False, False, False),
    (False, False, True),
    (False, True, True),
    (True, True, True),
)
PROB_SUFFIX = '_prob.hwav'


def parse_opt(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='TOML run configuration', default=None, type=str)
    common.add_argument('--seed', help='Overrides train.seed', default=None, type=int)
    common.add_argument('--device-threads', help=f'CPU threads (fallback: ${THREADS_ENV}, then 1)',
                        default=None, type=int)
    common.add_argument('--override', help='Dotted key=value, value read as a TOML literal (repeatable)',
                        action='append', default=[], metavar='KEY=VALUE')
    common.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR', default=None, type=str)

    parser = argparse.ArgumentParser(prog='hwa_unetr', description='HWA-UNETR desk-scale toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', parents=[common], help='Train on a manifest (phantoms when none is given)')
    p.add_argument('--manifest', help='Manifest with train/val splits', default=None, type=str)

    p = sub.add_parser('eval', parents=[common], help='Dice / HD95 report over a manifest split')
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument('--checkpoint', help='Model checkpoint (.hwau)', type=str)
    source.add_argument('--predictions', help='Directory of <case>/<channel>_prob.hwav volumes', type=str)
    p.add_argument('--manifest', help='Manifest of ground-truth cases', required=True, type=str)
    p.add_argument('--split', help='Split to evaluate', default='test', type=str)

    p = sub.add_parser('infer', parents=[common], help='Probability volumes for one case')
    p.add_argument('--checkpoint', help='Model checkpoint (.hwau)', required=True, type=str)
    p.add_argument('--volumes', help='One volume per modality, in model order', nargs='+', required=True)
    p.add_argument('--case-id', help='Output folder name (default: parent folder of the first volume)',
                   default=None, type=str)
    p.add_argument('--channels', help='Output channel names', nargs='+', default=None)

    p = sub.add_parser('phantom', parents=[common], help='Generate phantom cases and a split manifest')
    p.add_argument('--count', help='Number of cases (default data.phantom_count)', default=None, type=int)
    p.add_argument('--out', help='Output directory (default: the run directory)', default=None, type=str)

    p = sub.add_parser('ablate', parents=[common], help='Train and evaluate the four block-flag rows')
    p.add_argument('--manifest', help='Manifest with train/val/test splits', default=None, type=str)

    return parser.parse_args(argv)


def _configure(opt):
    overrides = list(opt.override)
    if opt.seed is not None:
        overrides.append(f'train.seed={opt.seed}')
    if opt.log_level is not None:
        overrides.append(f'log_level="{opt.log_level}"')
    cfg = load_config(opt.config, overrides)
    logging.basicConfig(level=cfg.log_level, format=LOG_FORMAT)
    threads = resolve_threads(opt.device_threads, cfg)
    cfg = dataclasses.replace(cfg, device_threads=threads)
    seed_everything(cfg.train.seed, threads, deterministic=threads == 1)
    return cfg


def _run_dir(cfg, command):
    run_dir = make_run_dir(Path(cfg.output_dir), f'{command}\n{dump_config(cfg)}')
    save_config(cfg, run_dir)
    logger.info('%s: run directory %s', command, run_dir)
    return run_dir


def _check_compatible(cfg, cases):
    for case in cases:
        if len(case.modalities) != cfg.model.in_modalities or len(case.channels) != cfg.model.out_channels:
            raise ConfigError(f'case {case.case_id} has {len(case.modalities)} modalities / '
                              f'{len(case.channels)} masks; the model expects {cfg.model.in_modalities} / '
                              f'{cfg.model.out_channels}')


def _make_phantoms(cfg, out_dir, count=None) -> Manifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = count or cfg.data.phantom_count
    entries = []
    for i in range(count):
        case = generate_phantom(cfg.phantom, cfg.data.phantom_seed + i, f'case{i:03d}')
        entries.append(save_case(case, out_dir))
    manifest = split_dataset(Manifest(entries, root=out_dir), cfg.data.split_seed)
    write_manifest(out_dir / 'manifest.tsv', manifest)
    logger.info('wrote %d phantom cases to %s (%s)', count, out_dir, manifest.counts())
    return manifest


def _manifest(cfg, path, run_dir) -> Manifest:
    path = path or cfg.data.manifest
    if path:
        return read_manifest(path)
    return _make_phantoms(cfg, Path(run_dir) / 'phantoms')


def _load_model(cfg, checkpoint):
    model = HwaUnetr(cfg.model)
    load_checkpoint(checkpoint, model)
    model.eval()
    return model


def _eval_split(manifest, split):
    cases = load_split(manifest, split)
    if not cases:
        raise DataError(f'manifest has no {split!r} cases')
    return cases


def _write_report(report, run_dir, label):
    report.write_table(run_dir / 'report.tsv', label)
    report.write_cases(run_dir / 'cases.tsv')
    logger.info('%s (undefined HD95: %d, empty pairs: %d)', report.summary(label),
                report.undefined_hd95, report.empty_pairs)


def cmd_train(cfg, opt):
    run_dir = _run_dir(cfg, 'train')
    manifest = _manifest(cfg, opt.manifest, run_dir)
    _check_compatible(cfg, load_split(manifest, 'train'))
    model = HwaUnetr(cfg.model)
    train(model, manifest, cfg.train, run_dir)
    return run_dir


def cmd_eval(cfg, opt):
    run_dir = _run_dir(cfg, 'eval')
    cases = _eval_split(read_manifest(opt.manifest), opt.split)
    if opt.checkpoint:
        _check_compatible(cfg, cases)
        report = evaluate(_load_model(cfg, opt.checkpoint), cases, cfg.train.crop, cfg.train.val_overlap,
                          cfg.train.threshold)
        label = Path(opt.checkpoint).stem
    else:
        report = MetricReport(cases[0].channels)
        for case in cases:
            _, target = case_arrays(case)
            folder = Path(opt.predictions) / case.case_id
            prob = stack_volumes([read_volume(folder / f'{c}{PROB_SUFFIX}') for c in case.channels],
                                 case.reference.extents, 'nearest')
            report.add_case(case.case_id, binarize(prob, cfg.train.threshold), target, case.reference.spacing)
        label = Path(opt.predictions).name
    _write_report(report, run_dir, label)
    return report


def cmd_infer(cfg, opt):
    if len(opt.volumes) != cfg.model.in_modalities:
        raise ConfigError(f'the model expects {cfg.model.in_modalities} volumes, got {len(opt.volumes)}')
    if opt.channels and len(opt.channels) != cfg.model.out_channels:
        raise ConfigError(f'--channels names {len(opt.channels)} channels, the model has {cfg.model.out_channels}')
    channels = opt.channels or list(cfg.phantom.channels)
    if len(channels) != cfg.model.out_channels:
        channels = [f'ch{k}' for k in range(cfg.model.out_channels)]
    run_dir = _run_dir(cfg, 'infer')
    volumes = [read_volume(p) for p in opt.volumes]
    reference = volumes[0]
    image = stack_volumes([dataclasses.replace(v, voxels=normalize_intensity(v.voxels)) for v in volumes],
                          reference.extents)
    model = _load_model(cfg, opt.checkpoint)
    prob = sliding_window_infer(torch.from_numpy(image), model, cfg.train.crop, cfg.train.val_overlap).numpy()

    case_id = opt.case_id or Path(opt.volumes[0]).resolve().parent.name
    folder = run_dir / case_id
    folder.mkdir(parents=True, exist_ok=True)
    for k, name in enumerate(channels):
        write_volume(folder / f'{name}{PROB_SUFFIX}', Volume(prob[k], reference.spacing, name))
    logger.info('wrote %d probability volumes to %s', len(channels), folder)
    return folder


def cmd_phantom(cfg, opt):
    run_dir = _run_dir(cfg, 'phantom')
    return _make_phantoms(cfg, opt.out or run_dir, opt.count)


def cmd_ablate(cfg, opt):
    run_dir = _run_dir(cfg, 'ablate')
    manifest = _manifest(cfg, opt.manifest, run_dir)
    split = 'test' if manifest.by_split('test') else 'val'
    cases = _eval_split(manifest, split)
    _check_compatible(cfg, cases)

    header, rows = None, []
    for flags in ABLATION_ROWS:
        name = 'hwa{}_sgc{}_tfm{}'.format(*(int(f) for f in flags))
        row_dir = run_dir / name
        row_dir.mkdir()
        model_cfg = dataclasses.replace(cfg.model, use_hwa=flags[0], use_sgc=flags[1], use_tfm=flags[2])
        seed_everything(cfg.train.seed)
        model = HwaUnetr(model_cfg)
        logger.info('ablation row %s', name)
        train(model, manifest, cfg.train, row_dir)
        load_checkpoint(row_dir / 'best.hwau', model)
        report = evaluate(model, cases, cfg.train.crop, cfg.train.val_overlap, cfg.train.threshold)
        report.write_cases(row_dir / 'cases.tsv')
        header = ['HWA', 'SGC', 'TFM'] + report.header()[1:]
        rows.append(['v' if f else 'x' for f in flags] + report.row(name)[1:])
        logger.info(report.summary(name))
    write_tsv(run_dir / 'ablation.tsv', header, rows)
    return rows


COMMANDS = {
    'train': cmd_train,
    'eval': cmd_eval,
    'infer': cmd_infer,
    'phantom': cmd_phantom,
    'ablate': cmd_ablate,
}


def main(argv=None):
    opt = parse_opt(argv)
    try:
        cfg = _configure(opt)
        COMMANDS[opt.command](cfg, opt)
    except HwaError as exc:
        reason = ' '.join(str(exc).split())
        code = exit_code(exc)
        print(f'hwau-error code={code} kind={exc.kind} reason={reason}', file=sys.stderr)
        return code
    return 0
