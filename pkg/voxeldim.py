#!/usr/bin/env python3
"""
Command-line front end: generate or ingest data, estimate fractal dimension,
run ICA and merge the results into a report.

Exit codes: 0 success, 1 partial (some instances failed), 2 invalid
configuration, 3 I/O failure.
"""
import argparse
import json
import logging
import sys
from typing import List, Optional, Sequence

from report_builder import FragmentError, format_report
from run_config import ConfigError, RunConfig, load_config, resolve_workers
from volume_parser import VolumeFormatError

__version__ = "1.0.0"

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_IO = 3

logger = logging.getLogger("voxeldim")


def _set(key: str, value) -> str:
    return f"{key}={json.dumps(value)}"


def _p_value(text: str):
    if text == "auto":
        return text
    try:
        p = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"p must be an integer or 'auto', got {text!r}") from None
    if p < 1:
        raise argparse.ArgumentTypeError(f"p must be >= 1, got {p}")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='Run configuration file (JSON or YAML)')
    common.add_argument(
        '--set',
        action='append',
        default=[],
        metavar='SECTION.KEY=VALUE',
        help='Override one config value (repeatable)'
    )
    common.add_argument('--out', type=str, help='Output root directory (run.output_root)')
    common.add_argument('--workers', type=int, help='Worker pool size (default: config, then VOXELDIM_WORKERS, then 1)')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO, -vv for DEBUG logging')
    common.add_argument('--quiet', action='store_true', help='Disable progress bars')

    parser = argparse.ArgumentParser(
        prog='voxeldim',
        description="Fractal dimension and ICA analysis of voxel time series"
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    commands = parser.add_subparsers(dest='command', required=True)

    synth = commands.add_parser('synth', parents=[common], help='Generate simulated eight-source mixtures')
    synth.add_argument('--seeds', type=int, nargs='+', help='Realization seeds (default: 1 2)')
    synth.add_argument('--noise', type=float, help='White noise level relative to the mixture RMS')

    ingest = commands.add_parser('ingest', parents=[common], help='Turn volumes into data matrices')
    ingest.add_argument('inputs', nargs='*', help='Volume files or directories')
    ingest.add_argument('--mask', type=str, help='Mask volume (voxels > 0 are kept)')
    ingest.add_argument('--fwhm', type=float, nargs='+', help='Smoothing levels in mm (default: 0 4 8)')
    ingest.add_argument('--stride', type=int, help='Spatial decimation stride')

    smooth = commands.add_parser('smooth', parents=[common], help='Write smoothed copies of volumes')
    smooth.add_argument('inputs', nargs='*', help='Volume files or directories')
    smooth.add_argument('--fwhm', type=float, nargs='+', help='Smoothing levels in mm')

    fd = commands.add_parser('fd', parents=[common], help='Estimate fractal dimension of data matrices')
    fd.add_argument('inputs', nargs='*', help='Matrix files (default: this run\'s matrices)')
    fd.add_argument('--method', choices=['box-count', 'pair-count'], help='Curve construction method')
    fd.add_argument('--q', type=float, help='Tukey taper parameter in [0, 1]')
    fd.add_argument('--fwhm', type=float, nargs='+', help='Extra smoothing levels in mm for the sweep')
    fd.add_argument('--strides', type=int, nargs='+', help='Decimation strides for the sweep')

    ica = commands.add_parser('ica', parents=[common], help='Run spatial fastICA on data matrices')
    ica.add_argument('inputs', nargs='*', help='Matrix files (default: this run\'s matrices)')
    ica.add_argument('--p', type=_p_value, nargs='+', help="Component counts, integers or 'auto'")
    ica.add_argument('--seed', type=int, help='fastICA seed')
    ica.add_argument('--nonlinearity', choices=['tanh', 'cube'], help='Contrast function')

    report = commands.add_parser('report', parents=[common], help='Merge fragments into a report')
    report.add_argument('fragments', nargs='*', help='Fragment files (default: this run\'s fragments)')

    commands.add_parser('run-all', parents=[common], help='synth, fd, ica and report in one go')
    return parser


def flag_overrides(args: argparse.Namespace) -> List[str]:
    """Dedicated flags as 'section.key=value' overrides, applied after --set."""
    overrides = list(args.set)
    if args.out:
        overrides.append(_set('run.output_root', args.out))
    command = args.command
    if command == 'synth':
        if args.seeds:
            overrides.append(_set('synth.seeds', args.seeds))
        if args.noise is not None:
            overrides.append(_set('synth.noise_level', args.noise))
    if command in ('ingest', 'smooth'):
        if args.inputs:
            overrides.append(_set('ingest.inputs', args.inputs))
        if args.fwhm:
            overrides.append(_set('preprocess.fwhm_mm', args.fwhm))
    if command == 'ingest':
        if args.mask:
            overrides.append(_set('ingest.mask', args.mask))
        if args.stride is not None:
            overrides.append(_set('preprocess.decimate_stride', args.stride))
    if command == 'fd':
        if args.inputs:
            overrides.append(_set('fd.inputs', args.inputs))
        if args.method:
            overrides.append(_set('fd.method', args.method))
        if args.q is not None:
            overrides.append(_set('fd.q', args.q))
        if args.fwhm:
            overrides.append(_set('fd.smoothing_fwhm_mm', args.fwhm))
        if args.strides:
            overrides.append(_set('fd.strides', args.strides))
    if command == 'ica':
        if args.inputs:
            overrides.append(_set('ica.inputs', args.inputs))
        if args.p:
            overrides.append(_set('ica.p', args.p))
        if args.seed is not None:
            overrides.append(_set('ica.seed', args.seed))
        if args.nonlinearity:
            overrides.append(_set('ica.nonlinearity', args.nonlinearity))
    if command == 'report' and args.fragments:
        overrides.append(_set('report.fragments', args.fragments))
    return overrides


def configure_logging(verbosity: int):
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def run_command(command: str, cfg: RunConfig, workers: int, progress: bool) -> int:
    """Execute one subcommand; returns the exit code."""
    from analysis_pipeline import AnalysisPipeline

    pipeline = AnalysisPipeline(cfg, workers=workers, progress=progress, tool_version=__version__)
    print(f"Run directory: {pipeline.run_dir}")

    if command == 'smooth':
        outputs = pipeline.smooth()
        print(f"✓ Wrote {len(outputs)} smoothed volumes")
        return EXIT_OK
    if command == 'report':
        report = pipeline.report()
        print(format_report(report))
        return EXIT_OK
    if command == 'run-all':
        report = pipeline.run_all()
        print(format_report(report))
        failed = report["failed"]
    else:
        fragment = {'synth': pipeline.synth, 'ingest': pipeline.ingest,
                    'fd': pipeline.fd, 'ica': pipeline.ica}[command]()
        failed = fragment["failed"]
        print(f"✓ {command}: {len(fragment['instances']) - failed} of {len(fragment['instances'])} instances done")
    if failed:
        print(f"⚠️ {failed} instances failed; see the fragment for details")
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    try:
        cfg = load_config(args.config, flag_overrides(args))
        workers = resolve_workers(cfg, args.workers)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return run_command(args.command, cfg, workers, progress=not args.quiet)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, VolumeFormatError, FragmentError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
