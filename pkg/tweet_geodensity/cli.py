"""
Command-line entry point

    tweet-geodensity gen-data   --out data/
    tweet-geodensity train      --config run.env --data data/ --model cmdn --out runs/cmdn
    tweet-geodensity eval       --checkpoint runs/cmdn/model.npz --corpus data/test.jsonl --sweep --hist
    tweet-geodensity predict    --checkpoint runs/cmdn/model.npz --text "twin03 w017 w120" --emit-density
    tweet-geodensity grad-check

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from loguru import logger

from .config import Config, RunConfig
from .data_models import ModelKind
from .exceptions import ConfigError, GeoDensityError, NumericalError
from .pipeline import GeolocationPipeline, fresh_run_dir

GRAD_CHECK_THRESHOLD = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors through ConfigError so they exit with 1"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _parse_overrides(pairs: Sequence[str]) -> dict:
    values = {}
    for pair in pairs or ():
        if '=' not in pair:
            raise ConfigError(f"--set expects key=value, got '{pair}'")
        key, value = pair.split('=', 1)
        values[key] = value
    return values


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then --config file, then --set overrides, then dedicated flags"""
    config = RunConfig.from_file(args.config) if getattr(args, 'config', None) else RunConfig()
    config = RunConfig.from_mapping(_parse_overrides(getattr(args, 'set', None)), config)
    if getattr(args, 'model', None):
        config.model = args.model
    if getattr(args, 'data', None):
        config.data_dir = str(args.data)
    if getattr(args, 'spec', None):
        config.generator_spec = str(args.spec)
    if getattr(args, 'seed', None) is not None:
        config.seed = args.seed
    if getattr(args, 'out', None):
        config.out_dir = str(args.out)
    return config.validate()


# ----- commands -------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    pipeline = GeolocationPipeline(config)
    out_dir = fresh_run_dir(args.out, 'gen-data', config)
    for name, path in pipeline.gen_data(out_dir).items():
        print(f"{name}\t{path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    config.validate(require_data=True)
    pipeline = GeolocationPipeline(config)
    out_dir = fresh_run_dir(args.out, 'train', config)
    pipeline.train(out_dir)
    print(out_dir / 'model.npz')
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    loaded = GeolocationPipeline.load(args.checkpoint)
    # Evaluation settings default to the checkpoint's run, then --config/--set apply on top
    config = loaded.config
    if args.config:
        config = RunConfig.from_file(args.config, config)
    config = RunConfig.from_mapping(_parse_overrides(args.set), config).validate()
    corpus = Path(args.corpus) if args.corpus else Path(config.data_dir) / 'test.jsonl'
    if not corpus.exists():
        raise ConfigError(f"corpus not found: {corpus}")
    compare = [GeolocationPipeline.load(path) for path in args.compare or ()]

    pipeline = GeolocationPipeline(config)
    out_dir = fresh_run_dir(args.out, 'eval', config)
    pipeline.evaluate(loaded, corpus, out_dir, sweep=args.sweep, hist=args.hist,
                      densities=args.densities, compare=compare)
    print(out_dir / 'summary.json')
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    loaded = GeolocationPipeline.load(args.checkpoint)
    texts = args.text if args.text else [line.rstrip('\n') for line in sys.stdin]
    for row in GeolocationPipeline.predict(loaded, texts, emit_density=args.emit_density):
        print(json.dumps(row, ensure_ascii=False))
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    config = load_run_config(args)
    kinds = [ModelKind.parse(k) for k in args.kinds] if args.kinds else None
    reports = GeolocationPipeline(config).grad_check(kinds)

    failed = []
    for kind, report in reports.items():
        status = "ok" if report.passed(args.threshold) else "FAIL"
        print(f"{kind}\tmax_rel_error={report.max_error:.3e}\tchecked={report.checked}\t"
              f"excluded={report.excluded}\t{status}")
        for name, error in report.per_parameter.items():
            print(f"  {name}\t{error:.3e}")
        if status == "FAIL":
            failed.append(kind)
    if failed:
        raise NumericalError(f"gradient check above {args.threshold:g} for: {', '.join(failed)}")
    return 0


# ----- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='tweet-geodensity',
                     description="Density-based geolocation of short texts")
    parser.add_argument('--log-level', default=None, help="override LOG_LEVEL")
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument('--config', type=Path, help="key=value run config file")
        p.add_argument('--set', action='append', metavar='KEY=VALUE', help="override one config key")
        p.add_argument('--out', type=Path, help="output directory (must be new or empty)")

    p = sub.add_parser('gen-data', help="generate synthetic train/dev/test corpora")
    common(p)
    p.add_argument('--spec', type=Path, help="generator spec JSON (default: built-in desk spec)")
    p.add_argument('--seed', type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', help="train one model kind")
    common(p)
    p.add_argument('--data', type=Path, help="directory with train.jsonl and dev.jsonl")
    p.add_argument('--model', help=", ".join(k.value for k in ModelKind))
    p.add_argument('--seed', type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help="evaluate a checkpoint on a corpus")
    common(p)
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--corpus', type=Path, help="JSON-lines corpus (default: <data_dir>/test.jsonl)")
    p.add_argument('--sweep', action='store_true', help="likelihood-threshold sweep (density models)")
    p.add_argument('--hist', action='store_true', help="error-distance histogram")
    p.add_argument('--compare', type=Path, nargs='+', help="extra checkpoints for the histogram")
    p.add_argument('--densities', action='store_true', help="per-record density JSON lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('predict', help="predict locations for text lines")
    p.add_argument('--checkpoint', type=Path, required=True)
    p.add_argument('--text', action='append', help="text to geolocate (default: read stdin)")
    p.add_argument('--emit-density', action='store_true', help="include the full mixture as JSON")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('grad-check', help="finite-difference check of every loss")
    common(p)
    p.add_argument('--kinds', nargs='+', help="model kinds to check (default: all neural kinds)")
    p.add_argument('--threshold', type=float, default=GRAD_CHECK_THRESHOLD)
    p.set_defaults(func=cmd_grad_check)
    return parser


def configure_logging(level: Optional[str] = None) -> None:
    """Single stderr sink; DEBUG_MODE defaults the level to DEBUG and adds variable dumps to tracebacks"""
    logger.remove()
    default = 'DEBUG' if Config.DEBUG_MODE else Config.LOG_LEVEL
    logger.add(sys.stderr, level=(level or default).upper(),
               format="{time:HH:mm:ss} | {level: <8} | {message}",
               backtrace=Config.DEBUG_MODE, diagnose=Config.DEBUG_MODE)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        Config.validate()
        return args.func(args)
    except GeoDensityError as e:
        if Config.DEBUG_MODE:
            logger.exception(str(e))
        else:
            logger.error(str(e))
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
