"""Command-line entry point.

Exit codes: 0 success, 1 other package error, 2 configuration error,
3 numerical blow-up, 4 non-convergence (reflections or Picard),
5 domain exit of the F grid, 6 identity check failed.
"""
import argparse
import json
import os
import sys

from .config import ExperimentConfig, parse_config, validate
from .errors import (BlowUpError, ConfigError, DomainExitError, NonConvergenceError,
                     PairsedError)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_BLOWUP, EXIT_NONCONV, EXIT_DOMAIN, EXIT_CHECK = range(7)

SUBCOMMANDS = {'micro': 'micro', 'meso': 'meso_kinetic', 'correlated': 'meso_correlated',
               'converge': 'converge', 'kernels-check': 'kernels_check'}


def build_parser():
    p = argparse.ArgumentParser(prog='pairsed', description='Sedimenting pair clouds: '
                                'micro/meso simulators and convergence diagnostics.')
    sub = p.add_subparsers(dest='command', required=True)
    for name, mode in SUBCOMMANDS.items():
        s = sub.add_parser(name, help=f'run in {mode} mode')
        s.add_argument('--config', metavar='PATH', required=mode != 'kernels_check',
                       help='INI experiment config')
        s.add_argument('--seed', type=int, help='override [run] seed')
        s.add_argument('--out', metavar='DIR', help='output directory (override [run] out)')
        s.add_argument('--threads', type=int, help='worker threads for kernel sums')
    return p


def _config(args, mode):
    overrides = {'mode': mode, 'seed': args.seed, 'out': args.out, 'threads': args.threads}
    if args.config is None:
        cfg = ExperimentConfig(mode=mode)
        for k, v in overrides.items():
            if v is not None:
                setattr(cfg, k, v)
        return validate(cfg)
    return parse_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    mode = SUBCOMMANDS[args.command]
    try:
        cfg = _config(args, mode)
        from .runner import run
        manifest = run(cfg)
    except ConfigError as exc:
        print(f'config error: {exc}', file=sys.stderr)
        return EXIT_CONFIG
    except BlowUpError as exc:
        print(f'blow-up: {exc}', file=sys.stderr)
        return EXIT_BLOWUP
    except NonConvergenceError as exc:
        print(f'non-convergence: {exc}', file=sys.stderr)
        return EXIT_NONCONV
    except DomainExitError as exc:
        print(f'domain exit: {exc}', file=sys.stderr)
        return EXIT_DOMAIN
    except PairsedError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return EXIT_OTHER
    print(json.dumps(manifest.to_dict(), sort_keys=True, indent=1))
    if mode == 'kernels_check':
        with open(os.path.join(cfg.out, 'kernels_check.json')) as fh:
            if not json.load(fh)['passed']:
                return EXIT_CHECK
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
