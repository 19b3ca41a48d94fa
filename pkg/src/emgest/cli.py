"""``emgest`` command-line tool.

    emgest build-dict|simulate|locate|identify|experiment --config FILE
           [--out DIR] [--strict] [--seed N] [--threads N]

Exit codes: 0 success, 2 configuration or input error, 3 solver failure,
4 tie, 5 argmax on the sampling-box boundary, 6 identification failed.
Codes 4 and 5 are only returned with ``--strict``.  Without it a
boundary maximum is a warning, and a tied row counts as a failed
identification (6).
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import experiment
from .config import ConfigError, load_config
from .dictionary import DictionaryFormatError, MissingEntryError
from .forward import MemoryBudgetError, SolverError
from .io import MeasurementFormatError
from .recognition import LayoutMismatchError, ZeroNormError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_TIE = 4
EXIT_BOUNDARY = 5
EXIT_IDENTIFY = 6

log = logging.getLogger("emgest")


def _threads(value):
    if value is not None:
        return max(1, int(value))
    env = os.environ.get("EMGEST_THREADS")
    return max(1, int(env)) if env else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="emgest", description="Electromagnetic gesture location and recognition.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML config file, or a built-in profile: desk, fullscale")
        p.add_argument("--out", help="output directory (default: 'output' from the config)")
        p.add_argument("--strict", action="store_true", help="turn ties and boundary maxima into nonzero exits")
        p.add_argument("--seed", type=int, help="override noise.seed")
        p.add_argument("--threads", type=int, help="worker threads (default: $EMGEST_THREADS or 1)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("build-dict", help="precompute the plane-wave dictionary"))
    common(sub.add_parser("simulate", help="simulate measurements for every configured shape"))
    p = common(sub.add_parser("locate", help="low-frequency location from measurement files"))
    p.add_argument("--measurement", nargs="+", help="low-band measurement files (default: from --out)")
    p = common(sub.add_parser("identify", help="match measurements against the dictionary"))
    p.add_argument("--measurement", nargs="+", help="high-band measurement files (default: from --out)")
    p.add_argument("--dictionary", help="dictionary file (default: config or OUT/dictionary.emgd)")
    p.add_argument("--position", nargs=3, type=float, metavar=("X1", "X2", "X3"),
                   help="located position to use for every measurement (default: auto-locate)")
    common(sub.add_parser("experiment", help="full pipeline with noise sweep"))
    return parser


def run(args):
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    out = args.out or cfg.output
    threads = _threads(args.threads)
    os.makedirs(out, exist_ok=True)

    if args.command == "build-dict":
        d, path = experiment.cmd_build_dict(cfg, out, threads)
        print(f"wrote {path} ({len(d)} entries)")
        return EXIT_OK

    if args.command == "simulate":
        experiment.cmd_simulate(cfg, out, threads)
        print(f"wrote measurements to {os.path.join(out, 'measurements')}")
        return EXIT_OK

    if args.command == "locate":
        results = experiment.cmd_locate(cfg, out, args.measurement)
        code = EXIT_OK
        for sid, res in results.items():
            print(f"{sid}: located at {np.array2string(res.position, precision=4)} (I = {res.value:.6f})")
            if res.on_boundary:
                log.warning("%s: indicator maximum on the sampling-box boundary", sid)
                code = code or (EXIT_BOUNDARY if args.strict else EXIT_OK)
            if res.tied:
                log.warning("%s: %d tied maximisers", sid, len(res.ties))
                code = code or (EXIT_TIE if args.strict else EXIT_OK)
        return code

    if args.command == "identify":
        dictionary = None
        if args.dictionary:
            from .dictionary import load

            dictionary = load(args.dictionary)
        positions = None
        if args.position is not None:
            positions = {s.id: np.array(args.position) for s in cfg.shape_specs()}
        table = experiment.cmd_identify(cfg, out, dictionary, args.measurement, positions)
        ident = table.identified()
        for r, c in zip(table.rows, ident):
            print(f"{r}: {'TIE ' + str(table.row_ties(table.rows.index(r))) if c is None else c}")
        if any(c is None for c in ident):
            return EXIT_TIE if args.strict else EXIT_IDENTIFY
        if not all(r == c for r, c in zip(table.rows, ident) if r in table.columns):
            return EXIT_IDENTIFY
        return EXIT_OK

    if args.command == "experiment":
        summary = experiment.cmd_experiment(cfg, out, threads)
        print(f"results in {out}; all rows identified: {summary['all_correct']}")
        if args.strict and summary["ties"]:
            return EXIT_TIE
        if args.strict and summary["boundary"]:
            return EXIT_BOUNDARY
        return EXIT_OK if summary["all_correct"] else EXIT_IDENTIFY
    raise AssertionError(args.command)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConfigError, MissingEntryError, DictionaryFormatError, FileNotFoundError,
            MeasurementFormatError, LayoutMismatchError, ZeroNormError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (SolverError, MemoryBudgetError) as exc:
        log.error("%s", exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
