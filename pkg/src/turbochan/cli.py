"""Command-line entry point: ``turbochan <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 a ``--check``
property failed.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .channel import FixedSource, build_covariances, make_batch, save_batch
from .config import ConfigError, ExperimentConfig, load_config, seed_for
from .estimator import cost_saving
from .experiments import (
    ChainMissing,
    get_chain,
    run_nmse_vs_iteration,
    run_nmse_vs_snr,
    run_pdf_tracking,
    run_universal_comparison,
    universal_source,
)
from .learning import save_model, train_dedicated, train_universal

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

COST_SIZES = ((2, 4), (4, 4), (4, 8), (8, 8), (8, 16), (16, 16), (16, 32))

log = logging.getLogger("turbochan")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="experiment config (YAML)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory (default: config 'output')")
    p.add_argument("--threads", type=int, default=1, help="worker threads for SNR points")
    p.add_argument("--full-scale", action="store_true",
                   help="use the full 500k-observation training sets")
    p.add_argument("--check", action="store_true",
                   help="exit 3 when a property check fails")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="turbochan", description="Learned subspace MMSE channel estimation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", parents=[common], help="train one subspace network")
    p.add_argument("--subspace", choices=("v", "h"), required=True)
    p.add_argument("--snr", type=float, default=None, help="SNR in dB (default: first grid point)")
    p.add_argument("--universal", metavar="SPACE", help="train over a universal space instead")

    p = sub.add_parser("turbo-train", parents=[common], help="train and cache a Turbo chain")
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--universal", metavar="SPACE")

    p = sub.add_parser("eval", parents=[common], help="NMSE versus iteration")
    p.add_argument("--universal", nargs="?", const="*", metavar="SPACE",
                   help="compare universal chains with the dedicated one")

    sub.add_parser("sweep", parents=[common], help="NMSE versus SNR for all estimators")

    p = sub.add_parser("pdf", parents=[common], help="residual PDFs per iteration")
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--k", type=int, default=100_000, help="Monte-Carlo size")

    p = sub.add_parser("cost", parents=[common], help="complexity ratio table")
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--n", type=int, default=None)

    p = sub.add_parser("export-batch", parents=[common], help="write a channel batch file")
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--snr", type=float, default=0.0)
    p.add_argument("--name", default="batch.tchb")
    return parser


def _config(args, required=True):
    if args.config is None:
        if required:
            raise UsageError(f"{args.command}: --config is required")
        cfg = ExperimentConfig()
    else:
        try:
            cfg = load_config(args.config)
        except ConfigError as exc:
            raise UsageError(str(exc)) from exc
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        cfg = cfg.replace(seed=args.seed)
    if args.full_scale:
        cfg = cfg.full_scale()
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    return cfg


def _out(args, cfg):
    out = Path(args.out) if args.out else Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(report, out, args):
    csv_path, json_path = report.write(out)
    print(f"wrote {csv_path}")
    for c in report.checks:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if args.check and not report.passed:
        return EXIT_CHECK
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    out = _out(args, cfg)
    seed = seed_for(cfg.seed, 9)
    if args.universal:
        space = _lookup(cfg, args.universal)
        source = universal_source(cfg, space, seed)
        model = train_universal(source, cfg.train, args.subspace, cfg.n_windows)
        name = f"model_{args.subspace}_{space.name}.bin"
    else:
        snr = cfg.snr_grid[0] if args.snr is None else args.snr
        source = FixedSource(cfg.spatial_config(), snr, cfg.train.window, seed)
        model = train_dedicated(source, cfg.train, args.subspace, cfg.n_windows)
        name = f"model_{args.subspace}_snr{snr:g}.bin"
    save_model(model, out / name)
    print(f"wrote {out / name}")
    print(json.dumps(model.meta.get("convergence", {}), indent=2, sort_keys=True))
    if args.check and not model.meta.get("converged", False):
        return EXIT_CHECK
    return EXIT_OK


def _lookup(cfg, name):
    try:
        return cfg.space(name)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_turbo_train(args):
    cfg = _config(args)
    out = _out(args, cfg)
    if args.universal:
        chain = get_chain(cfg, out, "universal", space=_lookup(cfg, args.universal))
    else:
        snr = cfg.snr_grid[0] if args.snr is None else args.snr
        chain = get_chain(cfg, out, "dedicated", snr)
    for i, st in enumerate(chain.stages):
        print(f"iteration {i + 1}: effective var {st.effective_var:.5g} "
              f"(NMSE {st.nmse_db:.2f} dB)")
    if "truncated" in chain.meta:
        print(f"chain truncated: {chain.meta['truncated']}")
        if args.check:
            return EXIT_CHECK
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args)
    out = _out(args, cfg)
    if args.universal:
        names = None if args.universal == "*" else [_lookup(cfg, args.universal).name]
        report = run_universal_comparison(cfg, out, args.threads, names)
    else:
        report = run_nmse_vs_iteration(cfg, out, args.threads)
    return _finish(report, out, args)


def cmd_sweep(args):
    cfg = _config(args)
    out = _out(args, cfg)
    return _finish(run_nmse_vs_snr(cfg, out, args.threads), out, args)


def cmd_pdf(args):
    cfg = _config(args)
    out = _out(args, cfg)
    return _finish(run_pdf_tracking(cfg, out, args.threads, args.snr, args.k), out, args)


def cmd_cost(args):
    if (args.m is None) != (args.n is None):
        raise UsageError("cost: give both --m and --n or neither")
    sizes = [(args.m, args.n)] if args.m is not None else list(COST_SIZES)
    print(f"{'M':>4} {'N':>4} {'full-array cost':>18} {'subspace cost':>16} {'ratio':>10}")
    for M, N in sizes:
        if M < 1 or N < 1:
            raise UsageError("cost: array dimensions must be positive")
        full = M**4 * N**4
        subspace = M * N**4 + N * M**4
        print(f"{M:>4} {N:>4} {full:>18d} {subspace:>16d} {cost_saving(M, N):>10.1f}")
    return EXIT_OK


def cmd_export_batch(args):
    cfg = _config(args, required=False)
    out = _out(args, cfg)
    if args.k < 1:
        raise UsageError("export-batch: --k must be positive")
    cov = build_covariances(cfg.spatial_config())
    batch = make_batch(cov, args.k, args.snr, seed_for(cfg.seed, 5))
    path = out / args.name
    save_batch(batch, path)
    print(f"wrote {path} (K={batch.K}, N0={batch.N0:.6g})")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "turbo-train": cmd_turbo_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "pdf": cmd_pdf,
    "cost": cmd_cost,
    "export-batch": cmd_export_batch,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(
            level=logging.WARNING - 10 * min(args.verbose, 2),
            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ChainMissing, RuntimeError, ValueError, OSError) as exc:
        print(f"turbochan: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
