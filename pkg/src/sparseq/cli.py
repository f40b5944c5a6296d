"""``sparseq`` command line.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a configuration error.
Global flags may appear before or after the verb.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiment as exp
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, SparseqError, ValidationError

log = logging.getLogger("sparseq")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
THREADS_ENV = "SPARSEQ_THREADS"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors, which already matches the config contract
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    d = argparse.SUPPRESS if suppress else None
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d, help="key = value config file")
    p.add_argument("--out", metavar="DIR", default=d, help="run directory (default: run)")
    p.add_argument("--seed", type=int, metavar="N", default=d, help="overrides run.seed and train.seed")
    p.add_argument("--quiet", action="store_true", default=d if suppress else False)
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=d,
                   help="override one config key; repeatable")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparseq", parents=[_global_flags(False)],
                     description="Sparse-label quantile regression experiments on synthetic scenes.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    common = [_global_flags(True)]
    sub.add_parser("synth", parents=common, help="generate train/test scenes")
    p = sub.add_parser("train", parents=common, help="train a model on the train scenes")
    p.add_argument("--loss", choices=("quantile", "gaussian", "log_gaussian"))
    p.add_argument("--shift", choices=("true", "false"))
    for verb, text in (("predict", "write per-channel prediction rasters"),
                       ("eval", "calibration report on the test scenes"),
                       ("analyze", "border, slope and suspect-label analysis")):
        p = sub.add_parser(verb, parents=common, help=text)
        p.add_argument("--checkpoint", metavar="PATH")
    p = sub.add_parser("report", parents=common, help="compare evaluated runs")
    p.add_argument("run_dirs", nargs="+", metavar="RUN_DIR")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out.setdefault("run.seed", str(args.seed))
        out.setdefault("train.seed", str(args.seed))
    if getattr(args, "loss", None):
        out["train.loss_kind"] = args.loss
    if getattr(args, "shift", None):
        out["train.use_shift_loss"] = args.shift
    return out


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config, _overrides(args))
    for key in ("run.seed", "train.seed"):
        if key not in cfg.explicit:
            sec, name = key.split(".")
            log.info("%s not set; using default %s", key, getattr(getattr(cfg, sec), name))
    return cfg


def _run_config(args, out: Path) -> ExperimentConfig:
    """Config for verbs that act on an existing run: the run's own config.txt
    unless ``--config`` is given, plus command-line overrides."""
    if args.config is None and (out / "config.txt").is_file():
        args.config = str(out / "config.txt")
    return _resolve_config(args)


def _limit_threads():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return None
    try:
        limit = int(n)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {n!r}") from None
    if limit < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def _dispatch(args) -> None:
    out = Path(args.out or "run")
    verb = args.verb
    if verb == "synth":
        cfg = _resolve_config(args)
        written = exp.synthesize(cfg, out)
        log.info("wrote %d train and %d test scenes to %s", len(written["train"]), len(written["test"]), out)
    elif verb == "train":
        cfg = _run_config(args, out)
        if not exp.scene_dirs(out, "train"):
            log.info("no scenes under %s; generating them first", out)
            exp.synthesize(cfg, out)
        else:
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.txt").write_text(exp.dump_config(cfg), encoding="utf-8")
        result = exp.train_model(cfg, exp.load_split(out, "train"))
        path = exp.save_training(result, out)
        log.info("%d steps, final loss %.5f; checkpoint %s", len(result.trace), result.trace[-1].loss, path)
    elif verb in ("predict", "eval", "analyze"):
        cfg = _run_config(args, out)
        model, ckpt = exp.load_model(out, args.checkpoint)
        if verb == "predict":
            paths = exp.write_predictions(model, out)
            log.info("predictions for %d scenes under %s", len(paths), out / "predictions")
        elif verb == "eval":
            rep = exp.write_evaluation(model, cfg, out, ckpt)
            for a in sorted(rep.picp_per_alpha):
                log.info("alpha=%.2f  PICP=%.4f  MPIW=%.4f", a, rep.picp_per_alpha[a], rep.mpiw_per_alpha[a])
        else:
            doc = exp.write_analysis(model, cfg, out)
            for row in doc["border"]:
                log.info("%-8s n=%-6d PICP=%s", row["group"], row["count"], row["picp"])
    elif verb == "report":
        missing = [d for d in args.run_dirs if not Path(d).is_dir()]
        if missing:
            raise ConfigurationError(f"run directory not found: {', '.join(missing)}")
        path = exp.write_comparison(args.run_dirs, args.out or "comparison")
        log.info("comparison table %s", path)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "out", "seed", "set"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        limits = _limit_threads()
        try:
            _dispatch(args)
        finally:
            if limits is not None:
                limits.unregister()
    except (ConfigurationError, ValidationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (SparseqError, OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
