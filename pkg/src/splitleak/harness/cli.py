"""``splitleak`` command line.

Exit status: 0 on success, 1 for configuration problems, 2 when a run fails
or finishes with per-sample errors (partial results are kept on disk).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import __version__
from ..defense import DefenseError
from ..model import CheckpointError, Tokenizer, init_model, load_checkpoint, save_checkpoint, toy_train
from .config import ConfigError, load_config
from .corpus import CorpusError, load_corpus
from .report import ReportMismatch, build_report
from . import suites

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

SUITES = {
    "attack": suites.run_attack_suite,
    "defend-grid": suites.run_defense_grid,
    "q1-ablation": suites.run_q1_ablation,
    "paf": suites.run_paf_study,
    "bypass": suites.run_bypass_study,
    "timing": suites.run_timing,
}

# flag -> (section, key)
_FLAGS = {
    "seed": ("experiment", "seed"), "output_dir": ("experiment", "output_dir"),
    "workers": ("experiment", "workers"), "q1": ("experiment", "q1_list"),
    "prompts": ("corpus", "prompts"), "corpus": ("corpus", "path"),
    "max_len": ("corpus", "max_len"), "checkpoint": ("model", "checkpoint"),
    "split_point": ("model", "split_point"), "iterations": ("attack", "iterations"),
    "lr": ("attack", "lr"), "distance": ("attack", "distance"),
    "restarts": ("attack", "restarts"), "defenses": ("defense", "defenses"),
    "grid_kinds": ("defense", "grid_kinds"), "levels": ("defense", "levels"),
    "paf_draws": ("sensitivity", "paf_draws"), "paf_inputs": ("sensitivity", "paf_inputs"),
    "trials": ("timing", "timing_trials"),
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitleak", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"splitleak {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="INI file with [model], [corpus], [attack], ...")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config entry (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag in _FLAGS:
        common.add_argument("--" + flag.replace("_", "-"), dest=flag)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-model", parents=[common], help="write a freshly initialized checkpoint")
    g.add_argument("--out", required=True)
    g.add_argument("--compact", action="store_true", help="store tensors as 32-bit floats")
    t = sub.add_parser("train", parents=[common], help="toy-train on the corpus and save")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=300)
    t.add_argument("--compact", action="store_true")
    for name in SUITES:
        sub.add_parser(name, parents=[common])
    sub.add_parser("report", parents=[common], help="cross-check summaries and draw figures")
    return p


def _overrides(args) -> dict:
    ov = {}
    for flag, key in _FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            ov[key] = str(v)
    for item in args.set:
        lhs, eq, value = item.partition("=")
        section, dot, key = lhs.partition(".")
        if not (eq and dot):
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        ov[(section, key.replace("-", "_"))] = value
    return ov


def _checkpoint_command(args, cfg) -> int:
    texts = load_corpus(cfg.corpus)
    model = load_checkpoint(cfg.checkpoint) if cfg.checkpoint else init_model(cfg.model)
    tok = Tokenizer.build(texts, model.config.vocab_size)
    meta = {"tokenizer": tok.to_dict()}
    if args.command == "train":
        model, tlog = toy_train(model, [tok.encode(s) for s in texts], args.steps, seed=cfg.seed)
        meta["train"] = {"steps": args.steps, "first_loss": tlog.losses[0],
                         "last_loss": tlog.losses[-1], "converged": tlog.converged}
        print(f"loss {tlog.losses[0]:.4f} -> {tlog.losses[-1]:.4f}")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out, compact=args.compact, metadata=meta)
    print(f"wrote {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command in ("gen-model", "train"):
            return _checkpoint_command(args, cfg)
        if args.command == "report":
            rep = build_report(cfg.output_dir)
            print(f"report ok: {len(rep['checks'])} suites checked, figures {rep['figures']}")
            return EXIT_OK
        res = SUITES[args.command](cfg)
    except (ConfigError, CorpusError, CheckpointError, DefenseError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ReportMismatch as exc:
        print(f"report cross-check failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        logging.getLogger(__name__).debug("run failed", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {res.out_dir} (manifest {res.manifest.name})")
    if res.n_errors:
        print(f"{res.n_errors} samples failed; see the error column", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
