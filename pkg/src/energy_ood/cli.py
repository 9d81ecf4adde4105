"""Command-line entry point: ``energy-ood {pretrain,tune,score,eval,barrier-lab}``.

Exit status: 0 on success, 1 on a runtime failure (including an evaluation
with unreadable OOD sets, which still writes a partial report), 2 on usage
or configuration errors. Every run writes ``resolved_config.json`` into the
output directory; rerunning from that file reproduces the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import checkpoint
from .barrier import run_barrier_lab
from .classifier import build_model, parse_descriptor, pretrain
from .config import RunConfig, load_config, load_source, load_split
from .energy import EnergyConfig, calibrate_threshold
from .errors import ConfigError, EnergyOODError
from .evaluation import EvalConfig, run_benchmark, score_dataset, write_score_dump
from .tuner import tune, write_log

log = logging.getLogger("energy_ood")

USAGE_ERROR = 2
RUNTIME_ERROR = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="energy-ood", description="Energy-based OOD detection with PD tuning.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("pretrain", "train a classifier with cross-entropy"),
                        ("tune", "fine-tune a checkpoint with the energy objective"),
                        ("score", "write per-sample energies, scores and verdicts"),
                        ("eval", "AUROC / FPR95 / ID accuracy report"),
                        ("barrier-lab", "randomised check of the energy-barrier implication")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=JSON",
                       help="override a config value, e.g. tuning.beta=5 (repeatable)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out-dir", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("tune", "score", "eval"):
            p.add_argument("--checkpoint", help="input checkpoint (overrides model.checkpoint)")
        if name == "barrier-lab":
            p.add_argument("--trials", type=int, help="number of random draws")
    return ap


def _model(cfg: RunConfig, required: bool = True):
    path = cfg.model["checkpoint"]
    if path is None:
        if required:
            raise ConfigError("model.checkpoint (or --checkpoint) is required")
        return None, None
    ckpt = checkpoint.load(path)
    if parse_descriptor(ckpt.architecture) != parse_descriptor(cfg.model["arch"]):
        log.warning("checkpoint architecture %s differs from model.arch %s", ckpt.architecture, cfg.model["arch"])
    return ckpt, ckpt.to_model()


def cmd_pretrain(cfg: RunConfig, args) -> int:
    train = load_split(cfg, "train")
    result = pretrain(build_model(cfg.model["arch"], cfg.seed), train, cfg.pretrain)
    path = os.path.join(cfg.out_dir, "pretrained.ckpt")
    checkpoint.save(result.checkpoint, path)
    with open(os.path.join(cfg.out_dir, "pretrain_log.jsonl"), "w") as fh:
        for epoch, loss in enumerate(result.epoch_losses, 1):
            fh.write(json.dumps({"epoch": epoch, "loss": loss}, sort_keys=True) + "\n")
    print(f"pretrained checkpoint: {path}")
    print(f"train accuracy: {result.checkpoint.metadata['id_accuracy']:.4f}")
    return 0


def cmd_tune(cfg: RunConfig, args) -> int:
    ckpt, model = _model(cfg)
    path = os.path.join(cfg.out_dir, "tuned.ckpt")
    if cfg.schedule.total_epochs == 0:
        checkpoint.save(ckpt, path)
        open(os.path.join(cfg.out_dir, "tune_log.jsonl"), "w").close()
        print(f"zero tuning epochs; input checkpoint copied to {path}")
        return 0
    train = load_split(cfg, "train")
    val = load_split(cfg, "val") if cfg.data.get("val") else None
    run = tune(model, train, cfg.tuning, cfg.schedule, cfg.transforms, seed=cfg.seed, val_set=val,
               momentum=cfg.momentum, weight_decay=cfg.weight_decay,
               energy_cfg=EnergyConfig(cfg.temperature))
    checkpoint.save(run.checkpoint, path)
    write_log(run, os.path.join(cfg.out_dir, "tune_log.jsonl"))
    with open(os.path.join(cfg.out_dir, "tune_summary.json"), "w") as fh:
        json.dump({"baseline": run.baseline, "final": run.epochs[-1], "log_Z": run.trace.entries,
                   "max_log_Z_step": run.trace.max_step_change()}, fh, indent=2, sort_keys=True)
    last = run.epochs[-1]
    print(f"tuned checkpoint: {path}")
    print(f"energy gap {run.baseline['gap_mean']:.4f} -> {last['gap_mean']:.4f}; "
          f"log Z {run.baseline['log_Z']:.4f} -> {last['log_Z']:.4f}")
    return 0


def cmd_score(cfg: RunConfig, args) -> int:
    ckpt, model = _model(cfg)
    ecfg = EnergyConfig(cfg.temperature)
    id_set = score_dataset(model, load_split(cfg, "test"), "ID", ecfg)
    threshold = calibrate_threshold(id_set.scores, cfg.tpr_target)
    sets = [id_set]
    for name, src in cfg.data["ood"].items():
        scored = score_dataset(model, load_source(src, "test", cfg.seed), "OOD", ecfg)
        scored.dataset_id = name
        sets.append(scored)
    path = os.path.join(cfg.out_dir, "scores.csv")
    write_score_dump(sets, threshold, cfg.temperature, checkpoint.params_digest(ckpt.params), path)
    print(f"scores: {path} (threshold {threshold!r})")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    _, model = _model(cfg)
    test = load_split(cfg, "test")
    missing = dict(cfg.missing_paths(include_ood=True))

    def loader(name, src):
        def load():
            gone = [p for w, p in missing.items() if w.startswith(f"data.ood.{name}.")]
            if gone:
                raise ConfigError(f"missing file {gone[0]}")
            return load_source(src, "test", cfg.seed)
        return load

    ood = {name: loader(name, src) for name, src in cfg.data["ood"].items()}
    report = run_benchmark(model, test, ood, EvalConfig(cfg.temperature, cfg.tpr_target), cfg.out_dir)
    print(report.to_text(), end="")
    return 0 if report.ok else RUNTIME_ERROR


def cmd_barrier_lab(cfg: RunConfig, args) -> int:
    trials = args.trials if args.trials is not None else cfg.barrier_trials
    summary = run_barrier_lab(trials, cfg.seed, cfg.barrier)
    with open(os.path.join(cfg.out_dir, "barrier_summary.json"), "w") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True)
    print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    return 0 if summary.violations == 0 and summary.chain_violations == 0 else RUNTIME_ERROR


COMMANDS = {"pretrain": cmd_pretrain, "tune": cmd_tune, "score": cmd_score, "eval": cmd_eval,
            "barrier-lab": cmd_barrier_lab}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if getattr(args, "checkpoint", None):
            overrides.append("model.checkpoint=" + json.dumps(os.path.abspath(args.checkpoint)))
        if args.command == "barrier-lab" and args.trials is not None:
            overrides.append(f"barrier.trials={args.trials}")
        cfg = load_config(args.config, overrides, args.seed, args.out_dir)
        os.makedirs(cfg.out_dir, exist_ok=True)
        cfg.write_snapshot()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (EnergyOODError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
