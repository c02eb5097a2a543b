"""Command-line interface: ``hlstm <command> ...``.

Commands that write (init, grow, train, prune, gp, export) stage their
files in a private directory under ``--out`` and move them into place only
on success, so a failed command leaves the output directory as it was.
A lock file keeps a second writer out of the same directory.
"""
import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys

import numpy as np

from hlstm import __version__
from hlstm.checkpoint import CheckpointError, checkpoint_from_run, load_checkpoint, run_from_checkpoint, save_checkpoint
from hlstm.config import ConfigError, RunConfig, dump_config, load_config
from hlstm.gptrain import (
    EventLog,
    activation_shift,
    gp_pipeline,
    growth_phase,
    new_run,
    prune_phase,
    seed_model,
    stage_reports,
    train_phase,
)
from hlstm.metrics import count_params, render_size_table
from hlstm.numcore import ContractError
from hlstm.sparsity import render_sparsity_table, sparsity_report, sparsity_rows
from hlstm.tasks import evaluate

log = logging.getLogger("hlstm")

EXT = ".hlgp"
EVENTS = "events.jsonl"
CELL_NAMES = {"hlstm": "H-LSTM", "lstm": "LSTM", "gru": "GRU"}


class CliError(Exception):
    pass


class OutputDir:
    """Exclusive, all-or-nothing writer for one output directory."""

    def __init__(self, path):
        self.path = path
        self.lock = os.path.join(path, ".lock")
        self.staging = os.path.join(path, f".staging-{os.getpid()}")

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        try:
            fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(f"{self.path} is locked by another run (remove {self.lock} if stale)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        os.makedirs(self.staging)
        old_events = os.path.join(self.path, EVENTS)
        if os.path.exists(old_events):
            shutil.copyfile(old_events, self.file(EVENTS))
        return self

    def file(self, name):
        return os.path.join(self.staging, name)

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for name in sorted(os.listdir(self.staging)):
                    os.replace(os.path.join(self.staging, name), os.path.join(self.path, name))
        finally:
            shutil.rmtree(self.staging, ignore_errors=True)
            os.unlink(self.lock)
        return False


def resolve_checkpoint(path):
    for candidate in (path, path + EXT):
        if os.path.isfile(candidate):
            return candidate
    raise CliError(f"no checkpoint at {path}")


def open_run(path):
    return run_from_checkpoint(load_checkpoint(resolve_checkpoint(path)))


def saver(out):
    def save(run, tag):
        save_checkpoint(out.file(tag + EXT), checkpoint_from_run(run, tag))
        log.info("wrote %s%s", tag, EXT)

    return save


def attach_log(run, out):
    run.events = EventLog(out.file(EVENTS))


# commands


def cmd_init(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.sparsity is not None:
        cfg.schedule = dataclasses.replace(cfg.schedule, seed_sparsity=args.sparsity)
    if args.seed is not None:
        cfg.seed = args.seed
    with OutputDir(args.out) as out:
        dump_config(cfg, out.file("config.yaml"))
        run = run_for_config(cfg)
        attach_log(run, out)
        seed_model(run)
        saver(out)(run, "seed")
    return 0


def run_for_config(cfg):
    return new_run(cfg.cell, cfg.task, cfg.schedule, cfg.optimizer.copy(), cfg.lr_schedule,
                   cfg.batch_size, cfg.seed, cfg.activation)


def cmd_grow(args):
    run = open_run(args.ckpt)
    if args.epochs is not None:
        run.schedule.growth_epochs = args.epochs
    run.progress["growth"] = 0
    run.stages.pop("post-growth", None)
    with OutputDir(args.out) as out:
        attach_log(run, out)
        growth_phase(run)
        saver(out)(run, "post-growth")
    return 0


def cmd_train(args):
    run = open_run(args.ckpt)
    if args.epochs is not None:
        run.schedule.train_epochs = args.epochs
    run.progress["train"] = 0
    with OutputDir(args.out) as out:
        attach_log(run, out)
        if args.shift:
            activation_shift(run)
            saver(out)(run, "post-shift")
        train_phase(run)
        saver(out)(run, "trained")
    return 0


def cmd_prune(args):
    run = open_run(args.ckpt)
    if args.threshold is not None:
        run.schedule.accuracy_threshold = args.threshold
    run.progress["prune_iter"] = 0
    run.progress["prune_done"] = False
    with OutputDir(args.out) as out:
        attach_log(run, out)
        save = saver(out)
        prune_phase(run, save)
        run.mark_stage("post-prune")
        run.record("final", metric=evaluate(run.model, run.task.dataset("eval")))
        save(run, "final")
    return 0


def cmd_gp(args):
    if args.resume:
        run = open_run(args.resume)
        cfg = None
    else:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        run = run_for_config(cfg)
    with OutputDir(args.out) as out:
        if cfg is not None:
            dump_config(cfg, out.file("config.yaml"))
        attach_log(run, out)
        gp_pipeline(run, saver(out))
    final = run.history[-1]
    print(f"final {run.task.metric}={final['metric']:.6g} sparsity={final['sparsity'] * 100:.2f}%")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(resolve_checkpoint(args.ckpt))
    run = run_from_checkpoint(ckpt)
    ds = run.task.dataset(args.split)
    value = evaluate(run.model, ds)
    print(f"tag={ckpt.tag} split={args.split} n={len(ds)} {run.task.metric}={value:.10g}")
    return 0


def cmd_report(args):
    ckpt = load_checkpoint(resolve_checkpoint(args.ckpt))
    run = run_from_checkpoint(ckpt)
    stages = stage_reports(run) or {"Current": sparsity_report(run.model)}
    size = count_params(run.model)
    if args.json:
        doc = {
            "tag": ckpt.tag,
            "params": {"dense": size.dense, "active": size.active, "flops": size.flops, "cr": size.cr},
            "sparsity": sparsity_rows(stages),
        }
        print(json.dumps(doc, indent=2, sort_keys=True))
        return 0
    print(f"checkpoint {ckpt.tag}: {run.model.spec.kind} width {run.model.spec.cell_width}, "
          f"activation {run.model.activation}")
    print(render_size_table([(CELL_NAMES[run.model.spec.kind], run.model)]))
    print()
    print(render_sparsity_table(stages))
    return 0


def cmd_export(args):
    """Portable text dump; the format is described in the README."""
    ckpt = load_checkpoint(resolve_checkpoint(args.ckpt))
    target = os.path.abspath(args.out)
    with OutputDir(os.path.dirname(target)) as out:
        with open(out.file(os.path.basename(target)), "w", encoding="utf-8") as fh:
            fh.write("# hlstm export v1\n")
            fh.write(f"tag {ckpt.tag}\n")
            fh.write("meta " + json.dumps({k: ckpt.meta[k] for k in ("spec", "output_width", "activation")},
                                          sort_keys=True) + "\n")
            for name in sorted(ckpt.params):
                w = ckpt.params[name]
                fh.write(f"param {name} {' '.join(map(str, w.shape))}\n")
                for row in w.reshape(-1, w.shape[-1]):
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")
                if name in ckpt.masks:
                    fh.write(f"mask {name}\n")
                    for row in ckpt.masks[name].reshape(-1, w.shape[-1]):
                        fh.write("".join("1" if b else "0" for b in row) + "\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="hlstm", description="H-LSTM cells with grow-and-prune training.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log phase progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a sparse seed checkpoint")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--sparsity", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("grow", help="gradient-driven growth")
    s.add_argument("ckpt")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.set_defaults(fn=cmd_grow)

    s = sub.add_parser("train", help="plain training epochs")
    s.add_argument("ckpt")
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--shift", action="store_true", help="switch leaky ReLU to ReLU first")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("prune", help="iterative pruning with retraining")
    s.add_argument("ckpt")
    s.add_argument("--out", required=True)
    s.add_argument("--threshold", type=float)
    s.set_defaults(fn=cmd_prune)

    s = sub.add_parser("gp", help="full grow-and-prune pipeline")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by an earlier run")
    s.set_defaults(fn=cmd_gp)

    s = sub.add_parser("eval", help="print the eval metric of a checkpoint")
    s.add_argument("ckpt")
    s.add_argument("--split", choices=("train", "eval"), default="eval")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("report", help="size and sparsity tables")
    s.add_argument("ckpt")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("export", help="weights and masks as portable text")
    s.add_argument("ckpt")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (CliError, ConfigError, CheckpointError, ContractError, ValueError, OSError) as exc:
        print(f"hlstm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
