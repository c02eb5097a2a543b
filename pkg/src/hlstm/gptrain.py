"""Training loop and the grow-and-prune pipeline.

A :class:`Run` bundles everything a phase mutates: model, optimizer state,
RNG, epoch counter, history and pipeline progress. Snapshots of a run are
what pruning rolls back to, and what checkpoints serialize.

Pipeline order: seed masks, gradient-driven growth, leaky-ReLU to ReLU
shift, main training, iterative magnitude pruning with retraining.
"""
import copy
import json
import logging
import time

import numpy as np

from hlstm.cells import RecurrentModel
from hlstm.numcore import ContractError, Tape, backward
from hlstm.optim import GradientAccumulator, LrSchedule, OptimizerState, optimizer_step
from hlstm.sparsity import (
    GpSchedule,
    MaskedMatrix,
    SparsityRow,
    grow,
    prune_model_neurons,
    prune_step,
    seed_mask,
    sparsity_report,
    total_sparsity,
)
from hlstm.tasks import evaluate, meets_threshold

log = logging.getLogger(__name__)

STAGE_TITLES = {"seed": "Seed", "post-growth": "Post-growth", "post-prune": "Post-pruning"}


def fresh_progress():
    return {"seeded": False, "growth": 0, "shift": False, "train": 0, "prune_iter": 0, "prune_done": False}


class EventLog:
    """Line-delimited JSON events; also kept in memory as ``records``."""

    def __init__(self, path=None):
        self.path = path
        self.records = []

    def emit(self, **fields):
        rec = {"time": round(time.time(), 3), **fields}
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


class Run:
    def __init__(self, model, task, schedule=None, opt=None, lr_schedule=None, batch_size=32, rng=None):
        self.model = model
        self.task = task
        self.schedule = schedule or GpSchedule()
        self.opt = opt or OptimizerState()
        self.lr_schedule = lr_schedule or LrSchedule(base_lr=self.opt.lr)
        self.batch_size = int(batch_size)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.epoch = 0
        self.history = []
        self.stages = {}
        self.progress = fresh_progress()
        self.events = EventLog()

    def snapshot(self):
        return {
            "model": self.model.copy(),
            "opt": self.opt.copy(),
            "rng": copy.deepcopy(self.rng.bit_generator.state),
            "epoch": self.epoch,
            "history": copy.deepcopy(self.history),
            "stages": copy.deepcopy(self.stages),
            "progress": dict(self.progress),
        }

    def restore(self, snap):
        self.model = snap["model"].copy()
        self.opt = snap["opt"].copy()
        self.rng.bit_generator.state = copy.deepcopy(snap["rng"])
        self.epoch = snap["epoch"]
        self.history = copy.deepcopy(snap["history"])
        self.stages = copy.deepcopy(snap["stages"])
        self.progress = dict(snap["progress"])

    def record(self, phase, loss=None, metric=None):
        rec = {
            "phase": phase,
            "epoch": self.epoch,
            "loss": None if loss is None else float(loss),
            "metric": None if metric is None else float(metric),
            "sparsity": float(total_sparsity(self.model)),
        }
        self.history.append(rec)
        self.events.emit(**rec)
        return rec

    def mark_stage(self, tag):
        self.stages[tag] = [[r.layer, r.active, r.total] for r in sparsity_report(self.model)]


def batch_loss(tape, model, ds, idx, train, rng):
    hs, _ = model.forward(tape, ds.inputs[idx], train=train, rng=rng)
    out = model.readout(tape, hs, ds.readout_steps, train=train, rng=rng)
    targets = ds.targets[idx]
    if ds.loss == "mse":
        return tape.mse(out, targets)
    return tape.softmax_xent(out, targets)


def train_epoch(run, dataset):
    """One shuffled pass with dropout; returns the sample-weighted mean loss."""
    model = run.model
    run.opt.lr = run.lr_schedule.lr_at(run.epoch)
    order = run.rng.permutation(len(dataset))
    total, seen = 0.0, 0
    for s in range(0, len(order), run.batch_size):
        idx = order[s:s + run.batch_size]
        tape = Tape()
        loss = batch_loss(tape, model, dataset, idx, True, run.rng)
        grads = backward(tape, loss)
        optimizer_step(run.opt, model.params, grads, model.masks)
        total += float(loss.value) * len(idx)
        seen += len(idx)
    run.epoch += 1
    return total / seen


def accumulate_avg_grads(model, dataset, batch_size=256):
    """``|mean gradient|`` of every masked weight over ``dataset``, per sample.

    Gradients at dormant positions are the straight-through values
    ``dL/dW_eff``, i.e. what the weight would receive if it were active.
    Dropout is off so the result does not depend on the RNG.
    """
    if len(dataset) == 0:
        raise ContractError("gradient accumulation over an empty dataset")
    acc = GradientAccumulator()
    for s in range(0, len(dataset), batch_size):
        idx = np.arange(s, min(s + batch_size, len(dataset)))
        tape = Tape()
        loss = batch_loss(tape, model, dataset, idx, False, None)
        grads = backward(tape, loss)
        acc.add({k: grads[k] for k in model.masks}, len(idx))
    return {k: np.abs(v) for k, v in acc.average().items()}


def seed_model(run):
    """Replace every mask with a random sparse one; dormant weights become +0.0."""
    model = run.model
    s = run.schedule.seed_sparsity
    for name in model.masks:
        if s > 0:
            mask, _ = seed_mask(model.masks[name].shape, s, run.rng)
            model.masks[name] = mask
    model.apply_masks()
    run.opt.buffers = {}
    run.progress["seeded"] = True
    run.mark_stage("seed")
    run.record("seed")


def growth_epoch(run, train_ds, eval_ds):
    """Grow every masked matrix from the full-training-set gradient, then train one epoch."""
    model = run.model
    avg = accumulate_avg_grads(model, train_ds)
    grown = 0
    for name in model.masks:
        new = grow(MaskedMatrix(model.params[name], model.masks[name], name), avg[name], run.schedule.alpha)
        grown += int(new.sum())
    loss = train_epoch(run, train_ds)
    run.progress["growth"] += 1
    run.record("growth", loss, evaluate(model, eval_ds))
    return grown


def growth_phase(run, on_checkpoint=None):
    train_ds, eval_ds = run.task.dataset("train"), run.task.dataset("eval")
    while run.progress["growth"] < run.schedule.growth_epochs:
        growth_epoch(run, train_ds, eval_ds)
        if run.progress["growth"] < run.schedule.growth_epochs and on_checkpoint:
            on_checkpoint(run, f"growth-epoch-{run.progress['growth']}")
    if "post-growth" not in run.stages:
        run.mark_stage("post-growth")


def activation_shift(run, epochs=None):
    """Swap leaky ReLU for ReLU in the DNN gates and retrain; no-op if already ReLU."""
    epochs = run.schedule.shift_epochs if epochs is None else epochs
    if run.model.activation == "relu":
        log.info("activation shift skipped: model already uses relu")
        run.progress["shift"] = True
        return
    run.model.activation = "relu"
    train_ds, eval_ds = run.task.dataset("train"), run.task.dataset("eval")
    for _ in range(epochs):
        loss = train_epoch(run, train_ds)
        run.record("shift", loss, evaluate(run.model, eval_ds))
    run.progress["shift"] = True


def train_phase(run, on_checkpoint=None):
    train_ds, eval_ds = run.task.dataset("train"), run.task.dataset("eval")
    while run.progress["train"] < run.schedule.train_epochs:
        loss = train_epoch(run, train_ds)
        run.progress["train"] += 1
        run.record("train", loss, evaluate(run.model, eval_ds))
        if run.progress["train"] < run.schedule.train_epochs and on_checkpoint:
            on_checkpoint(run, f"train-epoch-{run.progress['train']}")


def prune_iteration(run):
    """Prune every masked matrix by beta, drop dead units, retrain.

    Returns ``True`` and keeps the result if the threshold was met within the
    retraining budget; otherwise restores the pre-iteration state and
    returns ``False``. An iteration that removes nothing also returns ``False``.
    """
    sched, model = run.schedule, run.model
    metric = run.task.metric
    snap = run.snapshot()
    removed = 0
    for name in model.masks:
        removed += int(prune_step(MaskedMatrix(model.params[name], model.masks[name], name), sched.beta).sum())
    if removed == 0:
        log.warning("pruning made no progress (floor(beta * active) == 0 in every layer); stopping")
        run.events.emit(phase="prune", event="no-progress", epoch=run.epoch)
        return False
    prune_model_neurons(model)
    train_ds, eval_ds = run.task.dataset("train"), run.task.dataset("eval")
    for _ in range(sched.retrain_epochs_per_prune):
        loss = train_epoch(run, train_ds)
        value = evaluate(run.model, eval_ds)
        run.record("prune", loss, value)
        if meets_threshold(metric, value, sched.accuracy_threshold):
            return True
    log.info("retraining missed the threshold; rolling back to the last committed state")
    run.restore(snap)
    run.events.emit(phase="prune", event="rollback", epoch=run.epoch)
    return False


def prune_phase(run, on_checkpoint=None):
    """Iterate :func:`prune_iteration` until it fails or the iteration cap is hit."""
    if run.progress["prune_done"]:
        return
    if run.progress["prune_iter"] == 0:
        value = evaluate(run.model, run.task.dataset("eval"))
        if not meets_threshold(run.task.metric, value, run.schedule.accuracy_threshold):
            log.warning(
                "model misses the threshold (%s=%.6g vs %.6g) before pruning; returning it unchanged",
                run.task.metric, value, run.schedule.accuracy_threshold,
            )
            run.progress["prune_done"] = True
            return
    while run.progress["prune_iter"] < run.schedule.max_prune_iterations:
        if not prune_iteration(run):
            break
        run.progress["prune_iter"] += 1
        if on_checkpoint:
            on_checkpoint(run, f"post-prune-iter-{run.progress['prune_iter']}")
    run.progress["prune_done"] = True


def new_run(spec, task, schedule, opt, lr_schedule, batch_size, seed, activation="leaky_relu"):
    """Fresh run whose model init and training RNG both derive from ``seed``."""
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    model = RecurrentModel.initialize(spec, task.output_width, np.random.default_rng(init_ss), activation)
    return Run(model, task, schedule, opt, lr_schedule, batch_size, np.random.default_rng(train_ss))


def gp_pipeline(run, on_checkpoint=None):
    """Run (or resume) every remaining pipeline stage of ``run``.

    ``on_checkpoint(run, tag)`` is called at each phase boundary with tags
    ``seed``, ``post-growth``, ``post-shift``, ``trained``,
    ``post-prune-iter-k`` and ``final``, plus mid-phase epoch tags.
    """
    emit = on_checkpoint or (lambda r, tag: None)
    if not run.progress["seeded"]:
        seed_model(run)
        emit(run, "seed")
    if run.progress["growth"] < run.schedule.growth_epochs or "post-growth" not in run.stages:
        growth_phase(run, on_checkpoint)
        emit(run, "post-growth")
    if not run.progress["shift"]:
        activation_shift(run)
        emit(run, "post-shift")
    if run.progress["train"] < run.schedule.train_epochs:
        train_phase(run, on_checkpoint)
        emit(run, "trained")
    if not run.progress["prune_done"]:
        prune_phase(run, on_checkpoint)
        run.mark_stage("post-prune")
        run.record("final", metric=evaluate(run.model, run.task.dataset("eval")))
        emit(run, "final")
    return run


def stage_reports(run):
    """``{title: [SparsityRow, ...]}`` for the recorded stages, in pipeline order."""
    out = {}
    for tag, title in STAGE_TITLES.items():
        if tag in run.stages:
            out[title] = [SparsityRow(*row) for row in run.stages[tag]]
    return out
