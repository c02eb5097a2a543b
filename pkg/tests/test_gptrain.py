import json
import math

import numpy as np
import pytest

from hlstm.cells import CellSpec, RecurrentModel
from hlstm.checkpoint import checkpoint_from_run, encode
from hlstm.gptrain import (
    EventLog,
    Run,
    accumulate_avg_grads,
    activation_shift,
    batch_loss,
    gp_pipeline,
    growth_epoch,
    growth_phase,
    new_run,
    prune_iteration,
    prune_phase,
    seed_model,
    stage_reports,
    train_epoch,
)
from hlstm.numcore import ContractError, Tape, backward
from hlstm.optim import LrSchedule, OptimizerState
from hlstm.sparsity import GpSchedule, total_sparsity
from hlstm.tasks import Task, evaluate, meets_threshold


def tiny_run(seed=0, activation="leaky_relu", **sched):
    task = Task("adding", length=5, n_train=64, n_eval=32, seed=seed)
    spec = CellSpec("hlstm", 2, 4, (4,), 1, 0.0, 0.0)
    defaults = dict(growth_epochs=2, shift_epochs=1, train_epochs=2, retrain_epochs_per_prune=2,
                    accuracy_threshold=1.0, max_prune_iterations=3)
    defaults.update(sched)
    return new_run(spec, task, GpSchedule(**defaults), OptimizerState("adam", lr=1e-2),
                   LrSchedule("constant", 1e-2), 16, seed, activation)


def per_sample_grad(model, ds, i):
    tape = Tape()
    return backward(tape, batch_loss(tape, model, ds, np.array([i]), False, None))


class TestAccumulate:
    def test_single_sample(self):
        run = tiny_run()
        ds = run.task.dataset("train").subset([3])
        avg = accumulate_avg_grads(run.model, ds)
        g = per_sample_grad(run.model, ds, 0)
        for name in run.model.masks:
            assert avg[name].tobytes() == np.abs(g[name]).tobytes()

    def test_duplicated_dataset(self):
        run = tiny_run()
        ds = run.task.dataset("train")
        doubled = ds.subset(np.repeat(np.arange(len(ds)), 2))
        a, b = accumulate_avg_grads(run.model, ds), accumulate_avg_grads(run.model, doubled)
        for name in a:
            np.testing.assert_allclose(a[name], b[name], rtol=1e-12, atol=1e-15)

    def test_per_sample_oracle(self):
        spec = CellSpec("hlstm", 2, 2, (2,), 1, 0.0, 0.0)
        model = RecurrentModel.initialize(spec, 1, np.random.default_rng(5))
        ds = Task("adding", length=4, n_train=3, n_eval=1).dataset("train")
        grads = [per_sample_grad(model, ds, i) for i in range(3)]
        avg = accumulate_avg_grads(model, ds, batch_size=2)
        for name in model.masks:
            oracle = np.abs((grads[0][name] + grads[1][name] + grads[2][name]) / 3.0)
            np.testing.assert_allclose(avg[name], oracle, rtol=1e-12, atol=1e-16)

    def test_covers_dormant_entries(self):
        run = tiny_run()
        for m in run.model.masks.values():
            m[...] = False
            m[0, 0] = True
        run.model.apply_masks()
        before = {k: v.copy() for k, v in run.model.params.items()}
        avg = accumulate_avg_grads(run.model, run.task.dataset("train"))
        assert any(np.any(avg[k][~run.model.masks[k]] > 0) for k in avg)
        assert all(before[k].tobytes() == v.tobytes() for k, v in run.model.params.items())

    def test_empty(self):
        run = tiny_run()
        with pytest.raises(ContractError):
            accumulate_avg_grads(run.model, run.task.dataset("train").subset([]))


def oracle_new_positions(mask, grad, alpha):
    ordered = sorted(np.abs(grad).ravel().tolist())
    t = ordered[max(math.ceil(round(alpha * len(ordered), 9)), 1) - 1]
    return (~mask) & (np.abs(grad) > t)


class TestGrowth:
    def test_alpha_one_keeps_sparsity(self):
        run = tiny_run(alpha=1.0, seed_sparsity=0.5)
        seed_model(run)
        masks = {k: v.copy() for k, v in run.model.masks.items()}
        growth_phase(run)
        assert all((run.model.masks[k] == masks[k]).all() for k in masks)

    def test_matches_policy_oracle(self):
        run = tiny_run(seed_sparsity=0.5)
        seed_model(run)
        before = {k: v.copy() for k, v in run.model.masks.items()}
        avg = accumulate_avg_grads(run.model, run.task.dataset("train"))
        growth_epoch(run, run.task.dataset("train"), run.task.dataset("eval"))
        for k in before:
            expected = before[k] | oracle_new_positions(before[k], avg[k], run.schedule.alpha)
            assert (run.model.masks[k] == expected).all()

    def test_seed_half_grows_below_half(self):
        run = tiny_run(seed_sparsity=0.5, growth_epochs=3)
        seed_model(run)
        growth_phase(run)
        total = sum(m.size for m in run.model.masks.values())
        popcount = sum(int(m.sum()) for m in run.model.masks.values())
        assert total_sparsity(run.model) == pytest.approx(1 - popcount / total)
        assert total_sparsity(run.model) < 0.5
        traj = [h["sparsity"] for h in run.history]
        assert all(b <= a for a, b in zip(traj, traj[1:]))

    def test_converged_model_grows_only_strict_exceeders(self):
        run = tiny_run(seed_sparsity=0.5)
        seed_model(run)
        for v in run.model.params.values():
            v *= 1e-8
        before = {k: v.copy() for k, v in run.model.masks.items()}
        avg = accumulate_avg_grads(run.model, run.task.dataset("train"))
        growth_epoch(run, run.task.dataset("train"), run.task.dataset("eval"))
        for k in before:
            grown = run.model.masks[k] & ~before[k]
            assert (grown == oracle_new_positions(before[k], avg[k], run.schedule.alpha)).all()

    def test_disabled_growth_is_pure_pruning(self):
        run = tiny_run(seed_sparsity=0.0, growth_epochs=0, accuracy_threshold=10.0)
        gp_pipeline(run)
        assert not any(h["phase"] == "growth" for h in run.history)
        seed = stage_reports(run)["Seed"]
        assert seed[-1].sparsity == 0.0
        assert stage_reports(run)["Post-growth"][-1].sparsity == 0.0
        assert total_sparsity(run.model) > 0.0


class TestPrune:
    def test_degenerate_beta_is_one_noop(self):
        run = tiny_run(beta=1e-6, accuracy_threshold=10.0)
        before = run.model.copy()
        prune_phase(run)
        assert run.progress["prune_iter"] == 0
        assert [e.get("event") for e in run.events.records] == ["no-progress"]
        assert all(before.params[k].tobytes() == v.tobytes() for k, v in run.model.params.items())

    def test_unsatisfiable_mse_threshold(self, caplog):
        run = tiny_run(accuracy_threshold=-np.inf)
        before = run.model.copy()
        prune_phase(run)
        assert "misses the threshold" in caplog.text
        assert run.progress["prune_done"]
        assert all(before.params[k].tobytes() == v.tobytes() for k, v in run.model.params.items())
        assert all((before.masks[k] == v).all() for k, v in run.model.masks.items())

    def test_unsatisfiable_accuracy_threshold(self):
        task = Task("copy", payload_len=2, blank_len=1, vocab=4, n_train=8, n_eval=4)
        run = new_run(CellSpec("hlstm", 6, 4, (4,), 1, 0, 0), task,
                      GpSchedule(accuracy_threshold=math.inf), OptimizerState(), None, 8, 0)
        before = run.model.copy()
        prune_phase(run)
        assert all(before.params[k].tobytes() == v.tobytes() for k, v in run.model.params.items())

    def test_rollback_restores_everything(self):
        run = tiny_run(accuracy_threshold=10.0)
        train_epoch(run, run.task.dataset("train"))
        # met before pruning, impossible after: the iteration must roll back
        run.schedule.accuracy_threshold = evaluate(run.model, run.task) + 1e-12
        run.schedule.beta = 0.9
        run.schedule.retrain_epochs_per_prune = 1
        snap = run.snapshot()
        assert prune_iteration(run) is False
        assert run.epoch == snap["epoch"] and run.history == snap["history"]
        assert run.rng.bit_generator.state == snap["rng"]
        for k, v in snap["model"].params.items():
            assert v.tobytes() == run.model.params[k].tobytes()
        for k, v in snap["opt"].buffers.items():
            assert v.tobytes() == run.opt.buffers[k].tobytes()

    def test_result_meets_threshold_and_sparsity_grows(self):
        run = tiny_run(max_prune_iterations=4)
        for _ in range(3):
            train_epoch(run, run.task.dataset("train"))
        threshold = 1.5 * evaluate(run.model, run.task)
        run.schedule.accuracy_threshold = threshold
        prune_phase(run)
        assert run.progress["prune_iter"] >= 1
        assert meets_threshold("mse", evaluate(run.model, run.task), threshold)
        traj = [h["sparsity"] for h in run.history if h["phase"] == "prune"]
        assert all(b >= a for a, b in zip(traj, traj[1:]))

    def test_copy_task_continuation(self):
        task = Task("copy", payload_len=5, blank_len=0, vocab=4, n_train=2000, n_eval=100, seed=0)
        sched = GpSchedule(beta=0.2, accuracy_threshold=0.99, retrain_epochs_per_prune=10)
        run = new_run(CellSpec("hlstm", 6, 16, (16,), 1, 0, 0), task, sched,
                      OptimizerState("adam", lr=1e-2, clip_norm=1.0), LrSchedule("constant", 1e-2), 32, 0, "tanh")
        for _ in range(25):
            train_epoch(run, task.dataset("train"))
        assert evaluate(run.model, task) >= 0.99
        prune_phase(run)
        assert run.progress["prune_iter"] >= 1
        assert evaluate(run.model, task) >= 0.99
        committed = run.model.copy()
        # one more prune+retrain past the stopping point misses the threshold
        assert prune_iteration(run) is False
        assert all(committed.params[k].tobytes() == v.tobytes() for k, v in run.model.params.items())


class TestActivationShift:
    def _single_unit_model(self, bias):
        spec = CellSpec("hlstm", 1, 1, (1,), 1, 0.0, 0.0)
        m = RecurrentModel.initialize(spec, 1, np.random.default_rng(0))
        for k, v in m.params.items():
            v[...] = 0.0
            if k.endswith("h0.b"):
                v[...] = bias
        return m

    def _observe(self, model):
        seen = []
        model.forward(Tape(), np.ones((1, 1, 1)), observe=seen)
        return np.concatenate([a.ravel() for a in seen])

    def test_negative_preactivation(self):
        m = self._single_unit_model(-3.0)
        np.testing.assert_allclose(self._observe(m), -0.03, rtol=1e-15)
        run = Run(m, Task("adding", length=2, n_train=1, n_eval=1))
        activation_shift(run, epochs=0)
        assert run.model.activation == "relu"
        assert np.all(self._observe(run.model) == 0.0)

    def test_nonnegative_preactivations_unchanged(self, rng):
        spec = CellSpec("hlstm", 2, 4, (3, 3), 2, 0.0, 0.0)
        m = RecurrentModel.initialize(spec, 1, rng)
        for v in m.params.values():
            np.abs(v, out=v)
        x = rng.random((5, 6, 2))
        before = m.predict(x, (5,))
        seen = []
        m.forward(Tape(), x, observe=seen)
        assert all(np.all(a >= 0) for a in seen)
        m.activation = "relu"
        assert m.predict(x, (5,)).tobytes() == before.tobytes()

    def test_already_relu_is_noop(self):
        run = tiny_run(activation="relu")
        before = run.model.copy()
        activation_shift(run, epochs=3)
        assert run.epoch == 0 and run.progress["shift"]
        assert all(before.params[k].tobytes() == v.tobytes() for k, v in run.model.params.items())


def test_pipeline_determinism():
    a, b = gp_pipeline(tiny_run(3)), gp_pipeline(tiny_run(3))
    assert encode(checkpoint_from_run(a, "final")) == encode(checkpoint_from_run(b, "final"))


def test_pipeline_tags_and_hygiene(tmp_path):
    tags = []
    run = tiny_run(seed_sparsity=0.5)
    run.events = EventLog(str(tmp_path / "events.jsonl"))
    gp_pipeline(run, lambda r, tag: tags.append(tag))
    assert tags[0] == "seed" and tags[-1] == "final"
    assert tags.index("post-growth") < tags.index("post-shift") < tags.index("trained")
    assert "growth-epoch-1" in tags and "train-epoch-1" in tags
    for k, m in run.model.masks.items():
        assert np.all(run.model.params[k][~m] == 0.0)
    lines = (tmp_path / "events.jsonl").read_text().splitlines()
    recs = [json.loads(line) for line in lines]
    assert len(recs) == len(run.events.records)
    assert {"phase", "epoch", "loss", "metric", "sparsity", "time"} <= set(recs[-1])
    assert set(stage_reports(run)) == {"Seed", "Post-growth", "Post-pruning"}
