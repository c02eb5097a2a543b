import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hlstm.numcore import ContractError, ShapeError
from hlstm.tasks import (
    Task,
    copy_layout,
    encode_copy,
    evaluate,
    export_dataset,
    gen_adding,
    gen_copy,
    import_dataset,
    load_corpus,
    meets_threshold,
    score,
)


class Constant:
    def __init__(self, value, width=1):
        self.value, self.width = value, width

    def predict(self, inputs, steps):
        return np.full((inputs.shape[0], len(steps), self.width), self.value)


class CopyLookup:
    """Reads the payload straight from the one-hot inputs."""

    def __init__(self, vocab):
        self.vocab = vocab

    def predict(self, inputs, steps):
        payload = inputs[:, :len(steps), :self.vocab]
        return payload * 10.0


class TestAdding:
    def test_marked_sum(self):
        ds = gen_adding(50, 6, np.random.default_rng(0))
        x = ds.inputs
        assert np.all(x[:, :, 1].sum(axis=1) == 2)
        np.testing.assert_allclose(ds.targets[:, 0], (x[:, :, 0] * x[:, :, 1]).sum(axis=1), rtol=0, atol=0)
        assert np.all((x[:, :, 0] >= 0) & (x[:, :, 0] <= 1))

    def test_closed_examples(self):
        x = np.zeros((2, 4, 2))
        x[0, 1], x[0, 3] = (0.2, 1), (0.7, 1)
        x[1, 0], x[1, 2] = (0.0, 1), (0.0, 1)
        targets = (x[:, :, 0] * x[:, :, 1]).sum(axis=1)
        assert targets[0] == pytest.approx(0.9) and targets[1] == 0.0

    def test_target_mean(self):
        ds = gen_adding(1000, 10, np.random.default_rng(11))
        assert abs(ds.targets.mean() - 1.0) < 0.05

    def test_short_sequence(self):
        with pytest.raises(ContractError):
            gen_adding(3, 1, np.random.default_rng(0))


class TestCopy:
    def test_layout(self):
        ds = encode_copy([[0, 1]], 3, 4)
        length, cue = copy_layout(2, 3)
        assert ds.inputs.shape == (1, length, 6) == (1, 7, 6)
        tokens = ds.inputs[0].argmax(axis=1).tolist()
        assert tokens == [0, 1, 4, 4, 4, 5, 4]
        assert ds.readout_steps == (5, 6) and ds.targets.tolist() == [[0, 1]]

    def test_zero_blank_echoes_immediately(self):
        ds = encode_copy([[2, 3, 1]], 0, 4)
        assert ds.readout_steps == (3, 4, 5)
        assert ds.inputs[0, 3].argmax() == 5

    def test_vocab_contract(self):
        with pytest.raises(ContractError):
            gen_copy(2, 3, 1, 1, np.random.default_rng(0))

    def test_chance_accuracy(self):
        task = Task("copy", payload_len=5, blank_len=10, vocab=8, n_train=200, n_eval=2000, seed=4)
        r = np.random.default_rng(9)

        class Random:
            def predict(self, inputs, steps):
                return r.normal(size=(inputs.shape[0], len(steps), 8))

        assert abs(evaluate(Random(), task) - 1 / 8) < 0.02

    def test_lookup_model_is_perfect(self):
        task = Task("copy", payload_len=4, blank_len=2, vocab=6, n_train=20, n_eval=30)
        assert evaluate(CopyLookup(6), task) == 1.0

    def test_train_eval_disjoint(self):
        task = Task("copy", payload_len=3, blank_len=1, vocab=3, n_train=20, n_eval=5)
        train = {tuple(t) for t in task.dataset("train").targets}
        ev = {tuple(t) for t in task.dataset("eval").targets}
        assert not train & ev


class TestMetrics:
    def test_constant_model_mse(self):
        task = Task("adding", length=8, n_train=10, n_eval=300, seed=2)
        y = task.dataset("eval").targets[:, 0]
        c = 0.8
        # mean squared error of a constant equals variance plus squared bias
        closed = float(np.var(y) + (np.mean(y) - c) ** 2)
        assert evaluate(Constant(c), task) == pytest.approx(closed, rel=1e-12)

    def test_uniform_predictor_bits(self):
        task = Task("char_lm", length=12, n_train=5, n_eval=40)
        v = task.output_width
        assert evaluate(Constant(0.0, v), task) == math.log2(v)

    def test_bits_per_char_matches_direct_formula(self, rng):
        task = Task("char_lm", length=6, n_train=5, n_eval=8)
        ds = task.dataset("eval")
        logits = rng.normal(size=(8, 6, task.output_width))
        p = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
        direct = -np.mean(np.log2(np.take_along_axis(p, ds.targets[:, :, None], axis=2)))
        assert score(logits, ds) == pytest.approx(direct, rel=1e-12)

    def test_shape_mismatch(self):
        task = Task("adding", length=4, n_train=3, n_eval=3)
        with pytest.raises(ShapeError):
            evaluate(Constant(0.0, 2), task)

    def test_thresholds(self):
        assert meets_threshold("mse", 0.05, 0.05) and not meets_threshold("mse", 0.06, 0.05)
        assert meets_threshold("token_accuracy", 0.99, 0.99) and not meets_threshold("token_accuracy", 0.98, 0.99)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_order_invariance(self, seed):
        task = Task("adding", length=5, n_train=3, n_eval=40)
        ds = task.dataset("eval")
        preds = np.random.default_rng(seed).random((40, 1, 1))
        perm = np.random.default_rng(seed + 1).permutation(40)
        assert score(preds[perm], ds.subset(perm)) == pytest.approx(score(preds, ds), rel=1e-13)


@pytest.mark.parametrize("kind", ["adding", "copy", "char_lm"])
def test_regeneration_is_bit_identical(kind):
    a = Task(kind, length=8, n_train=20, n_eval=10, seed=5)
    b = Task(kind, length=8, n_train=20, n_eval=10, seed=5)
    for split in ("train", "eval"):
        assert a.dataset(split).inputs.tobytes() == b.dataset(split).inputs.tobytes()
        assert np.asarray(a.dataset(split).targets).tobytes() == np.asarray(b.dataset(split).targets).tobytes()
    c = Task(kind, length=8, n_train=20, n_eval=10, seed=6)
    assert c.dataset("train").inputs.tobytes() != a.dataset("train").inputs.tobytes()


def test_char_lm_splits_use_disjoint_text():
    text = load_corpus()
    assert len(text) > 5000
    task = Task("char_lm", length=10, n_train=30, n_eval=30)
    ds = task.dataset("train")
    assert ds.inputs.shape == (30, 10, task.input_width)
    assert np.all(ds.inputs[:, 1:].argmax(axis=2) == ds.targets[:, :-1])


@pytest.mark.parametrize("kind", ["adding", "copy"])
def test_export_import_round_trip(tmp_path, kind):
    ds = Task(kind, length=6, n_train=7, n_eval=3).dataset("train")
    path = tmp_path / "ds.jsonl"
    export_dataset(ds, path)
    back = import_dataset(path)
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    assert back.targets.tobytes() == np.asarray(ds.targets).tobytes()
    assert back.readout_steps == ds.readout_steps and back.metric == ds.metric


def test_unknown_kind_and_split():
    with pytest.raises(ValueError):
        Task("captioning")
    with pytest.raises(ValueError):
        Task().dataset("test")
