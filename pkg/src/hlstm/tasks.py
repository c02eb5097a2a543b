"""Synthetic sequence benchmarks: adding problem, copy task, character LM.

A :class:`Task` regenerates identical train/eval splits from its seed.
Tokens are one-hot encoded at the cell input width.
"""
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from hlstm.numcore import ContractError, ShapeError

METRICS = {"adding": "mse", "copy": "token_accuracy", "char_lm": "bits_per_char"}
LOWER_IS_BETTER = {"mse": True, "token_accuracy": False, "bits_per_char": True}


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    readout_steps: tuple
    metric: str
    output_width: int

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def loss(self):
        return "mse" if self.metric == "mse" else "xent"

    def subset(self, idx):
        return Dataset(self.inputs[idx], self.targets[idx], self.readout_steps, self.metric, self.output_width)


def gen_adding(n_samples, length, rng):
    """Each step is ``(value, marker)``; the target is the sum of the two marked values."""
    if length < 2:
        raise ContractError("adding problem needs length >= 2")
    values = rng.random((n_samples, length))
    markers = np.zeros((n_samples, length))
    for s in range(n_samples):
        markers[s, rng.choice(length, size=2, replace=False)] = 1.0
    inputs = np.stack([values, markers], axis=2)
    targets = (values * markers).sum(axis=1, keepdims=True)
    return Dataset(inputs, targets, (length - 1,), "mse", 1)


def copy_layout(payload_len, blank_len):
    """Return ``(sequence_length, cue_step)``; outputs are read from the cue on."""
    return 2 * payload_len + blank_len, payload_len + blank_len


def encode_copy(payloads, blank_len, vocab):
    """One-hot copy-task inputs for integer ``payloads`` of shape ``(N, P)``.

    Token ``vocab`` is the blank, ``vocab + 1`` the recall cue.
    """
    payloads = np.asarray(payloads)
    n, p = payloads.shape
    length, cue = copy_layout(p, blank_len)
    tokens = np.full((n, length), vocab)
    tokens[:, :p] = payloads
    tokens[:, cue] = vocab + 1
    inputs = np.eye(vocab + 2)[tokens]
    return Dataset(inputs, payloads.copy(), tuple(range(cue, cue + p)), "token_accuracy", vocab)


def gen_copy(n_samples, payload_len, blank_len, vocab, rng, exclude=None):
    """Copy task: echo the payload after the cue. ``exclude`` holds payloads to avoid."""
    if vocab < 2:
        raise ContractError("copy task needs vocab >= 2")
    if payload_len < 1 or blank_len < 0:
        raise ContractError("payload_len must be >= 1 and blank_len >= 0")
    exclude = set() if exclude is None else exclude
    space = vocab ** payload_len
    if exclude and n_samples > space - len(exclude):
        raise ContractError("not enough distinct payloads for a disjoint split")
    rows = []
    while len(rows) < n_samples:
        p = rng.integers(vocab, size=payload_len)
        if exclude and tuple(p) in exclude:
            continue
        rows.append(p)
    return encode_copy(np.array(rows).reshape(n_samples, payload_len), blank_len, vocab)


def load_corpus():
    return resources.files("hlstm").joinpath("data/corpus.txt").read_text(encoding="utf-8")


def gen_char_lm(n_samples, length, text, alphabet, lo, hi, rng):
    """Next-character windows drawn from ``text[lo:hi]``."""
    index = {ch: k for k, ch in enumerate(alphabet)}
    ids = np.array([index[ch] for ch in text[lo:hi]])
    if ids.size < length + 1:
        raise ContractError("corpus region shorter than one window")
    starts = rng.integers(0, ids.size - length, size=n_samples)
    windows = np.stack([ids[s:s + length + 1] for s in starts])
    vocab = len(alphabet)
    inputs = np.eye(vocab)[windows[:, :-1]]
    return Dataset(inputs, windows[:, 1:], tuple(range(length)), "bits_per_char", vocab)


@dataclass
class Task:
    kind: str = "adding"
    length: int = 30
    payload_len: int = 5
    blank_len: int = 10
    vocab: int = 8
    n_train: int = 2000
    n_eval: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.kind not in METRICS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("split sizes must be positive")
        self._cache = None

    @property
    def metric(self):
        return METRICS[self.kind]

    def _alphabet(self):
        return sorted(set(load_corpus()))

    @property
    def input_width(self):
        if self.kind == "adding":
            return 2
        if self.kind == "copy":
            return self.vocab + 2
        return len(self._alphabet())

    @property
    def output_width(self):
        if self.kind == "adding":
            return 1
        if self.kind == "copy":
            return self.vocab
        return len(self._alphabet())

    def splits(self):
        if self._cache is None:
            train_rng, eval_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(2))
            if self.kind == "adding":
                train = gen_adding(self.n_train, self.length, train_rng)
                ev = gen_adding(self.n_eval, self.length, eval_rng)
            elif self.kind == "copy":
                train = gen_copy(self.n_train, self.payload_len, self.blank_len, self.vocab, train_rng)
                seen = {tuple(r) for r in train.targets}
                ev = gen_copy(self.n_eval, self.payload_len, self.blank_len, self.vocab, eval_rng, exclude=seen)
            else:
                text = load_corpus()
                alphabet = self._alphabet()
                cut = int(len(text) * 0.9)
                train = gen_char_lm(self.n_train, self.length, text, alphabet, 0, cut, train_rng)
                ev = gen_char_lm(self.n_eval, self.length, text, alphabet, cut, len(text), eval_rng)
            self._cache = {"train": train, "eval": ev}
        return self._cache

    def dataset(self, split):
        if split not in ("train", "eval"):
            raise ValueError(f"unknown split {split!r}")
        return self.splits()[split]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def score(predictions, dataset):
    """Metric of ``predictions`` shaped ``(N, len(readout_steps), output_width)``."""
    pred = np.asarray(predictions, dtype=np.float64)
    n, k = len(dataset), len(dataset.readout_steps)
    if pred.shape != (n, k, dataset.output_width):
        raise ShapeError(f"predictions {pred.shape} != {(n, k, dataset.output_width)}")
    if dataset.metric == "mse":
        diff = pred.reshape(n, -1) - dataset.targets.reshape(n, -1)
        return float(np.mean(diff * diff))
    targets = np.asarray(dataset.targets).reshape(n, k)
    if dataset.metric == "token_accuracy":
        return float(np.mean(pred.argmax(axis=2) == targets))
    logits = pred.reshape(n * k, -1)
    t = targets.reshape(-1)
    rows = np.arange(t.size)
    top = logits.max(axis=1)
    tl = logits[rows, t]
    # log2 sum exp(l - l_t), shifted by the row max for stability
    bits = np.log2(np.exp(logits - top[:, None]).sum(axis=1)) + (top - tl) / math.log(2.0)
    return math.fsum(bits.tolist()) / bits.size


def evaluate(model, task, split="eval"):
    """Eval-mode metric of ``model`` (anything with ``predict(inputs, steps)``)."""
    ds = task if isinstance(task, Dataset) else task.dataset(split)
    return score(model.predict(ds.inputs, ds.readout_steps), ds)


def meets_threshold(metric_name, value, threshold):
    if LOWER_IS_BETTER[metric_name]:
        return value <= threshold
    return value >= threshold


def export_dataset(dataset, path):
    """Write a dataset as line-delimited JSON: one header line, then one record per sample."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "metric": dataset.metric,
            "output_width": dataset.output_width,
            "readout_steps": list(dataset.readout_steps),
            "target_dtype": str(np.asarray(dataset.targets).dtype),
        }
        fh.write(json.dumps(header) + "\n")
        for x, y in zip(dataset.inputs, dataset.targets):
            fh.write(json.dumps({"input": x.tolist(), "target": np.asarray(y).tolist()}) + "\n")


def import_dataset(path):
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    inputs = np.array([r["input"] for r in recs], dtype=np.float64)
    targets = np.array([r["target"] for r in recs], dtype=header["target_dtype"])
    return Dataset(inputs, targets, tuple(header["readout_steps"]), header["metric"], header["output_width"])

