"""Parameter, FLOPs, ReLU-activation and latency accounting.

Conventions: parameters count recurrent weights and biases (the readout
head is excluded); FLOPs are 2 per multiply-accumulate, so always twice
the active parameter count.
"""
import gc
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from hlstm.cells import LSTM_GATES, CellSpec, RecurrentModel
from hlstm.numcore import ContractError, Tape
from hlstm.sparsity import layer_label


def layer_param_count(kind, d, n, hidden=()):
    """Dense weights plus biases of one recurrent layer."""
    if kind == "gru":
        return 3 * ((d + n) * n + n)
    widths = [d + n, *hidden, n]
    per_gate = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
    return 4 * per_gate


@dataclass
class LayerSize:
    layer: str
    dense: int
    active: int

    @property
    def flops(self):
        return 2 * self.active

    @property
    def cr(self):
        return self.dense / self.active if self.active else float("inf")


@dataclass
class SizeReport:
    layers: list = field(default_factory=list)

    @property
    def dense(self):
        return sum(l.dense for l in self.layers)

    @property
    def active(self):
        return sum(l.active for l in self.layers)

    @property
    def flops(self):
        return 2 * self.active

    @property
    def cr(self):
        return self.dense / self.active if self.active else float("inf")


def count_params(obj):
    """:class:`SizeReport` for a :class:`CellSpec` (dense) or a model (nnz from masks)."""
    spec = obj if isinstance(obj, CellSpec) else obj.spec
    report = SizeReport()
    for k in range(spec.stack_depth):
        dense = layer_param_count(spec.kind, spec.layer_input_width(k), spec.cell_width, spec.hidden_layer_widths)
        active = dense
        if isinstance(obj, RecurrentModel):
            names = obj.masked_names(k)
            masked_total = sum(obj.masks[n].size for n in names)
            active = dense - masked_total + sum(int(np.count_nonzero(obj.masks[n])) for n in names)
        report.layers.append(LayerSize(layer_label(spec, k), dense, active))
    return report


def count_flops(report):
    """FLOPs per time step: 2 x active parameters."""
    if isinstance(report, (CellSpec, RecurrentModel)):
        report = count_params(report)
    return 2 * report.active


def format_count(n):
    """Compact count, e.g. ``2.1M`` or ``394K``."""
    if n >= 1e9:
        return f"{n / 1e9:.1f}B"
    if n >= 1e6:
        return f"{n / 1e6:.1f}M"
    if n >= 1e3:
        return f"{n / 1e3:.0f}K"
    return str(int(n))


def render_size_table(entries):
    """Aligned table of ``(name, model_or_spec)`` rows; ``latency`` may follow as a third item."""
    header = ["Model", "#Layers", "#Param", "FLOPs", "CR"]
    with_latency = any(len(e) > 2 for e in entries)
    if with_latency:
        header.append("Latency")
    rows = []
    for entry in entries:
        name, obj = entry[0], entry[1]
        spec = obj if isinstance(obj, CellSpec) else obj.spec
        r = count_params(obj)
        row = [name, str(spec.stack_depth), format_count(r.active), format_count(r.flops), f"{r.cr:.2f}x"]
        if with_latency:
            row.append(f"{entry[2] * 1e3:.2f} ms" if len(entry) > 2 else "-")
        rows.append(row)
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
    rule = "-" * len(fmt(header))
    return "\n".join([rule, fmt(header), rule, *(fmt(r) for r in rows), rule])


@dataclass
class ReluStats:
    """Per hidden layer: ``{"layer", "hidden", "fraction", "projection_flops", "saved_flops"}``.

    FLOPs are per sample per time step. ``flagged`` is set when the model
    still runs leaky ReLU, whose outputs are almost never exactly zero.
    """

    per_layer: list
    fraction: float
    flops: int
    saved_flops: float
    flagged: bool

    @property
    def effective_flops(self):
        return self.flops - self.saved_flops


def relu_activation_stats(model, dataset, batch_size=512):
    """Fraction of strictly positive DNN-gate hidden outputs over ``dataset``.

    A zero output of hidden unit ``u`` skips the multiply-accumulates of
    column ``u`` in the next projection, so the expected saving is summed
    per unit: ``(1 - fraction_u) * 2 * nnz(column u)``.
    """
    spec = model.spec
    if spec.kind != "hlstm" or not spec.hidden_layer_widths:
        raise ContractError("activation statistics need an H-LSTM with DNN gates")
    H = len(spec.hidden_layer_widths)
    steps = dataset.inputs.shape[1]
    positive = [[None] * H for _ in range(spec.stack_depth)]
    count = 0
    for s in range(0, len(dataset), batch_size):
        obs = []
        model.forward(Tape(), dataset.inputs[s:s + batch_size], train=False, observe=obs, grad=False)
        count += obs[0].shape[0] * steps
        for i, a in enumerate(obs):
            k, j = i // (steps * H), i % H
            p = (a > 0).sum(axis=0)
            positive[k][j] = p if positive[k][j] is None else positive[k][j] + p
    per_layer, saved_total, pos_total, n_total = [], 0.0, 0, 0
    for k in range(spec.stack_depth):
        for j, m in enumerate(spec.hidden_layer_widths):
            nxt = f"h{j + 1}" if j + 1 < H else "out"
            frac_u = positive[k][j] / count
            proj, saved = 0, 0.0
            for g, gate in enumerate(LSTM_GATES):
                col_nnz = model.masks[f"l{k}.{gate}.{nxt}.W"].sum(axis=0)
                proj += 2 * int(col_nnz.sum())
                saved += float(np.sum((1.0 - frac_u[g * m:(g + 1) * m]) * 2 * col_nnz))
            frac = float(positive[k][j].sum() / (count * 4 * m))
            per_layer.append({"layer": k, "hidden": j, "fraction": frac, "projection_flops": proj, "saved_flops": saved})
            saved_total += saved
            pos_total += int(positive[k][j].sum())
            n_total += count * 4 * m
    return ReluStats(per_layer, pos_total / n_total, count_flops(model), saved_total, model.activation != "relu")


def measure_latency(model, inputs, repetitions=5, warmup=1):
    """Median wall-clock seconds of an eval-mode forward over ``inputs`` ``(batch, T, d)``."""
    if repetitions < 3:
        raise ContractError("repetitions must be >= 3")
    inputs = np.asarray(inputs, dtype=np.float64)
    steps = (inputs.shape[1] - 1,)
    for _ in range(warmup):
        model.predict(inputs, steps)
    times = []
    # as in timeit: keep collector pauses, which scale with the caller's heap, out of the timings
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repetitions):
            t0 = time.perf_counter()
            model.predict(inputs, steps)
            times.append(time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return statistics.median(times)
