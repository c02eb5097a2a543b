"""H-LSTM, LSTM and GRU cells, stacking and sequence unrolling.

An H-LSTM replaces each of the four LSTM gate maps with a small network:
zero or more hidden layers (each its own weights) followed by an output
projection and the usual sigmoid/tanh. An H-LSTM with no hidden layers is
an LSTM, and the two share one code path.

During training the four gates of a layer are evaluated together: the first
layer of every gate reads the same ``[x_t, h_{t-1}]`` so their (masked)
weights are row-stacked into one matrix, later layers are block-diagonal.
"""
from dataclasses import asdict, dataclass

import numpy as np

from hlstm.numcore import ContractError, ShapeError, Tape

LSTM_GATES = ("f", "i", "o", "g")
GRU_GATES = ("z", "r", "n")
CELL_KINDS = ("hlstm", "lstm", "gru")
INTERNAL_ACTIVATIONS = ("leaky_relu", "relu", "tanh", "sigmoid")


@dataclass(frozen=True)
class CellSpec:
    kind: str
    input_width: int
    cell_width: int
    hidden_layer_widths: tuple = ()
    stack_depth: int = 1
    io_dropout: float = 0.5
    hidden_dropout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden_layer_widths", tuple(int(w) for w in self.hidden_layer_widths))
        if self.kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.kind!r}")
        if self.kind != "hlstm" and self.hidden_layer_widths:
            raise ValueError(f"{self.kind} cells take no gate hidden layers")
        if self.input_width < 1 or self.cell_width < 1:
            raise ValueError("widths must be positive")
        if any(w < 1 for w in self.hidden_layer_widths):
            raise ValueError("hidden layer widths must be positive")
        if self.stack_depth < 1:
            raise ValueError("stack_depth must be >= 1")
        for name in ("io_dropout", "hidden_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ValueError(f"{name}={p} outside [0, 1)")

    def layer_input_width(self, k):
        return self.input_width if k == 0 else self.cell_width

    def to_dict(self):
        d = asdict(self)
        d["hidden_layer_widths"] = list(self.hidden_layer_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class CellState:
    h: np.ndarray
    c: np.ndarray = None


@dataclass
class DnnGate:
    """One gate: ``hidden_layers`` is a list of ``(W, mask, b, activation)``."""

    hidden_layers: list
    output_proj: tuple
    gate_activation: str
    hidden_dropout: float = 0.0
    name: str = ""


def param_names(spec):
    """Ordered ``(name, shape, masked)`` for every parameter of the stack."""
    out = []
    n = spec.cell_width
    for k in range(spec.stack_depth):
        d = spec.layer_input_width(k)
        if spec.kind == "gru":
            for gate in GRU_GATES:
                out.append((f"l{k}.{gate}.W", (n, d + n), True))
                out.append((f"l{k}.{gate}.b", (n,), False))
            continue
        for gate in LSTM_GATES:
            fan_in = d + n
            for j, m in enumerate(spec.hidden_layer_widths):
                out.append((f"l{k}.{gate}.h{j}.W", (m, fan_in), True))
                out.append((f"l{k}.{gate}.h{j}.b", (m,), False))
                fan_in = m
            out.append((f"l{k}.{gate}.out.W", (n, fan_in), True))
            out.append((f"l{k}.{gate}.out.b", (n,), False))
    return out


class RecurrentModel:
    """A stack of recurrent layers plus a dense linear readout.

    ``params`` maps names to float64 arrays; ``masks`` maps every recurrent
    weight name to a boolean array of the same shape. The readout
    (``head.W``, ``head.b``) is never masked.
    """

    def __init__(self, spec, output_width, params, masks, activation="leaky_relu", slope=0.01):
        if activation not in INTERNAL_ACTIVATIONS:
            raise ValueError(f"unknown internal activation {activation!r}")
        self.spec = spec
        self.output_width = int(output_width)
        self.params = params
        self.masks = masks
        self.activation = activation
        self.slope = slope

    @classmethod
    def initialize(cls, spec, output_width, rng, activation="leaky_relu"):
        """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases, dense masks."""
        params, masks = {}, {}
        for name, shape, masked in param_names(spec):
            if len(shape) == 2:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[1]), size=shape)
            else:
                params[name] = np.zeros(shape)
            if masked:
                masks[name] = np.ones(shape, dtype=bool)
        n = spec.cell_width
        params["head.W"] = rng.normal(0.0, 1.0 / np.sqrt(n), size=(output_width, n))
        params["head.b"] = np.zeros(output_width)
        return cls(spec, output_width, params, masks, activation)

    def copy(self):
        return RecurrentModel(
            self.spec,
            self.output_width,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.masks.items()},
            self.activation,
            self.slope,
        )

    def apply_masks(self):
        """Store +0.0 at every mask-zero position."""
        for name, mask in self.masks.items():
            w = self.params[name]
            w[...] = np.where(mask, w, 0.0)

    def masked_names(self, layer=None):
        if layer is None:
            return list(self.masks)
        prefix = f"l{layer}."
        return [k for k in self.masks if k.startswith(prefix)]

    def gate_chain(self, layer, gate):
        """Weight names of one DNN gate, input side first."""
        names = [f"l{layer}.{gate}.h{j}.W" for j in range(len(self.spec.hidden_layer_widths))]
        return names + [f"l{layer}.{gate}.out.W"]

    def gate(self, layer, gate):
        spec = self.spec
        p, m = self.params, self.masks
        if spec.kind == "gru":
            act = "tanh" if gate == "n" else "sigmoid"
            w = f"l{layer}.{gate}.W"
            return DnnGate([], (p[w], m[w], p[f"l{layer}.{gate}.b"]), act, 0.0, f"l{layer}.{gate}")
        hidden = []
        for j in range(len(spec.hidden_layer_widths)):
            w = f"l{layer}.{gate}.h{j}.W"
            hidden.append((p[w], m[w], p[f"l{layer}.{gate}.h{j}.b"], self.activation))
        w = f"l{layer}.{gate}.out.W"
        return DnnGate(
            hidden,
            (p[w], m[w], p[f"l{layer}.{gate}.out.b"]),
            "tanh" if gate == "g" else "sigmoid",
            spec.hidden_dropout,
            f"l{layer}.{gate}",
        )

    def gates(self, layer):
        names = GRU_GATES if self.spec.kind == "gru" else LSTM_GATES
        return {g: self.gate(layer, g) for g in names}

    # tape construction

    def _leaf(self, tape, name, grad):
        v = self.params[name]
        return tape.leaf(v, name) if grad else tape.constant(v)

    def layer_nodes(self, tape, k, grad=True):
        """Per-tape stacked parameter nodes for layer ``k``."""
        if self.spec.kind == "gru":
            w = [self._leaf(tape, f"l{k}.{g}.W", grad) for g in GRU_GATES]
            b = [self._leaf(tape, f"l{k}.{g}.b", grad) for g in GRU_GATES]
            masks = [self.masks[f"l{k}.{g}.W"] for g in GRU_GATES]
            return {
                "zr_W": tape.masked_stack(w[:2], masks[:2]),
                "zr_b": tape.stack_vectors(b[:2]),
                "n_W": tape.masked(w[2], masks[2]),
                "n_b": b[2],
            }
        layers = []
        prefixes = [f"h{j}" for j in range(len(self.spec.hidden_layer_widths))] + ["out"]
        for j, pre in enumerate(prefixes):
            names = [f"l{k}.{g}.{pre}.W" for g in LSTM_GATES]
            ws = [self._leaf(tape, n, grad) for n in names]
            bs = [self._leaf(tape, f"l{k}.{g}.{pre}.b", grad) for g in LSTM_GATES]
            masks = [self.masks[n] for n in names]
            if j == 0:
                layers.append((tape.masked_stack(ws, masks), tape.stack_vectors(bs)))
            else:
                layers.append((tape.masked_blocks(ws, masks), tape.stack_vectors(bs)))
        return {"layers": layers}

    def forward(self, tape, inputs, train=False, rng=None, initial=None, observe=None, grad=True):
        """Unroll the stack over ``inputs`` of shape ``(batch, T, d)``.

        Returns ``(top_h_nodes, final_states)`` where ``final_states`` holds
        ``(h, c)`` node pairs per layer (``c`` is ``None`` for GRU).
        ``observe``, if a list, collects the hidden-layer activations.
        """
        spec = self.spec
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 3:
            raise ShapeError(f"inputs must be (batch, T, d), got {inputs.shape}")
        batch, steps, d = inputs.shape
        if steps == 0:
            raise ContractError("empty sequence")
        if d != spec.input_width:
            raise ShapeError(f"input width {d} != cell input width {spec.input_width}")
        if train and rng is None and (spec.io_dropout > 0 or spec.hidden_dropout > 0):
            raise ContractError("training-mode forward with dropout needs an rng")
        seq = [tape.dropout(tape.constant(inputs[:, t, :]), spec.io_dropout, rng, train) for t in range(steps)]
        finals = []
        n = spec.cell_width
        for k in range(spec.stack_depth):
            nodes = self.layer_nodes(tape, k, grad)
            if initial is not None:
                h = tape.constant(initial[k].h)
                c = tape.constant(initial[k].c) if initial[k].c is not None else None
            else:
                h = tape.constant(np.zeros((batch, n)))
                c = None if spec.kind == "gru" else tape.constant(np.zeros((batch, n)))
            out = []
            for x in seq:
                if spec.kind == "gru":
                    h = gru_cell(tape, nodes, x, h)
                else:
                    c, h = hlstm_cell(
                        tape, nodes, x, h, c, self.activation, self.slope,
                        spec.hidden_dropout, rng, train, observe,
                    )
                out.append(h)
            finals.append((h, c))
            seq = out
        return seq, finals

    def readout(self, tape, h_nodes, steps, train=False, rng=None, grad=True):
        """Apply output dropout and the linear head at ``steps``; ``(batch*k, out)``."""
        picked = [tape.dropout(h_nodes[t], self.spec.io_dropout, rng, train) for t in steps]
        stacked = picked[0] if len(picked) == 1 else tape.stack_steps(picked)
        w = self._leaf(tape, "head.W", grad)
        b = self._leaf(tape, "head.b", grad)
        return tape.affine(stacked, w, b)

    def predict(self, inputs, steps, batch_size=512):
        """Eval-mode outputs at ``steps``; shape ``(N, len(steps), output_width)``."""
        inputs = np.asarray(inputs, dtype=np.float64)
        outs = []
        for s in range(0, inputs.shape[0], batch_size):
            chunk = inputs[s:s + batch_size]
            tape = Tape()
            hs, _ = self.forward(tape, chunk, train=False, grad=False)
            y = self.readout(tape, hs, steps, grad=False).value
            outs.append(y.reshape(chunk.shape[0], len(steps), self.output_width))
        return np.concatenate(outs, axis=0)


def hlstm_cell(tape, nodes, x, h, c, act, slope, p_drop, rng, train, observe=None):
    """One H-LSTM step on tape nodes; returns ``(c_t, h_t)``."""
    layers = nodes["layers"]
    z = tape.concat([x, h])
    w, b = layers[0]
    a = tape.affine(z, w, b)
    for w, b in layers[1:]:
        a = tape.activation(act, a, slope)
        if observe is not None:
            observe.append(a.value)
        a = tape.dropout(a, p_drop, rng, train)
        a = tape.block_affine(a, w, b)
    return tape.lstm_cell(a, c)


def gru_cell(tape, nodes, x, h):
    """One GRU step: ``h_t = n + z * (h_prev - n)``."""
    n = h.value.shape[1]
    zr = tape.activation("sigmoid", tape.affine(tape.concat([x, h]), nodes["zr_W"], nodes["zr_b"]))
    z = tape.slice_cols(zr, 0, n)
    r = tape.slice_cols(zr, n, 2 * n)
    cand = tape.activation("tanh", tape.affine(tape.concat([x, tape.mul(r, h)]), nodes["n_W"], nodes["n_b"]))
    return tape.add(cand, tape.mul(z, tape.sub(h, cand)))


def _gate_nodes(tape, gates):
    """Stacked nodes for a single layer built from four :class:`DnnGate`."""
    order = [gates[g] for g in LSTM_GATES]
    depth = len(order[0].hidden_layers)
    if any(len(g.hidden_layers) != depth for g in order):
        raise ShapeError("all four gates must have the same number of hidden layers")
    layers = []
    for j in range(depth + 1):
        if j < depth:
            triples = [(g.hidden_layers[j][0], g.hidden_layers[j][1], g.hidden_layers[j][2]) for g in order]
        else:
            triples = [g.output_proj for g in order]
        ws = [tape.leaf(w) for w, _, _ in triples]
        masks = [np.ones(np.shape(w), bool) if m is None else m for w, m, _ in triples]
        bs = [tape.leaf(b) for _, _, b in triples]
        if j == 0:
            layers.append((tape.masked_stack(ws, masks), tape.stack_vectors(bs)))
        else:
            if len({np.shape(w) for w, _, _ in triples}) != 1:
                raise ShapeError("block layers must share one shape across gates")
            layers.append((tape.masked_blocks(ws, masks), tape.stack_vectors(bs)))
    return {"layers": layers}


def _as_batch(v):
    v = np.asarray(v, dtype=np.float64)
    return v[None, :] if v.ndim == 1 else v


def hlstm_step(gates, x_t, state, mode="eval", rng=None):
    """Single H-LSTM step on arrays.

    ``gates`` maps ``f, i, o, g`` to :class:`DnnGate`. Vectors or
    ``(batch, width)`` arrays are accepted; the result matches the input rank.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    vector = np.ndim(x_t) == 1
    x, h, c = _as_batch(x_t), _as_batch(state.h), _as_batch(state.c)
    n = h.shape[1]
    first = gates["f"].hidden_layers[0][0] if gates["f"].hidden_layers else gates["f"].output_proj[0]
    if np.shape(first)[1] != x.shape[1] + n:
        raise ShapeError(f"gate input width {np.shape(first)[1]} != {x.shape[1]} + {n}")
    act = gates["f"].hidden_layers[0][3] if gates["f"].hidden_layers else "relu"
    tape = Tape()
    nodes = _gate_nodes(tape, gates)
    c_node, h_node = hlstm_cell(
        tape, nodes, tape.constant(x), tape.constant(h), tape.constant(c),
        act, 0.01, gates["f"].hidden_dropout, rng, mode == "train",
    )
    if vector:
        return CellState(h_node.value[0], c_node.value[0])
    return CellState(h_node.value, c_node.value)


def lstm_step(params, x_t, state):
    """Standard LSTM step; ``params`` maps each gate to ``(W, b)`` or ``(W, mask, b)``."""
    gates = {}
    for g in LSTM_GATES:
        p = params[g]
        w, m, b = (p[0], None, p[1]) if len(p) == 2 else p
        gates[g] = DnnGate([], (w, m, b), "tanh" if g == "g" else "sigmoid")
    return hlstm_step(gates, x_t, state)


def gru_step(params, x_t, h_prev):
    """Standard GRU step; ``params`` maps ``z, r, n`` to ``(W, b)`` or ``(W, mask, b)``."""
    vector = np.ndim(x_t) == 1
    x, h = _as_batch(x_t), _as_batch(h_prev)
    tape = Tape()
    ws, bs, ms = [], [], []
    for g in GRU_GATES:
        p = params[g]
        w, m, b = (p[0], None, p[1]) if len(p) == 2 else p
        if np.shape(w) != (h.shape[1], x.shape[1] + h.shape[1]):
            raise ShapeError(f"GRU gate {g} weight shape {np.shape(w)} mismatched")
        ws.append(tape.leaf(w))
        bs.append(tape.leaf(b))
        ms.append(np.ones(np.shape(w), bool) if m is None else m)
    nodes = {
        "zr_W": tape.masked_stack(ws[:2], ms[:2]),
        "zr_b": tape.stack_vectors(bs[:2]),
        "n_W": tape.masked(ws[2], ms[2]),
        "n_b": bs[2],
    }
    out = gru_cell(tape, nodes, tape.constant(x), tape.constant(h)).value
    return out[0] if vector else out


def unroll(model, sequence, mode="eval", rng=None, initial=None):
    """Run ``model`` over ``sequence`` (``(T, d)`` or ``(batch, T, d)``).

    Returns ``(outputs, final_states)``: top-layer ``h_t`` per step and one
    :class:`CellState` per layer.
    """
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise ContractError("sequence must be nonempty")
    single = seq.ndim == 2
    if single:
        seq = seq[None]
    tape = Tape()
    hs, finals = model.forward(tape, seq, train=(mode == "train"), rng=rng, initial=initial, grad=False)
    outs = [h.value[0] if single else h.value for h in hs]
    states = []
    for h, c in finals:
        hv = h.value[0] if single else h.value
        cv = None if c is None else (c.value[0] if single else c.value)
        states.append(CellState(hv, cv))
    return outs, states

