"""Reverse-mode differentiation over a recorded tape of dense float64 ops.

Values are numpy arrays, normally ``(batch, features)``. Every op appends a
:class:`Node` to the :class:`Tape`; :func:`backward` walks the tape in
reverse and returns a gradient for every named leaf.

Masked weights enter the tape through :meth:`Tape.masked`, whose forward
value is ``where(mask, W, 0)`` and whose backward passes the upstream
gradient through unchanged. The gradient of a dormant weight is therefore
``delta x input``: what it would be if the connection existed.
"""
import numpy as np

from hlstm import kernels


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "name", "op", "needs_grad", "cache")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", name=None, needs_grad=False):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.name = name
        self.needs_grad = needs_grad
        self.cache = None

    def __repr__(self):
        shape = getattr(self.value, "shape", None)
        return f"Node(op={self.op!r}, name={self.name!r}, shape={shape})"


def _acc(node, g):
    if not node.needs_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def _acc_item(node, k, g):
    if not node.needs_grad:
        return
    if node.grad is None:
        node.grad = [None] * len(node.value)
    cur = node.grad[k]
    node.grad[k] = g if cur is None else cur + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Ordered record of primitive ops; nodes are appended in topological order."""

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value, parents, backward_fn, op):
        needs = any(p.needs_grad for p in parents)
        node = Node(value, tuple(parents), backward_fn if needs else None, op, needs_grad=needs)
        self.nodes.append(node)
        return node

    # leaves

    def leaf(self, value, name=None):
        """Differentiable input (a parameter when ``name`` is given)."""
        node = Node(np.asarray(value, dtype=np.float64), name=name, needs_grad=True)
        self.nodes.append(node)
        return node

    def constant(self, value):
        node = Node(np.asarray(value, dtype=np.float64), op="const")
        self.nodes.append(node)
        return node

    def masked(self, w, mask):
        """Effective weight ``W`` with dormant entries forced to +0.0."""
        if w.value.shape != mask.shape:
            raise ShapeError(f"mask shape {mask.shape} != weight shape {w.value.shape}")
        value = np.where(mask, w.value, 0.0)

        def bw(node):
            _acc(w, node.grad)

        return self._push(value, (w,), bw, "masked")

    def masked_stack(self, ws, masks):
        """Row-concatenation of masked weights (one block per gate)."""
        parts = [np.where(m, w.value, 0.0) for w, m in zip(ws, masks)]
        bounds = np.cumsum([0] + [p.shape[0] for p in parts])
        value = np.concatenate(parts, axis=0)

        def bw(node):
            for k, w in enumerate(ws):
                _acc(w, node.grad[bounds[k]:bounds[k + 1]])

        return self._push(value, tuple(ws), bw, "masked_stack")

    def masked_blocks(self, ws, masks):
        """``(K, out, in)`` stack of equally-shaped masked weights."""
        value = np.stack([np.where(m, w.value, 0.0) for w, m in zip(ws, masks)])

        def bw(node):
            for k, w in enumerate(ws):
                _acc(w, node.grad[k])

        return self._push(value, tuple(ws), bw, "masked_blocks")

    def stack_vectors(self, bs):
        value = np.concatenate([b.value for b in bs])
        bounds = np.cumsum([0] + [b.value.shape[0] for b in bs])

        def bw(node):
            for k, b in enumerate(bs):
                _acc(b, node.grad[bounds[k]:bounds[k + 1]])

        return self._push(value, tuple(bs), bw, "stack_vectors")

    # linear algebra

    def affine(self, x, w, b=None):
        """``x @ W.T + b`` for ``x`` of shape ``(batch, in)`` and ``W`` of ``(out, in)``."""
        xv, wv = x.value, w.value
        if xv.shape[-1] != wv.shape[1]:
            raise ShapeError(f"input width {xv.shape[-1]} != weight cols {wv.shape[1]}")
        value = xv @ wv.T
        if b is not None:
            if b.value.shape != (wv.shape[0],):
                raise ShapeError(f"bias shape {b.value.shape} != ({wv.shape[0]},)")
            value = value + b.value
        parents = (x, w) if b is None else (x, w, b)

        def bw(node):
            g = node.grad
            if x.needs_grad:
                _acc(x, g @ wv)
            if w.needs_grad:
                _acc(w, g.T @ xv)
            if b is not None and b.needs_grad:
                _acc(b, g.sum(axis=0))

        return self._push(value, parents, bw, "affine")

    def block_affine(self, x, w, b=None):
        """Block-diagonal affine: block ``k`` of ``x`` through ``W[k]``.

        ``x`` is ``(batch, K*in)``, ``W`` is ``(K, out, in)``, ``b`` is ``(K*out,)``.
        """
        K, out, inp = w.value.shape
        xv = x.value
        if xv.shape[1] != K * inp:
            raise ShapeError(f"input width {xv.shape[1]} != {K}x{inp}")
        batch = xv.shape[0]
        xb = xv.reshape(batch, K, inp).transpose(1, 0, 2)
        yb = np.matmul(xb, w.value.transpose(0, 2, 1))
        value = yb.transpose(1, 0, 2).reshape(batch, K * out)
        if b is not None:
            value = value + b.value
        parents = (x, w) if b is None else (x, w, b)
        wv = w.value

        def bw(node):
            g = node.grad
            gb = g.reshape(batch, K, out).transpose(1, 0, 2)
            if x.needs_grad:
                _acc(x, np.matmul(gb, wv).transpose(1, 0, 2).reshape(batch, K * inp))
            if w.needs_grad:
                _acc(w, np.matmul(gb.transpose(0, 2, 1), xb))
            if b is not None and b.needs_grad:
                _acc(b, g.sum(axis=0))

        return self._push(value, parents, bw, "block_affine")

    # elementwise

    def activation(self, kind, x, slope=0.01):
        code = kernels.ACTIVATION_CODES[kind]
        xv = x.value
        value = kernels.act_forward(code, xv, slope)

        def bw(node):
            _acc(x, kernels.act_backward(code, xv, value, node.grad, slope))

        return self._push(value, (x,), bw, kind)

    def add(self, a, b):
        value = a.value + b.value

        def bw(node):
            _acc(a, _unbroadcast(node.grad, a.value.shape))
            _acc(b, _unbroadcast(node.grad, b.value.shape))

        return self._push(value, (a, b), bw, "add")

    def sub(self, a, b):
        value = a.value - b.value

        def bw(node):
            _acc(a, _unbroadcast(node.grad, a.value.shape))
            _acc(b, _unbroadcast(-node.grad, b.value.shape))

        return self._push(value, (a, b), bw, "sub")

    def mul(self, a, b):
        av, bv = a.value, b.value
        value = av * bv

        def bw(node):
            _acc(a, _unbroadcast(node.grad * bv, av.shape))
            _acc(b, _unbroadcast(node.grad * av, bv.shape))

        return self._push(value, (a, b), bw, "mul")

    def concat(self, xs, axis=-1):
        value = np.concatenate([x.value for x in xs], axis=axis)
        sizes = [x.value.shape[axis] for x in xs]
        bounds = np.cumsum([0] + sizes)

        def bw(node):
            for k, x in enumerate(xs):
                if x.needs_grad:
                    idx = [slice(None)] * node.grad.ndim
                    idx[axis] = slice(bounds[k], bounds[k + 1])
                    _acc(x, node.grad[tuple(idx)])

        return self._push(value, tuple(xs), bw, "concat")

    def slice_cols(self, x, start, stop):
        value = x.value[:, start:stop]
        shape = x.value.shape

        def bw(node):
            g = np.zeros(shape)
            g[:, start:stop] = node.grad
            _acc(x, g)

        return self._push(value, (x,), bw, "slice")

    def stack_steps(self, xs):
        """Stack per-step ``(batch, n)`` values into ``(batch*steps, n)`` rows."""
        batch, n = xs[0].value.shape
        value = np.stack([x.value for x in xs], axis=1).reshape(batch * len(xs), n)

        def bw(node):
            g = node.grad.reshape(batch, len(xs), n)
            for k, x in enumerate(xs):
                _acc(x, g[:, k, :])

        return self._push(value, tuple(xs), bw, "stack_steps")

    def dropout(self, x, p, rng, train):
        """Inverted dropout; identity (no node) when ``p == 0`` or not training."""
        if not train or p <= 0.0:
            return x
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout probability {p} outside [0, 1)")
        keep = (rng.random(x.value.shape) >= p) / (1.0 - p)
        value = x.value * keep

        def bw(node):
            _acc(x, node.grad * keep)

        return self._push(value, (x,), bw, "dropout")

    # fused cell update

    def lstm_cell(self, pre, c_prev):
        """Fused LSTM state update from stacked ``[f|i|o|g]`` pre-activations.

        Returns ``(c, h)`` nodes. The fused node carries the tuple ``(c, h)``.
        """
        gates, c, tanh_c, h = kernels.lstm_pointwise_forward(pre.value, c_prev.value)
        cpv = c_prev.value

        def bw(node):
            dc, dh = node.grad
            dpre, dcp = kernels.lstm_pointwise_backward(dc, dh, gates, cpv, tanh_c)
            _acc(pre, dpre)
            _acc(c_prev, dcp)

        fused = self._push((c, h), (pre, c_prev), bw, "lstm_cell")
        fused.cache = gates
        return self.item(fused, 0), self.item(fused, 1)

    def item(self, x, k):
        def bw(node):
            _acc_item(x, k, node.grad)

        return self._push(x.value[k], (x,), bw, "item")

    # reductions / losses

    def sum(self, x):
        shape = x.value.shape

        def bw(node):
            _acc(x, np.full(shape, float(node.grad)))

        return self._push(np.asarray(x.value.sum()), (x,), bw, "sum")

    def mse(self, pred, target):
        """Mean of squared errors over all elements."""
        t = np.asarray(target, dtype=np.float64).reshape(pred.value.shape)
        diff = pred.value - t
        value = np.asarray(np.mean(diff * diff))

        def bw(node):
            _acc(pred, (2.0 * float(node.grad) / diff.size) * diff)

        return self._push(value, (pred,), bw, "mse")

    def softmax_xent(self, logits, targets):
        """Mean cross-entropy (nats) of integer ``targets`` under ``softmax(logits)``."""
        lv = logits.value
        t = np.asarray(targets).reshape(-1)
        if t.shape[0] != lv.shape[0]:
            raise ShapeError(f"{t.shape[0]} targets for {lv.shape[0]} rows")
        shifted = lv - lv.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        z = e.sum(axis=1, keepdims=True)
        rows = np.arange(lv.shape[0])
        value = np.asarray(np.mean(np.log(z[:, 0]) - shifted[rows, t]))

        def bw(node):
            p = e / z
            p[rows, t] -= 1.0
            _acc(logits, p * (float(node.grad) / lv.shape[0]))

        return self._push(value, (logits,), bw, "softmax_xent")


def backward(tape, loss):
    """Return ``{name: dL/dparam}`` for every named leaf on ``tape``.

    Leaves that do not influence ``loss`` get a zero gradient.
    """
    if np.size(loss.value) != 1:
        raise ContractError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is not None and node.backward_fn is not None:
            node.backward_fn(node)
    grads = {}
    for node in tape.nodes:
        if node.name is not None:
            g = node.grad
            grads[node.name] = np.zeros_like(node.value) if g is None else np.asarray(g)
    return grads


def affine_forward(w, mask, b, x):
    """``(W * M) @ x + b`` for a single vector ``x``."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.shape != (w.shape[1],):
        raise ShapeError(f"x has shape {x.shape}, expected ({w.shape[1]},)")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"b has shape {b.shape}, expected ({w.shape[0]},)")
    if mask is not None and np.shape(mask) != w.shape:
        raise ShapeError(f"mask shape {np.shape(mask)} != weight shape {w.shape}")
    eff = w if mask is None else np.where(mask, w, 0.0)
    return eff @ x + b


def activation(kind, x, slope=0.01):
    """Elementwise activation: sigmoid, tanh, relu or leaky_relu."""
    return kernels.act_forward(kernels.ACTIVATION_CODES[kind], np.asarray(x, dtype=np.float64), slope)
