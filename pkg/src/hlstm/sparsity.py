"""Masks, percentile thresholds, and the grow/prune connection policies.

Growth: a dormant connection is activated iff its average-gradient
magnitude is strictly above the nearest-rank ``alpha`` percentile of all
gradient magnitudes in its weight matrix.

Pruning: the ``floor(beta * A)`` active connections of smallest magnitude
are removed (``A`` = active count), ties broken by row-major position.
"""
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from hlstm.numcore import ContractError, ShapeError


@dataclass
class MaskedMatrix:
    """A weight matrix and its binary mask. Both arrays are shared, not copied."""

    weights: np.ndarray
    mask: np.ndarray
    name: str = ""

    def __post_init__(self):
        if self.weights.shape != self.mask.shape:
            raise ShapeError(f"mask shape {self.mask.shape} != weight shape {self.weights.shape}")

    @property
    def active_count(self):
        return int(np.count_nonzero(self.mask))

    @property
    def size(self):
        return int(self.mask.size)

    @property
    def sparsity(self):
        return 1.0 - self.active_count / self.size

    def effective(self):
        return np.where(self.mask, self.weights, 0.0)

    def zero_dormant(self):
        self.weights[...] = np.where(self.mask, self.weights, 0.0)


def masked_layers(model):
    return [MaskedMatrix(model.params[k], model.masks[k], k) for k in model.masks]


def _rank(p, n):
    # ratios are read to 9 decimals so 0.7 * 10 gives rank 7, not 8
    return math.ceil(round(p * n, 9))


def percentile_threshold(values, p):
    """Nearest-rank percentile: the ``ceil(p*N)``-th smallest value (1-based)."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ContractError("percentile of an empty list")
    if not 0.0 < p <= 1.0:
        raise ContractError(f"percentile fraction {p} outside (0, 1]")
    k = max(_rank(p, v.size), 1)
    return float(np.partition(v, k - 1)[k - 1])


def random_mask(shape, sparsity, rng):
    """Uniform mask with exactly ``floor((1 - sparsity) * N)`` active entries."""
    if not 0.0 <= sparsity < 1.0:
        raise ContractError(f"seed sparsity {sparsity} outside [0, 1)")
    size = int(np.prod(shape))
    k = math.floor(round((1.0 - sparsity) * size, 9))
    mask = np.zeros(size, dtype=bool)
    mask[rng.permutation(size)[:k]] = True
    return mask.reshape(shape)


def repair_connectivity(mask, rng):
    """Activate one random entry in every all-zero row, then every all-zero column."""
    mask = mask.copy()
    rows, cols = mask.shape
    for r in np.flatnonzero(~mask.any(axis=1)):
        mask[r, rng.integers(cols)] = True
    for c in np.flatnonzero(~mask.any(axis=0)):
        mask[rng.integers(rows), c] = True
    return mask


def seed_mask(shape, sparsity, rng):
    """Random sparse mask with no all-zero row or column.

    Returns ``(mask, achieved_sparsity)``; repair may push the achieved
    sparsity below the request on small or very sparse shapes.
    """
    mask = repair_connectivity(random_mask(shape, sparsity, rng), rng)
    return mask, 1.0 - np.count_nonzero(mask) / mask.size


def grow(m, avg_grad, alpha):
    """Activate dormant entries whose ``|avg_grad|`` beats the alpha percentile.

    New weights start at 0.0. Returns the boolean array of newly active positions.
    """
    g = np.abs(np.asarray(avg_grad, dtype=np.float64))
    if g.shape != m.mask.shape:
        raise ShapeError(f"gradient shape {g.shape} != mask shape {m.mask.shape}")
    threshold = percentile_threshold(g, alpha)
    new = ~m.mask & (g > threshold)
    m.mask |= new
    m.weights[new] = 0.0
    return new


def prune_selection(weights, mask, beta):
    """Flat indices of the ``floor(beta * A)`` smallest active ``|w|``."""
    active = np.flatnonzero(mask)
    k = math.floor(round(beta * active.size, 9))
    if k == 0:
        return active[:0]
    mags = np.abs(weights.reshape(-1)[active])
    order = np.argsort(mags, kind="stable")
    return active[order[:k]]


def prune_step(m, beta):
    """Deactivate the smallest active weights; returns the pruned-position array."""
    if not 0.0 < beta < 1.0:
        raise ContractError(f"pruning ratio {beta} outside (0, 1)")
    pruned = np.zeros(m.mask.shape, dtype=bool)
    if m.active_count == 0:
        warnings.warn(f"prune_step on {m.name or 'layer'} with no active weights", RuntimeWarning, stacklevel=2)
        return pruned
    idx = prune_selection(m.weights, m.mask, beta)
    pruned.reshape(-1)[idx] = True
    m.mask[pruned] = False
    m.weights[pruned] = 0.0
    return pruned


def prune_neurons(chain):
    """Remove hidden units left without inputs or outputs, to a fixpoint.

    ``chain`` lists the masked matrices of one gate, input side first, each
    shaped ``(out, in)``. Hidden unit ``j`` between ``chain[l]`` and
    ``chain[l+1]`` reads row ``j`` of the former and feeds column ``j`` of
    the latter. Returns the number of units removed.
    """
    removed = 0
    dead = [np.zeros(chain[l].mask.shape[0], dtype=bool) for l in range(len(chain) - 1)]
    changed = True
    while changed:
        changed = False
        for l in range(len(chain) - 1):
            into, out = chain[l], chain[l + 1]
            has_in = into.mask.any(axis=1)
            has_out = out.mask.any(axis=0)
            fresh = ~(has_in & has_out) & ~dead[l]
            if fresh.any():
                dead[l] |= fresh
                removed += int((fresh & (has_in | has_out)).sum())
                into.mask[fresh, :] = False
                out.mask[:, fresh] = False
                into.zero_dormant()
                out.zero_dormant()
                changed = True
    return removed


def prune_model_neurons(model):
    """Apply :func:`prune_neurons` to every DNN gate of an H-LSTM model."""
    if model.spec.kind != "hlstm" or not model.spec.hidden_layer_widths:
        return 0
    removed = 0
    for k in range(model.spec.stack_depth):
        for gate in ("f", "i", "o", "g"):
            chain = [MaskedMatrix(model.params[n], model.masks[n], n) for n in model.gate_chain(k, gate)]
            removed += prune_neurons(chain)
    return removed


@dataclass
class SparsityRow:
    layer: str
    active: int
    total: int

    @property
    def sparsity(self):
        return 1.0 - self.active / self.total if self.total else 0.0


def layer_label(spec, k):
    cell = {"hlstm": "H-LSTM", "lstm": "LSTM", "gru": "GRU"}[spec.kind]
    return f"{cell} layer{k + 1}"


def sparsity_report(model):
    """Per-recurrent-layer and total sparsity of the masked weights."""
    if not model.masks:
        raise ContractError("model has no masked layers")
    rows = []
    for k in range(model.spec.stack_depth):
        names = model.masked_names(k)
        active = sum(int(np.count_nonzero(model.masks[n])) for n in names)
        total = sum(model.masks[n].size for n in names)
        rows.append(SparsityRow(layer_label(model.spec, k), active, total))
    rows.append(SparsityRow("Total", sum(r.active for r in rows), sum(r.total for r in rows)))
    return rows


def total_sparsity(model):
    return sparsity_report(model)[-1].sparsity


def render_sparsity_table(stages):
    """Aligned text table; ``stages`` maps a column title to a :func:`sparsity_report`."""
    titles = list(stages)
    layers = [r.layer for r in next(iter(stages.values()))]
    width = max(len("Layers"), *(len(l) for l in layers))
    colw = max(10, *(len(t) for t in titles))
    head = "Layers".ljust(width) + " | " + " | ".join(t.center(colw) for t in titles)
    rule = "-" * len(head)
    lines = [rule, head, rule]
    for i, layer in enumerate(layers):
        if layer == "Total":
            lines.append(rule)
        cells = [f"{stages[t][i].sparsity * 100:.2f}%".center(colw) for t in titles]
        lines.append(layer.ljust(width) + " | " + " | ".join(cells))
    lines.append(rule)
    return "\n".join(lines)


def sparsity_rows(stages):
    """Machine-readable rows ``{layer, <stage>: sparsity, ...}``."""
    titles = list(stages)
    layers = [r.layer for r in next(iter(stages.values()))]
    out = []
    for i, layer in enumerate(layers):
        row = {"layer": layer}
        for t in titles:
            row[t] = round(stages[t][i].sparsity, 6)
        out.append(row)
    return out


@dataclass
class GpSchedule:
    """Grow-and-prune hyperparameters.

    ``accuracy_threshold`` is compared against the task metric in its own
    direction (``<=`` for MSE and bits/char, ``>=`` for accuracy).
    """

    alpha: float = 0.9
    beta: float = 0.2
    seed_sparsity: float = 0.5
    growth_epochs: int = 3
    shift_epochs: int = 2
    train_epochs: int = 10
    retrain_epochs_per_prune: int = 10
    accuracy_threshold: float = 0.05
    max_prune_iterations: int = 100

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside (0, 1]")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta={self.beta} outside (0, 1)")
        if not 0.0 <= self.seed_sparsity < 1.0:
            raise ValueError(f"seed_sparsity={self.seed_sparsity} outside [0, 1)")
        for name in ("growth_epochs", "shift_epochs", "train_epochs", "retrain_epochs_per_prune",
                     "max_prune_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self):
        return asdict(self)
