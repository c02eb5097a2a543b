"""Adam and Nesterov SGD with mask hygiene, learning-rate schedules,
and the training-set gradient accumulator used by growth."""
from dataclasses import asdict, dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class LrSchedule:
    kind: str = "constant"
    base_lr: float = 3e-4
    factor: float = 1.0
    period: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay", "per_epoch_decay"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if not 0.0 < self.factor <= 1.0:
            raise ValueError(f"decay factor {self.factor} outside (0, 1]")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("learning rate must be positive")

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``."""
        if self.kind == "constant":
            return self.base_lr
        period = 1 if self.kind == "per_epoch_decay" else self.period
        return self.base_lr * self.factor ** (epoch // period)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    """Optimizer hyperparameters plus per-parameter buffers.

    ``buffers`` maps ``"m:<param>"``/``"v:<param>"`` (Adam) or
    ``"buf:<param>"`` (Nesterov) to arrays shaped like the parameter.
    """

    kind: str = "adam"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float = 0.0
    step_count: int = 0
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "nesterov_sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def hyper(self):
        d = asdict(self)
        d.pop("buffers")
        return d

    def copy(self):
        return OptimizerState(**self.hyper(), buffers={k: v.copy() for k, v in self.buffers.items()})


def optimizer_step(opt, params, grads, masks=None):
    """Update ``params`` in place from ``grads``.

    L2 weight decay is added to the gradient of active weights. After the
    update every mask-zero weight, and its moment buffers, is reset to +0.0.
    Raises :class:`NonFiniteGradient` before touching anything if a gradient
    is NaN or infinite.
    """
    masks = masks or {}
    for name in grads:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    scale = 1.0
    if opt.clip_norm > 0:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if norm > opt.clip_norm:
            scale = opt.clip_norm / norm
    opt.step_count += 1
    t = opt.step_count
    for name, g in grads.items():
        w = params[name]
        mask = masks.get(name)
        g = g * scale if scale != 1.0 else g
        if opt.weight_decay:
            decay = w if mask is None else np.where(mask, w, 0.0)
            g = g + opt.weight_decay * decay
        if opt.kind == "adam":
            m = opt.buffers.get("m:" + name)
            v = opt.buffers.get("v:" + name)
            if m is None:
                m = np.zeros_like(w)
                v = np.zeros_like(w)
            m = opt.beta1 * m + (1.0 - opt.beta1) * g
            v = opt.beta2 * v + (1.0 - opt.beta2) * (g * g)
            m_hat = m / (1.0 - opt.beta1 ** t)
            v_hat = v / (1.0 - opt.beta2 ** t)
            w -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
            if mask is not None:
                m = np.where(mask, m, 0.0)
                v = np.where(mask, v, 0.0)
            opt.buffers["m:" + name] = m
            opt.buffers["v:" + name] = v
        else:
            buf = opt.buffers.get("buf:" + name)
            buf = g.copy() if buf is None else opt.momentum * buf + g
            w -= opt.lr * (g + opt.momentum * buf)
            if mask is not None:
                buf = np.where(mask, buf, 0.0)
            opt.buffers["buf:" + name] = buf
        if mask is not None:
            w[...] = np.where(mask, w, 0.0)


class GradientAccumulator:
    """Running sum of per-sample gradients; ``average()`` is sum / count."""

    def __init__(self):
        self.sums = {}
        self.count = 0

    def add(self, grads, n_samples):
        """Add a batch whose gradients are the *mean* over ``n_samples`` samples."""
        for name, g in grads.items():
            contrib = g * n_samples
            self.sums[name] = contrib if name not in self.sums else self.sums[name] + contrib
        self.count += n_samples

    def average(self):
        if self.count == 0:
            raise ValueError("no samples accumulated")
        return {name: s / self.count for name, s in self.sums.items()}
