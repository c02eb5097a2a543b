"""Run configuration read from YAML.

Every section is optional; omitted keys take the dataclass defaults. The
cell input width is inferred from the task when not given.

Example::

    seed: 0
    batch_size: 32
    task: {kind: adding, length: 30}
    cell: {kind: hlstm, cell_width: 32, hidden_layer_widths: [32]}
    schedule: {seed_sparsity: 0.5, alpha: 0.9, beta: 0.2, accuracy_threshold: 0.05}
    optimizer: {kind: adam, lr: 0.003, clip_norm: 1.0}
    lr_schedule: {kind: constant}
"""
from dataclasses import asdict, dataclass, field, fields

import yaml

from hlstm.cells import INTERNAL_ACTIVATIONS, CellSpec
from hlstm.optim import LrSchedule, OptimizerState
from hlstm.sparsity import GpSchedule
from hlstm.tasks import Task


class ConfigError(ValueError):
    pass


def _build(cls, section, data):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class RunConfig:
    task: Task = field(default_factory=Task)
    cell: CellSpec = None
    schedule: GpSchedule = field(default_factory=GpSchedule)
    optimizer: OptimizerState = field(default_factory=OptimizerState)
    lr_schedule: LrSchedule = None
    batch_size: int = 32
    seed: int = 0
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.cell is None:
            self.cell = CellSpec("hlstm", self.task.input_width, 32, (32,))
        if self.lr_schedule is None:
            self.lr_schedule = LrSchedule(base_lr=self.optimizer.lr)
        self.validate()

    def validate(self):
        if self.cell.input_width != self.task.input_width:
            raise ConfigError(
                f"cell.input_width={self.cell.input_width} but task {self.task.kind!r} "
                f"feeds {self.task.input_width} features"
            )
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.activation not in INTERNAL_ACTIVATIONS:
            raise ConfigError(f"activation must be one of {INTERNAL_ACTIVATIONS}")
        if self.optimizer.buffers or self.optimizer.step_count:
            raise ConfigError("optimizer: buffers and step_count are not configurable")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        top = {"task", "cell", "schedule", "optimizer", "lr_schedule", "batch_size", "seed", "activation"}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        task = _build(Task, "task", d.get("task"))
        cell = d.get("cell")
        if cell is not None:
            cell = dict(cell)
            cell.setdefault("input_width", task.input_width)
            cell = _build(CellSpec, "cell", cell)
        opt = _build(OptimizerState, "optimizer", d.get("optimizer"))
        lr = d.get("lr_schedule")
        if lr is not None:
            lr = dict(lr)
            lr.setdefault("base_lr", opt.lr)
            lr = _build(LrSchedule, "lr_schedule", lr)
        try:
            return cls(
                task=task,
                cell=cell,
                schedule=_build(GpSchedule, "schedule", d.get("schedule")),
                optimizer=opt,
                lr_schedule=lr,
                batch_size=int(d.get("batch_size", 32)),
                seed=int(d.get("seed", 0)),
                activation=d.get("activation", "leaky_relu"),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        opt = self.optimizer.hyper()
        opt.pop("step_count")
        return {
            "task": self.task.to_dict(),
            "cell": self.cell.to_dict(),
            "schedule": self.schedule.to_dict(),
            "optimizer": opt,
            "lr_schedule": asdict(self.lr_schedule),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "activation": self.activation,
        }


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
