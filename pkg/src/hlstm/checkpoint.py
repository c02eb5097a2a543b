"""Binary "HLGP" checkpoints.

Layout (all integers little-endian)::

    b"HLGP"  u8 version (=1)  u8 section_count
    section*: u8 name_len, name, u64 payload_len, payload

Sections, in order:

``meta``
    UTF-8 JSON (sorted keys): spec, task, schedules, optimizer
    hyperparameters, phase tag, RNG state, history, progress.
``masks``
    per masked parameter: a run-length encoded bitmask.
``weights``
    every parameter; masked ones store only their active entries.
``optimizer``
    moment buffers, stored like ``weights``.

An array record is ``u16 name_len, name, u8 ndim, u32 shape[ndim],
u8 layout, u64 count, f64 values[count]``; ``layout`` is 0 for dense and
1 for "active entries of the mask only". Sparse layout is used only when
every dormant entry is exactly +0.0, so round trips are bit-exact.
A mask record is ``u16 name_len, name, u8 ndim, u32 shape[ndim],
u8 first_bit, u32 run_count, u32 runs[run_count]``.
"""
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from hlstm.cells import CellSpec, RecurrentModel
from hlstm.gptrain import Run
from hlstm.optim import LrSchedule, OptimizerState
from hlstm.sparsity import GpSchedule
from hlstm.tasks import Task

MAGIC = b"HLGP"
VERSION = 1
SECTIONS = ("meta", "masks", "weights", "optimizer")


class CheckpointError(ValueError):
    """Malformed checkpoint; ``section`` names where parsing failed."""

    def __init__(self, section, message):
        super().__init__(f"checkpoint section {section!r}: {message}")
        self.section = section


@dataclass
class Checkpoint:
    tag: str
    meta: dict
    params: dict
    masks: dict
    buffers: dict = field(default_factory=dict)


# encoding helpers


def _name(buf, name):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _shape(buf, shape):
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))


def rle_encode(mask):
    """``(first_bit, runs)`` of the row-major flattened mask."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return 0, np.zeros(0, dtype=np.uint32)
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    return int(flat[0]), np.diff(bounds).astype(np.uint32)


def rle_decode(first, runs, shape):
    values = (np.arange(runs.size) + first) % 2 == 1
    return np.repeat(values, runs.astype(np.int64)).reshape(shape)


def _encode_array(buf, name, arr, mask):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    _name(buf, name)
    _shape(buf, arr.shape)
    sparse = mask is not None and not np.any(arr.view(np.uint64)[~mask])
    data = arr[mask] if sparse else arr.reshape(-1)
    buf.write(struct.pack("<BQ", int(sparse), data.size))
    buf.write(data.tobytes())


def _encode_mask(buf, name, mask):
    _name(buf, name)
    _shape(buf, mask.shape)
    first, runs = rle_encode(mask)
    buf.write(struct.pack("<BI", first, runs.size))
    buf.write(runs.astype("<u4").tobytes())


def encode(ckpt):
    meta = dict(ckpt.meta, tag=ckpt.tag)
    parts = {"meta": json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")}
    b = io.BytesIO()
    for name in sorted(ckpt.masks):
        _encode_mask(b, name, ckpt.masks[name])
    parts["masks"] = b.getvalue()
    b = io.BytesIO()
    for name in sorted(ckpt.params):
        _encode_array(b, name, ckpt.params[name], ckpt.masks.get(name))
    parts["weights"] = b.getvalue()
    b = io.BytesIO()
    for key in sorted(ckpt.buffers):
        _encode_array(b, key, ckpt.buffers[key], ckpt.masks.get(key.split(":", 1)[1]))
    parts["optimizer"] = b.getvalue()
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<BB", VERSION, len(SECTIONS)))
    for sec in SECTIONS:
        raw = sec.encode("ascii")
        out.write(struct.pack("<B", len(raw)) + raw + struct.pack("<Q", len(parts[sec])))
        out.write(parts[sec])
    return out.getvalue()


# decoding


class _Reader:
    def __init__(self, data, section):
        self.data = data
        self.pos = 0
        self.section = section

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(self.section, f"truncated: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self):
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(self.section, "bad record name") from exc

    def shape(self):
        (ndim,) = self.unpack("<B")
        return self.unpack(f"<{ndim}I")

    def done(self):
        return self.pos == len(self.data)


def _decode_masks(data):
    r = _Reader(data, "masks")
    masks = {}
    while not r.done():
        name = r.name()
        shape = r.shape()
        first, count = r.unpack("<BI")
        runs = np.frombuffer(r.take(4 * count), dtype="<u4")
        if int(runs.sum()) != int(np.prod(shape)):
            raise CheckpointError("masks", f"{name}: run lengths do not cover shape {shape}")
        masks[name] = rle_decode(first, runs, shape)
    return masks


def _decode_arrays(data, section, mask_of):
    r = _Reader(data, section)
    out = {}
    while not r.done():
        name = r.name()
        shape = r.shape()
        sparse, count = r.unpack("<BQ")
        values = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
        if sparse:
            mask = mask_of(name)
            if mask is None or mask.shape != tuple(shape) or int(mask.sum()) != count:
                raise CheckpointError(section, f"{name}: sparse payload does not match its mask")
            arr = np.zeros(shape)
            arr[mask] = values
        else:
            if count != int(np.prod(shape)):
                raise CheckpointError(section, f"{name}: {count} values for shape {shape}")
            arr = values.reshape(shape)
        out[name] = arr
    return out


def decode(data):
    head = _Reader(data, "header")
    if head.take(4) != MAGIC:
        raise CheckpointError("header", "bad magic (not an HLGP checkpoint)")
    version, count = head.unpack("<BB")
    if version != VERSION:
        raise CheckpointError("header", f"unsupported version {version}")
    if count != len(SECTIONS):
        raise CheckpointError("header", f"expected {len(SECTIONS)} sections, found {count}")
    parts = {}
    for expected in SECTIONS:
        head.section = expected
        (n,) = head.unpack("<B")
        name = head.take(n).decode("ascii", errors="replace")
        if name != expected:
            raise CheckpointError(expected, f"found section {name!r} in its place")
        (size,) = head.unpack("<Q")
        parts[name] = head.take(size)
    if not head.done():
        raise CheckpointError("optimizer", "trailing bytes after the last section")
    try:
        meta = json.loads(parts["meta"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("meta", f"invalid JSON: {exc}") from exc
    masks = _decode_masks(parts["masks"])
    params = _decode_arrays(parts["weights"], "weights", masks.get)
    buffers = _decode_arrays(parts["optimizer"], "optimizer", lambda k: masks.get(k.split(":", 1)[1]))
    tag = meta.pop("tag", None)
    if tag is None:
        raise CheckpointError("meta", "missing phase tag")
    return Checkpoint(tag, meta, params, masks, buffers)


def save_checkpoint(path, ckpt):
    """Write atomically: a temp file in the same directory is renamed over ``path``."""
    data = encode(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".hlgp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


# run <-> checkpoint


def checkpoint_from_run(run, tag):
    m = run.model
    opt = run.opt.hyper()
    meta = {
        "spec": m.spec.to_dict(),
        "output_width": m.output_width,
        "activation": m.activation,
        "slope": m.slope,
        "task": run.task.to_dict(),
        "schedule": run.schedule.to_dict(),
        "optimizer": opt,
        "lr_schedule": run.lr_schedule.to_dict(),
        "batch_size": run.batch_size,
        "rng": run.rng.bit_generator.state,
        "epoch": run.epoch,
        "history": run.history,
        "stages": run.stages,
        "progress": run.progress,
    }
    return Checkpoint(
        tag,
        json.loads(json.dumps(meta)),
        {k: v.copy() for k, v in m.params.items()},
        {k: v.copy() for k, v in m.masks.items()},
        {k: v.copy() for k, v in run.opt.buffers.items()},
    )


def run_from_checkpoint(ckpt):
    meta = ckpt.meta
    spec = CellSpec.from_dict(meta["spec"])
    model = RecurrentModel(
        spec,
        meta["output_width"],
        {k: v.copy() for k, v in ckpt.params.items()},
        {k: v.copy() for k, v in ckpt.masks.items()},
        meta["activation"],
        meta["slope"],
    )
    opt = OptimizerState(**meta["optimizer"], buffers={k: v.copy() for k, v in ckpt.buffers.items()})
    state = meta["rng"]
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    run = Run(
        model,
        Task.from_dict(meta["task"]),
        GpSchedule(**meta["schedule"]),
        opt,
        LrSchedule(**meta["lr_schedule"]),
        meta["batch_size"],
        np.random.Generator(bitgen),
    )
    run.epoch = meta["epoch"]
    run.history = meta["history"]
    run.stages = meta["stages"]
    run.progress = meta["progress"]
    return run
