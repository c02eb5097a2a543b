import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hlstm.cells import CellSpec
from hlstm.checkpoint import (
    MAGIC,
    CheckpointError,
    checkpoint_from_run,
    decode,
    encode,
    load_checkpoint,
    rle_decode,
    rle_encode,
    run_from_checkpoint,
    save_checkpoint,
)
from hlstm.gptrain import gp_pipeline, new_run, seed_model, train_epoch
from hlstm.optim import LrSchedule, OptimizerState
from hlstm.sparsity import GpSchedule
from hlstm.tasks import Task


def small_run(seed=0, width=4, **sched):
    task = Task("adding", length=5, n_train=64, n_eval=32, seed=seed)
    defaults = dict(growth_epochs=2, shift_epochs=1, train_epochs=3, retrain_epochs_per_prune=2,
                    accuracy_threshold=1.0, max_prune_iterations=2)
    defaults.update(sched)
    return new_run(CellSpec("hlstm", 2, width, (width,), 1, 0.0, 0.0), task, GpSchedule(**defaults),
                   OptimizerState("adam", lr=1e-2), LrSchedule("constant", 1e-2), 16, seed)


@settings(max_examples=100, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_rle_round_trip(mask):
    first, runs = rle_encode(mask)
    assert sum(runs) == mask.size
    assert (rle_decode(first, runs, mask.shape) == mask).all()


def test_save_load_save_is_bit_identical(tmp_path):
    run = gp_pipeline(small_run(seed_sparsity=0.5))
    a, b = tmp_path / "a.hlgp", tmp_path / "b.hlgp"
    save_checkpoint(a, checkpoint_from_run(run, "final"))
    save_checkpoint(b, load_checkpoint(a))
    assert a.read_bytes() == b.read_bytes()
    restored = run_from_checkpoint(load_checkpoint(a))
    for k, v in run.model.params.items():
        assert v.tobytes() == restored.model.params[k].tobytes()
    assert restored.rng.bit_generator.state == run.rng.bit_generator.state
    assert restored.history == run.history and restored.progress == run.progress


@pytest.mark.parametrize("tag", ["growth-epoch-1", "post-shift", "train-epoch-2", "post-prune-iter-1"])
def test_resume_matches_uninterrupted(tag):
    saved = {}
    full = gp_pipeline(small_run(7, seed_sparsity=0.5, accuracy_threshold=0.5),
                       lambda r, t: saved.setdefault(t, encode(checkpoint_from_run(r, t))))
    assert tag in saved
    resumed = gp_pipeline(run_from_checkpoint(decode(saved[tag])))
    assert encode(checkpoint_from_run(resumed, "final")) == encode(checkpoint_from_run(full, "final"))


def test_sparse_checkpoint_is_small():
    dense = small_run(width=32, seed_sparsity=0.0)
    sparse = small_run(width=32, seed_sparsity=0.94)
    seed_model(sparse)
    d = len(encode(checkpoint_from_run(dense, "seed")))
    s = len(encode(checkpoint_from_run(sparse, "seed")))
    assert d >= 5 * s


@pytest.fixture
def blob():
    run = small_run(seed_sparsity=0.5)
    seed_model(run)
    train_epoch(run, run.task.dataset("train"))
    return encode(checkpoint_from_run(run, "seed"))


def section_offsets(data):
    offsets, pos = {}, 6
    for _ in range(4):
        n = data[pos]
        name = data[pos + 1:pos + 1 + n].decode()
        (size,) = struct.unpack_from("<Q", data, pos + 1 + n)
        offsets[name] = (pos, pos + 1 + n + 8, size)
        pos += 1 + n + 8 + size
    return offsets


class TestCorruption:
    def test_bad_magic(self, blob):
        with pytest.raises(CheckpointError) as exc:
            decode(b"XXXX" + blob[4:])
        assert exc.value.section == "header"

    def test_bad_version(self, blob):
        with pytest.raises(CheckpointError, match="version"):
            decode(MAGIC + bytes([2]) + blob[5:])

    def test_truncations_name_the_section(self, blob):
        offsets = section_offsets(blob)
        for name, (start, body, size) in offsets.items():
            for cut in (start + 1, body + size // 2):
                with pytest.raises(CheckpointError) as exc:
                    decode(blob[:cut])
                assert exc.value.section == name

    def test_every_truncation_fails(self, blob):
        for cut in range(0, len(blob), max(1, len(blob) // 200)):
            with pytest.raises(CheckpointError):
                decode(blob[:cut])

    def test_trailing_bytes(self, blob):
        with pytest.raises(CheckpointError):
            decode(blob + b"\0")

    def test_broken_meta(self, blob):
        _, body, _ = section_offsets(blob)["meta"]
        bad = bytearray(blob)
        bad[body] = ord("!")
        with pytest.raises(CheckpointError) as exc:
            decode(bytes(bad))
        assert exc.value.section == "meta"


def test_atomic_save_keeps_old_file(tmp_path, monkeypatch, blob):
    path = tmp_path / "c.hlgp"
    path.write_bytes(blob)

    def explode(*a):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", explode)
    with pytest.raises(OSError):
        save_checkpoint(path, decode(blob))
    assert path.read_bytes() == blob
    assert os.listdir(tmp_path) == ["c.hlgp"]


def test_dense_layout_when_dormant_entries_nonzero(blob):
    ckpt = decode(blob)
    name = next(iter(ckpt.masks))
    dormant = ~ckpt.masks[name]
    assert dormant.any()
    ckpt.params[name][dormant] = 0.5
    back = decode(encode(ckpt))
    assert back.params[name].tobytes() == ckpt.params[name].tobytes()
