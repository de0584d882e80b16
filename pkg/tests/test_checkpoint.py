import json
import struct

import numpy as np
import pytest

from regformer import checkpoint as ckpt_io
from regformer import tensor as T
from regformer.errors import CheckpointError
from regformer.model import attach_lora, forward
from regformer.tensor import AdamState

from conftest import tiny_model


def test_round_trip_full(tmp_path, langs):
    params = tiny_model(len(langs.vocab))
    path = tmp_path / "m.ckpt"
    ckpt_io.save(ckpt_io.from_model(params, step=7), path)
    raw = path.read_bytes()
    assert raw.startswith(ckpt_io.MAGIC)
    ck = ckpt_io.load(path)
    assert ck.kind == "full" and ck.step == 7 and ck.config == params.config
    for name, t in params.tensors.items():
        assert ck.params[name].dtype == np.dtype("<f4")
        np.testing.assert_array_equal(ck.params[name], t.data.astype(np.float32))
    again = ckpt_io.to_model(ck)
    ckpt_io.save(ckpt_io.from_model(again, step=7), tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == raw


def test_manifest_layout(tmp_path, langs):
    params = tiny_model(len(langs.vocab))
    raw = ckpt_io.encode_checkpoint(ckpt_io.from_model(params))
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    assert manifest["format_version"] == ckpt_io.FORMAT_VERSION
    assert [e["name"] for e in manifest["arrays"]] == list(params.tensors)
    assert sum(e["nbytes"] for e in manifest["arrays"]) == len(raw) - 16 - n


def test_rejects_bad_files(tmp_path, langs):
    params = tiny_model(len(langs.vocab))
    raw = ckpt_io.encode_checkpoint(ckpt_io.from_model(params))
    with pytest.raises(CheckpointError):
        ckpt_io.decode_checkpoint(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        ckpt_io.decode_checkpoint(raw[:-10])
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    manifest["format_version"] = 99
    head = json.dumps(manifest).encode()
    with pytest.raises(CheckpointError, match="version"):
        ckpt_io.decode_checkpoint(raw[:8] + struct.pack("<Q", len(head)) + head + raw[16 + n :])
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "absent.ckpt")


def test_optimizer_state_and_master_copy(tmp_path, langs):
    params = tiny_model(len(langs.vocab))
    adam = AdamState(step=3, m={"embed": np.full((2, 2), 0.1)}, v={"embed": np.full((2, 2), 1e-8)})
    ck = ckpt_io.from_model(params, step=3)
    ck.adam = adam
    ck.master = {k: t.data for k, t in params.tensors.items()}
    ck.rng_state = np.random.default_rng(5).bit_generator.state
    ckpt_io.save(ck, tmp_path / "s.ckpt")
    back = ckpt_io.load(tmp_path / "s.ckpt")
    assert back.adam.step == 3 and back.adam.beta2 == adam.beta2
    np.testing.assert_array_equal(back.adam.m["embed"], adam.m["embed"])
    assert back.master["embed"].dtype == np.float64
    restored = ckpt_io.to_model(back)
    for name, t in params.tensors.items():
        np.testing.assert_array_equal(restored.tensors[name].data, t.data)
    rng = np.random.default_rng()
    rng.bit_generator.state = back.rng_state
    assert rng.random() == np.random.default_rng(5).random()


def test_float32_state_stays_float32(tmp_path, langs):
    with T.precision(np.float32):
        params = tiny_model(len(langs.vocab))
        ck = ckpt_io.from_model(params)
        ck.master = {k: t.data for k, t in params.tensors.items()}
        ckpt_io.save(ck, tmp_path / "f.ckpt")
        back = ckpt_io.to_model(ckpt_io.load(tmp_path / "f.ckpt"))
    for name, t in params.tensors.items():
        assert back.tensors[name].data.dtype == np.float32
        np.testing.assert_array_equal(back.tensors[name].data, t.data)


def test_lora_checkpoint_needs_matching_base(tmp_path, langs):
    params = tiny_model(len(langs.vocab))
    base = ckpt_io.from_model(params)
    attach_lora(params, rank=2, seed=3)
    params.lora.tensors["layers.0.attn.q.lora_b"].data[:] = 0.25
    adapter = ckpt_io.from_model(params, step=4)
    assert adapter.kind == "lora" and set(adapter.params) == set(params.lora.tensors)
    ckpt_io.save(adapter, tmp_path / "a.ckpt")
    loaded = ckpt_io.load(tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        ckpt_io.to_model(loaded)
    other = ckpt_io.from_model(tiny_model(len(langs.vocab), seed=99))
    with pytest.raises(CheckpointError):
        ckpt_io.to_model(loaded, other)
    model = ckpt_io.to_model(loaded, base)
    assert model.lora.rank == 2
    assert not any(t.requires_grad for t in model.tensors.values())
    ids = np.array([3, 9, 2, 4, 4, 4, 1])
    pos = np.arange(7)
    vis = np.tril(np.ones((7, 7), bool))
    with T.no_grad():
        a = forward(params, ids, pos, vis).data
        b = forward(model, ids, pos, vis).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_average_checkpoints(langs):
    a = ckpt_io.from_model(tiny_model(len(langs.vocab), seed=1), step=10)
    b = ckpt_io.from_model(tiny_model(len(langs.vocab), seed=2), step=20)
    same = ckpt_io.average_checkpoints([a, a, a])
    for k in a.params:
        np.testing.assert_array_equal(same.params[k], a.params[k].astype(np.float32))
    avg = ckpt_io.average_checkpoints([a, b])
    assert avg.step == 20 and avg.extra["averaged_steps"] == [10, 20]
    k = "embed"
    want = ((a.params[k] + b.params[k]) / 2).astype(np.float32)
    np.testing.assert_array_equal(avg.params[k], want)
    with pytest.raises(CheckpointError):
        ckpt_io.average_checkpoints([])
    c = ckpt_io.from_model(tiny_model(len(langs.vocab), layers=1))
    with pytest.raises(CheckpointError):
        ckpt_io.average_checkpoints([a, c])


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "x.txt"
    ckpt_io.atomic_write(target, "one")
    ckpt_io.atomic_write(target, "two")
    assert target.read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
