import math

import numpy as np
import pytest

from regformer import tensor as T
from regformer.batching import pack_instances
from regformer.corpus import make_instance
from regformer.errors import ConfigurationError, LengthError
from regformer.layout import build_layout, build_mask
from regformer.model import (
    ModelConfig,
    attach_lora,
    extract_attention,
    extract_hidden,
    forward,
    init_params,
)
from regformer.training import batch_loss

from conftest import tiny_model


def reference_forward(params, ids, positions, visible):
    """Straight numpy pre-norm decoder for one sequence, written without the autodiff layer."""
    cfg = params.config
    p = {k: t.data for k, t in params.tensors.items()}
    d, h = cfg.d_model, cfg.n_heads
    dh = d // h

    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * g + b

    pe = np.zeros((len(ids), d))
    for r, pos in enumerate(positions):
        for i in range(d // 2):
            angle = pos / 10000 ** (2 * i / d)
            pe[r, 2 * i], pe[r, 2 * i + 1] = math.sin(angle), math.cos(angle)
    x = p["embed"][ids] * math.sqrt(d) + pe
    for layer in range(cfg.n_layers):
        w = lambda n: p[f"layers.{layer}.{n}"]
        hn = ln(x, w("ln1.gain"), w("ln1.bias"))
        q, k, v = (hn @ w(f"attn.{n}.weight") + w(f"attn.{n}.bias") for n in "qkv")
        heads = []
        for j in range(h):
            cols = slice(j * dh, (j + 1) * dh)
            s = q[:, cols] @ k[:, cols].T / math.sqrt(dh)
            s = np.where(visible, s, -np.inf)
            a = np.exp(s - s.max(-1, keepdims=True))
            a /= a.sum(-1, keepdims=True)
            heads.append(a @ v[:, cols])
        x = x + np.concatenate(heads, -1) @ w("attn.o.weight") + w("attn.o.bias")
        hn = ln(x, w("ln2.gain"), w("ln2.bias"))
        x = x + np.maximum(hn @ w("ff1.weight") + w("ff1.bias"), 0) @ w("ff2.weight") + w("ff2.bias")
    return ln(x, p["final_ln.gain"], p["final_ln.bias"]) @ p["embed"].T


@pytest.mark.parametrize("variant,ratio", [("vanilla", 1.0), ("registering", 1.0), ("registers_no_mask", 1.0), ("ratio", 1.5)])
def test_forward_matches_reference(langs, variant, ratio):
    params = tiny_model(len(langs.vocab), variant, ratio, seed=3)
    inst = make_instance(langs, 1, 2, [0, 3, 1, 4])
    batch = pack_instances(langs, [inst], params.config.layout_variant)
    with T.no_grad():
        got = forward(params, batch.token_ids[0], batch.positions[0], batch.visible[0]).data
    want = reference_forward(params, batch.token_ids[0], batch.positions[0], batch.visible[0])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(10, d_model=30, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(10, d_model=32, n_heads=4, d_ff=16)
    with pytest.raises(ConfigurationError):
        ModelConfig(10, variant="ratio", ratio=0.0)


def test_output_projection_is_tied(langs):
    params = tiny_model(len(langs.vocab))
    assert params.output_projection is params.embedding
    assert "output" not in " ".join(params.tensors)
    batch = pack_instances(langs, [make_instance(langs, 0, 1, [1, 2])], "registering")
    with T.no_grad():
        before = forward(params, batch.token_ids, batch.positions, batch.visible).data
        params.output_projection.data[5] += 1.0
        after = forward(params, batch.token_ids, batch.positions, batch.visible).data
    assert np.any(before[..., 5] != after[..., 5])


def test_init_statistics():
    cfg = ModelConfig(vocab_size=200, d_model=64, n_heads=4, n_layers=2, d_ff=128)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    for name in a.tensors:
        np.testing.assert_array_equal(a.tensors[name].data, b.tensors[name].data)
    emb = a.embedding.data
    assert emb.size >= 10_000
    assert 0.015 <= emb.std() <= 0.025
    assert all((t.data == 1.0).all() for k, t in a.tensors.items() if k.endswith(".gain"))


def test_lora_counts_and_noop(langs):
    cfg = ModelConfig(vocab_size=50, d_model=64, n_heads=4, n_layers=4, d_ff=128)
    lora = attach_lora(init_params(cfg, 0), rank=8)
    assert lora.n_trainable() == 8192 == 4 * 2 * (64 * 8 + 8 * 64)
    assert {k.split(".")[3] for k in lora.tensors} == {"q", "v"}

    params = tiny_model(len(langs.vocab))
    batch = pack_instances(langs, [make_instance(langs, 0, 2, [1, 2, 3])], "registering")
    with T.no_grad():
        base = forward(params, batch.token_ids, batch.positions, batch.visible).data
        attach_lora(params, rank=4, seed=1)
        adapted = forward(params, batch.token_ids, batch.positions, batch.visible).data
    np.testing.assert_array_equal(base, adapted)
    assert not any(t.requires_grad for t in params.tensors.values())
    assert set(params.trainable()) == set(params.lora.tensors)
    with pytest.raises(ConfigurationError):
        attach_lora(params, rank=0)


def test_length_error(langs):
    params = tiny_model(len(langs.vocab))
    layout = build_layout(50, 10, "registering")
    ids = np.full(layout.length, 3)
    with pytest.raises(LengthError):
        forward(params, ids, layout.positions, build_mask(layout))


def _source_offset_grad(params, langs, inst):
    batch = pack_instances(langs, [inst], params.config.layout_variant)
    offset = T.Tensor(np.zeros(batch.token_ids.shape + (params.config.d_model,)), requires_grad=True)
    logits = forward(params, batch.token_ids, batch.positions, batch.visible, input_offset=offset)
    rows = np.flatnonzero(~batch.ignore.reshape(-1))
    flat = T.reshape(logits, (-1, logits.shape[-1]))
    loss = T.cross_entropy_label_smoothed(
        T.take_rows(flat, rows), batch.targets.reshape(-1)[rows], 0.0, np.zeros(rows.size, bool)
    )
    T.backward(loss)
    lay = batch.layouts[0]
    return np.abs(offset.grad[0, lay.src_slice]).max()


def test_source_reaches_targets_only_through_registers(langs):
    inst = make_instance(langs, 0, 1, [1, 2, 3])
    # one layer: targets read register inputs, which carry no source information
    one = tiny_model(len(langs.vocab), "registering", layers=1)
    assert _source_offset_grad(one, langs, inst) == 0.0
    # a second layer lets registers pass source information on
    two = tiny_model(len(langs.vocab), "registering", layers=2)
    assert _source_offset_grad(two, langs, inst) > 1e-6
    vanilla = tiny_model(len(langs.vocab), "vanilla", layers=1)
    assert _source_offset_grad(vanilla, langs, inst) > 1e-6


def test_registers_depend_on_source_order(langs):
    params = tiny_model(len(langs.vocab), "registering")
    a = pack_instances(langs, [make_instance(langs, 0, 1, [1, 2, 3])], "registering")
    b = pack_instances(langs, [make_instance(langs, 0, 1, [3, 2, 1])], "registering")
    lay = a.layouts[0]
    ha = extract_hidden(params, (a.token_ids[0], a.positions[0], a.visible[0]), 1)[lay.reg_slice]
    hb = extract_hidden(params, (b.token_ids[0], b.positions[0], b.visible[0]), 1)[lay.reg_slice]
    assert np.abs(ha - hb).max() > 1e-6


def test_extract_attention(langs):
    params = tiny_model(len(langs.vocab), "registering", heads=4)
    batch = pack_instances(langs, [make_instance(langs, 2, 0, [0, 1, 2, 3])], "registering")
    inputs = (batch.token_ids[0], batch.positions[0], batch.visible[0])
    for layer in (1, 2):
        mean = extract_attention(params, inputs, layer)
        per_head = [extract_attention(params, inputs, layer, head=i) for i in range(4)]
        np.testing.assert_allclose(mean, np.mean(per_head, axis=0), rtol=0, atol=1e-15)
        assert (mean[~batch.visible[0]] == 0).all()
        np.testing.assert_allclose(mean.sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(IndexError):
        extract_attention(params, inputs, 0)
    with pytest.raises(IndexError):
        extract_attention(params, inputs, 1, head=4)


def test_extract_hidden(langs):
    params = tiny_model(len(langs.vocab), "registering")
    batch = pack_instances(langs, [make_instance(langs, 0, 1, [2, 2])], "registering")
    inputs = (batch.token_ids[0], batch.positions[0], batch.visible[0])
    h0 = extract_hidden(params, inputs, 0)
    assert h0.shape == (batch.token_ids.shape[1], 16)
    # slots 1 and 2 hold the same token
    pe = T.sinusoidal_positions(0, 3, 16)
    np.testing.assert_allclose(h0[1] - h0[2], pe[1] - pe[2], atol=1e-12)
    np.testing.assert_array_equal(extract_hidden(params, inputs, 2), extract_hidden(params, inputs, 2))
    with pytest.raises(IndexError):
        extract_hidden(params, inputs, 3)


def test_loss_ignores_source_and_register_logits(langs):
    params = tiny_model(len(langs.vocab), "registering")
    batch = pack_instances(langs, [make_instance(langs, 0, 1, [1, 2, 3])], "registering")
    lay = batch.layouts[0]
    tgt_only = float(batch_loss(params, batch, 0.1, train=False).data)
    with T.no_grad():
        logits = forward(params, batch.token_ids[0], batch.positions[0], batch.visible[0]).data
    logp = logits[lay.tgt_slice] - np.log(np.exp(logits[lay.tgt_slice]).sum(-1, keepdims=True))
    tgt = batch.targets[0, lay.tgt_slice]
    v = logits.shape[-1]
    manual = np.mean(-(0.9 * logp[np.arange(len(tgt)), tgt] + 0.1 * logp.mean(-1)))
    np.testing.assert_allclose(tgt_only, manual, rtol=1e-12)
    assert v == len(langs.vocab)
