import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mocha_stream import numerics as nx
from mocha_stream.encoder import (
    EncoderConfig,
    StreamingEncoder,
    _block_input,
    block_plan,
    conv_out_len,
    downsample,
    downsampled_len,
    encode_batch,
    encode_block,
    encode_incremental,
    encode_stream,
    frontend,
    init_context,
)
from mocha_stream.model import init_model, toy_config
from mocha_stream.numerics import Tensor


def zeroed(params):
    """Copy of a parameter tree with every tensor set to zero."""
    if isinstance(params, Tensor):
        return Tensor(np.zeros_like(params.data))
    if isinstance(params, list):
        return [zeroed(p) for p in params]
    if dataclasses.is_dataclass(params):
        return dataclasses.replace(params, **{f.name: zeroed(getattr(params, f.name)) for f in dataclasses.fields(params)})
    return params


# -- frontend ------------------------------------------------------------------------


def test_downsampled_length_formula():
    assert downsampled_len(64) == 16
    for t in range(1, 200):
        assert conv_out_len(t) == (t - 1) // 2 + 1
        assert downsampled_len(t) == math.ceil(t / 4)
    assert downsampled_len(0) == 0


def test_frontend_length(toy):
    config, model = toy
    x = np.random.default_rng(0).normal(size=(64, config.feat_dim))
    assert frontend(x, model.encoder.frontend).shape == (16, config.d_model)


def test_frontend_split_halves_bit_identical(toy):
    config, model = toy
    p = model.encoder.frontend
    x = np.random.default_rng(1).normal(size=(37, config.feat_dim))
    whole, _ = downsample(x, p, final=True)
    a, cache = downsample(x[:18], p)
    b, _ = downsample(x[18:], p, cache, final=True)
    assert np.array_equal(whole, np.concatenate([a, b]))
    assert np.abs(whole - frontend(x, p).data).max() <= 1e-12


def test_frontend_zero_input_zero_bias_gives_zero(toy):
    config, model = toy
    p = model.encoder.frontend
    p0 = dataclasses.replace(p, conv1_b=zeroed(p.conv1_b), conv2_b=zeroed(p.conv2_b), proj_b=zeroed(p.proj_b))
    x = np.zeros((20, config.feat_dim))
    assert not frontend(x, p0).data.any()
    assert not downsample(x, p0, final=True)[0].any()


@pytest.mark.parametrize("t", [1, 2, 3, 4, 5])
def test_short_final_flush_emits_floor_arithmetic(toy, t):
    config, model = toy
    frames, cache = downsample(np.ones((t, config.feat_dim)), model.encoder.frontend, final=True)
    assert frames.shape[0] == downsampled_len(t)
    with pytest.raises(RuntimeError):
        downsample(np.ones((1, config.feat_dim)), model.encoder.frontend, cache)


def test_frontend_rejects_wrong_feature_dim(toy):
    config, model = toy
    with pytest.raises(nx.ShapeError):
        frontend(np.ones((8, config.feat_dim + 3)), model.encoder.frontend)


# -- context initialisation ----------------------------------------------------


def test_init_context_examples():
    v = np.arange(4.0)
    assert np.array_equal(init_context(Tensor(np.tile(v, (5, 1)))).data, [v])
    a, b = np.array([1.0, 2.0]), np.array([3.0, 7.0])
    assert np.allclose(init_context(Tensor(np.stack([a, b]))).data, [(a + b) / 2])
    x = np.random.default_rng(2).normal(size=(9, 6))
    naive = np.zeros(6)
    for row in x:
        naive += row
    assert np.abs(init_context(Tensor(x)).data[0] - naive / 9).max() <= 1e-12
    with pytest.raises(ValueError):
        init_context(Tensor(np.zeros((0, 3))))


# -- block encoding ------------------------------------------------------------


def test_encode_block_shapes(toy):
    config, model = toy
    rng = np.random.default_rng(3)
    block = Tensor(rng.normal(size=(config.encoder.block_len, config.d_model)))
    prev = [Tensor(rng.normal(size=(1, config.d_model))) for _ in range(config.encoder.n_layers)]
    z, ctx = encode_block(block, prev, init_context(block), model.encoder.layers)
    assert z.shape == (config.encoder.block_len, config.d_model)
    assert len(ctx) == config.encoder.n_layers and all(c.shape == (1, config.d_model) for c in ctx)


def test_encode_block_context_count_mismatch(toy):
    config, model = toy
    block = Tensor(np.ones((4, config.d_model)))
    with pytest.raises(ValueError):
        encode_block(block, [init_context(block)], init_context(block), model.encoder.layers)


def test_encode_block_with_zero_weights_passes_values_through(toy):
    config, model = toy
    layers = zeroed(model.encoder.layers)
    rng = np.random.default_rng(4)
    block = Tensor(rng.normal(size=(6, config.d_model)))
    prev = [Tensor(rng.normal(size=(1, config.d_model))) for _ in layers]
    z, ctx = encode_block(block, prev, init_context(block), layers)
    # attention and FFN contribute nothing, so each layer returns [Z; c_{b-1}^{n-1}]
    assert np.array_equal(z.data, block.data)
    for c, p in zip(ctx, prev):
        assert np.array_equal(c.data, p.data)


def test_previous_context_flows_into_block_output(toy):
    config, model = toy
    rng = np.random.default_rng(5)
    block = Tensor(rng.normal(size=(config.encoder.block_len, config.d_model)))
    prev = [Tensor(rng.normal(size=(1, config.d_model))) for _ in range(config.encoder.n_layers)]
    base, _ = encode_block(block, prev, init_context(block), model.encoder.layers)
    for n in range(config.encoder.n_layers):
        bumped = list(prev)
        bumped[n] = Tensor(prev[n].data + 1e-3)
        z, _ = encode_block(block, bumped, init_context(block), model.encoder.layers)
        assert np.abs(z.data - base.data).max() > 0.0


def test_zero_contexts_isolate_block_from_earlier_audio(toy):
    config, model = toy
    cfg = config.encoder
    rng = np.random.default_rng(6)
    frames = rng.normal(size=(3 * cfg.block_len, config.d_model))
    start = 2 * cfg.hop_len
    other = frames.copy()
    other[:start] = rng.normal(size=(start, config.d_model))
    zeros = [Tensor(np.zeros((1, config.d_model)))] * cfg.n_layers
    outs = []
    for f in (frames, other):
        rows, n_real = _block_input(Tensor(f), start, start, cfg)
        outs.append(encode_block(rows, zeros, init_context(rows[:n_real]), model.encoder.layers)[0].data)
    assert np.array_equal(outs[0], outs[1])


# -- whole-utterance encoding --------------------------------------------------


@pytest.mark.parametrize("n", [1, 3, 8, 9, 12, 13, 31, 40])
def test_block_plan_partitions_frames(n):
    plan = block_plan(n, 8, 4)
    covered = []
    for start, lo, hi in plan:
        assert start <= lo <= hi <= start + 8
        covered.extend(range(lo, hi))
    assert covered == list(range(n))


def test_short_utterance_emits_exact_length(toy):
    config, model = toy
    x = np.random.default_rng(7).normal(size=(10, config.feat_dim))
    h = encode_stream(x, model.encoder, config.encoder)
    assert h.shape == (downsampled_len(10), config.d_model)
    assert encode_incremental(x, model.encoder, config.encoder).shape == h.shape


_TOY = None


def toy_model():
    # hypothesis tests cannot take function-scoped fixtures
    global _TOY
    if _TOY is None:
        config = toy_config(seed=0, precision="float64")
        _TOY = (config, init_model(config))
    return _TOY


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 150), st.integers(0, 2**31 - 1))
def test_stream_length_and_chunking_invariance(t, seed):
    config, model = toy_model()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(t, config.feat_dim))
    whole = encode_incremental(x, model.encoder, config.encoder)
    assert whole.shape[0] == downsampled_len(t)
    cuts = rng.integers(1, 9, size=t)
    chunked = encode_incremental(x, model.encoder, config.encoder, chunk_sizes=cuts)
    assert np.array_equal(whole, chunked)
    assert np.abs(whole - encode_stream(x, model.encoder, config.encoder).data).max() <= 1e-12


def test_one_frame_increments_bit_identical(toy):
    config, model = toy
    x = np.random.default_rng(8).normal(size=(123, config.feat_dim))
    a = encode_incremental(x, model.encoder, config.encoder)
    b = encode_incremental(x, model.encoder, config.encoder, chunk_sizes=[1] * 123)
    assert np.array_equal(a, b)


def test_emitted_frames_do_not_change_when_audio_is_appended(toy):
    config, model = toy
    rng = np.random.default_rng(9)
    x = rng.normal(size=(160, config.feat_dim))
    enc = StreamingEncoder(model.encoder, config.encoder, config.feat_dim)
    early = enc.push(x[:70])
    assert early.shape[0] > 0
    full = encode_incremental(x, model.encoder, config.encoder)
    assert np.array_equal(early, full[: early.shape[0]])
    y = np.concatenate([x[:70], rng.normal(size=(200, config.feat_dim))])
    assert np.array_equal(early, encode_incremental(y, model.encoder, config.encoder)[: early.shape[0]])


def test_peak_state_is_independent_of_length(toy):
    config, model = toy
    peaks = []
    for t in (120, 400, 900):
        enc = StreamingEncoder(model.encoder, config.encoder, config.feat_dim)
        x = np.random.default_rng(t).normal(size=(t, config.feat_dim))
        for row in x:
            enc.push(row)
        enc.finish()
        peaks.append(enc.peak_state)
    assert len(set(peaks)) == 1


def test_stream_rejects_push_after_finish(toy):
    config, model = toy
    enc = StreamingEncoder(model.encoder, config.encoder, config.feat_dim)
    enc.push(np.ones((5, config.feat_dim)))
    enc.finish()
    with pytest.raises(RuntimeError):
        enc.push(np.ones((1, config.feat_dim)))


def test_batch_encoder_shape_and_determinism(toy):
    config, model = toy
    x = np.random.default_rng(10).normal(size=(50, config.feat_dim))
    a = encode_batch(x, model.encoder, config.encoder).data
    assert a.shape == (downsampled_len(50), config.d_model)
    assert np.array_equal(a, encode_batch(x, model.encoder, config.encoder).data)


def test_batch_encoder_without_layers_is_normalised_frontend(toy):
    config, model = toy
    cfg = dataclasses.replace(config.encoder, n_layers=0)
    params = dataclasses.replace(model.encoder, layers=[])
    x = np.random.default_rng(11).normal(size=(30, config.feat_dim))
    f = frontend(x, params.frontend).data
    from mocha_stream.attention import positional_encoding

    f = f + positional_encoding(np.arange(f.shape[0]), config.d_model)
    mu, var = f.mean(axis=-1, keepdims=True), f.var(axis=-1, keepdims=True)
    ref = (f - mu) / np.sqrt(var + nx.LAYER_NORM_EPS)
    assert np.abs(encode_batch(x, params, cfg).data - ref).max() <= 1e-12


def test_encoder_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(block_len=4, hop_len=8)
    with pytest.raises(ValueError):
        EncoderConfig(hop_len=0)
    cfg = EncoderConfig()
    assert (cfg.n_layers, cfg.block_len, cfg.hop_len) == (12, 16, 8)
