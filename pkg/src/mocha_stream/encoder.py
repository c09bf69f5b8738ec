"""Contextual block-processing encoder and the full-attention batch baseline.

Block ``b`` covers downsampled frames ``[b*hop, b*hop + block_len)``.  Each
layer attends over the block plus one extra row: the query side carries the
block's own context vector, the key/value side carries the context vector the
previous block produced one layer down.  The extra output row becomes the
context vector handed to the next block.

Output assembly keeps the central ``hop`` frames of every block; the first
block also emits its leading margin and the last block its trailing frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    FeedForwardParams,
    LayerNormParams,
    MultiHeadParams,
    layer_norm,
    multi_head,
    positional_encoding,
    positionwise_ffn,
)
from .numerics import ShapeError, Tensor

logger = logging.getLogger(__name__)

KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass
class EncoderConfig:
    n_layers: int = 12
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 2048
    block_len: int = 16
    hop_len: int = 8
    dropout: float = 0.1

    def __post_init__(self):
        if self.block_len <= 0 or self.hop_len <= 0:
            raise ValueError("block_len and hop_len must be positive")
        if self.hop_len > self.block_len:
            raise ValueError("hop_len must not exceed block_len")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def margin(self) -> int:
        return (self.block_len - self.hop_len) // 2


@dataclass
class FrontendParams:
    """Two 3x3 stride-2 convolutions (1 -> C -> C channels) and a projection.

    Both convolutions zero-pad one frame/bin on each side.  ``conv1_w`` is
    ``9 x C`` and ``conv2_w`` is ``9C x C``; patch entries are ordered (time
    offset, freq offset[, channel]).  ``proj_w`` maps the flattened
    ``F'' * C`` conv output to ``d_model``.
    """

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    proj_w: Tensor
    proj_b: Tensor


@dataclass
class EncoderLayerParams:
    ln_att: LayerNormParams
    att: MultiHeadParams
    ln_ff: LayerNormParams
    ffn: FeedForwardParams


@dataclass
class EncoderParams:
    frontend: FrontendParams
    layers: list[EncoderLayerParams]
    ln_final: LayerNormParams


def _valid_len(n: int) -> int:
    return max((n - KERNEL) // STRIDE + 1, 0)


def conv_out_len(n: int) -> int:
    """Output length of one padded kernel-3 stride-2 convolution: ``floor((n-1)/2) + 1``."""
    return _valid_len(n + 2 * PAD) if n > 0 else 0


def downsampled_len(n_raw: int) -> int:
    """``ceil(T / 4)`` for ``T >= 1``."""
    return conv_out_len(conv_out_len(n_raw))


# -- frontend -----------------------------------------------------------------


def _patch_index(n_time: int, n_freq: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of every 3x3 stride-2 patch of an already padded
    ``n_time x n_freq`` grid; both arrays are ``(To*Fo, 9)``."""
    to, fo = _valid_len(n_time), _valid_len(n_freq)
    kt, kf = np.meshgrid(np.arange(KERNEL), np.arange(KERNEL), indexing="ij")
    ot, of = np.meshgrid(np.arange(to), np.arange(fo), indexing="ij")
    rows = (STRIDE * ot.reshape(-1, 1) + kt.reshape(1, -1)).astype(np.intp)
    cols = (STRIDE * of.reshape(-1, 1) + kf.reshape(1, -1)).astype(np.intp)
    return rows, cols


def _pad_grid(h: Tensor) -> Tensor:
    """Zero-pad a ``t x f x C`` tensor by one on both sides of the first two axes."""
    t, f, c = h.shape
    zf = np.zeros((t, PAD, c), dtype=h.data.dtype)
    h = nx.concat([zf, h, zf], axis=1)
    zt = np.zeros((PAD, f + 2 * PAD, c), dtype=h.data.dtype)
    return nx.concat([zt, h, zt], axis=0)


def frontend(x: np.ndarray, p: FrontendParams) -> Tensor:
    """Differentiable whole-utterance frontend: ``T x F`` -> ``L x d_model``."""
    x = np.asarray(x, dtype=p.conv1_w.data.dtype)
    t, f = x.shape
    c = p.conv1_b.shape[0]
    t1, f1 = conv_out_len(t), conv_out_len(f)
    t2, f2 = conv_out_len(t1), conv_out_len(f1)
    if p.proj_w.shape[0] != f2 * c:
        raise ShapeError(f"feature dim {f} does not match frontend projection {p.proj_w.shape}")
    if t2 == 0:
        return Tensor(np.zeros((0, p.proj_b.shape[0]), dtype=x.dtype))
    xp = np.pad(x, PAD)
    rows, cols = _patch_index(t + 2 * PAD, f + 2 * PAD)
    h1 = nx.relu(Tensor(xp[rows, cols]) @ p.conv1_w + p.conv1_b)  # (t1*f1, C)
    h1 = _pad_grid(h1.reshape(t1, f1, c))
    fp = f1 + 2 * PAD
    r2, c2 = _patch_index(t1 + 2 * PAD, fp)
    h2 = nx.getitem(h1.reshape(-1, c), r2 * fp + c2).reshape(t2 * f2, KERNEL * KERNEL * c)
    h2 = nx.relu(h2 @ p.conv2_w + p.conv2_b)
    return h2.reshape(t2, f2 * c) @ p.proj_w + p.proj_b


@dataclass
class FrontendCache:
    """Boundary frames kept between incremental :func:`downsample` calls.

    Rows are stored already zero-padded along frequency; each stage starts
    with one zero row standing for the left time padding.
    """

    raw: list | None = None  # trailing padded raw frames, <= 3
    conv1: list | None = None  # trailing padded conv1 rows, <= 3
    n_raw: int = 0
    n_out: int = 0
    flushed: bool = False

    def size(self) -> int:
        return sum(r.size for r in self.raw or ()) + sum(r.size for r in self.conv1 or ())


def _conv1_row(raw3: np.ndarray, p: FrontendParams) -> np.ndarray:
    rows, cols = _patch_index(KERNEL, raw3.shape[1])
    h = np.maximum(raw3[rows, cols] @ p.conv1_w.data + p.conv1_b.data, 0.0)  # (f1, C)
    return np.pad(h, ((PAD, PAD), (0, 0)))


def _conv2_frame(c3: np.ndarray, p: FrontendParams) -> np.ndarray:
    c = c3.shape[2]
    rows, cols = _patch_index(KERNEL, c3.shape[1])
    patch = c3[rows, cols]  # (f2, 9, C)
    f2 = patch.shape[0]
    h = np.maximum(patch.reshape(f2, KERNEL * KERNEL * c) @ p.conv2_w.data + p.conv2_b.data, 0.0)
    return h.reshape(1, f2 * c) @ p.proj_w.data + p.proj_b.data


def _feed_conv1(row: np.ndarray, cache: FrontendCache, p: FrontendParams, out: list) -> None:
    cache.conv1.append(row)
    if len(cache.conv1) == KERNEL:
        out.append(_conv2_frame(np.stack(cache.conv1), p))
        cache.conv1 = cache.conv1[STRIDE:]
        cache.n_out += 1


def _feed_raw(row: np.ndarray, cache: FrontendCache, p: FrontendParams, out: list) -> None:
    cache.raw.append(row)
    if len(cache.raw) == KERNEL:
        _feed_conv1(_conv1_row(np.stack(cache.raw), p), cache, p, out)
        cache.raw = cache.raw[STRIDE:]


def downsample(x: np.ndarray, p: FrontendParams, cache: FrontendCache | None = None, final: bool = False):
    """Incremental frontend.  Returns ``(frames, cache)``.

    Every output frame is computed by the same fixed-shape routine, so any
    split of the input into consecutive calls yields bit-identical frames.
    ``final=True`` appends the right-hand zero padding and emits the last
    frames; the total then equals :func:`downsampled_len` of the input length.
    """
    cache = FrontendCache() if cache is None else cache
    if cache.flushed:
        raise RuntimeError("frontend cache already flushed")
    x = np.asarray(x, dtype=p.conv1_w.data.dtype)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    out: list[np.ndarray] = []
    if cache.raw is None and x.shape[0]:
        cache.raw = [np.zeros(x.shape[1] + 2 * PAD, dtype=x.dtype)]
        f1 = conv_out_len(x.shape[1]) + 2 * PAD
        cache.conv1 = [np.zeros((f1, p.conv1_b.shape[0]), dtype=x.dtype)]
    for row in x:
        _feed_raw(np.pad(row, PAD), cache, p, out)
        cache.n_raw += 1
    if final:
        cache.flushed = True
        if cache.n_raw:
            _feed_raw(np.zeros_like(cache.raw[0]), cache, p, out)
            if cache.n_out < downsampled_len(cache.n_raw):
                _feed_conv1(np.zeros_like(cache.conv1[0]), cache, p, out)
    d = p.proj_b.shape[0]
    frames = np.concatenate(out, axis=0) if out else np.zeros((0, d), dtype=x.dtype)
    return frames, cache


# -- encoder layers -----------------------------------------------------------


def init_context(block_frames: Tensor) -> Tensor:
    """Mean of a block's input rows, as a ``1 x d_model`` context vector."""
    if block_frames.shape[0] == 0:
        raise ValueError("cannot initialise a context from an empty block")
    return block_frames.mean(axis=0, keepdims=True)


def encoder_layer(x: Tensor, p: EncoderLayerParams, dropout: float = 0.0, rng=None) -> Tensor:
    """Standard pre-norm self-attention layer (batch baseline)."""
    xn = layer_norm(x, p.ln_att)
    x = x + nx.dropout(multi_head(xn, xn, xn, p.att, dropout=dropout, rng=rng), dropout, rng)
    return x + nx.dropout(positionwise_ffn(layer_norm(x, p.ln_ff), p.ffn, dropout, rng), dropout, rng)


def encode_block(
    block: Tensor,
    prev_contexts: list[Tensor],
    own_init: Tensor,
    layers: list[EncoderLayerParams],
    dropout: float = 0.0,
    rng=None,
):
    """Encode one block with context inheritance.

    ``prev_contexts[n]`` is the context vector the previous block produced
    at layer ``n`` (index 0 is its input average).  Returns the block output
    and this block's contexts ``[c^1, ..., c^N]``.
    """
    if len(prev_contexts) != len(layers):
        raise ValueError(f"expected {len(layers)} previous contexts, got {len(prev_contexts)}")
    z, c = block, own_init
    new_contexts = []
    for n, layer in enumerate(layers):
        q_in = nx.concat([z, c], axis=0)
        kv_in = nx.concat([z, prev_contexts[n]], axis=0)
        qn = layer_norm(q_in, layer.ln_att)
        kvn = layer_norm(kv_in, layer.ln_att)
        att = multi_head(qn, kvn, kvn, layer.att, dropout=dropout, rng=rng)
        inter = nx.dropout(att, dropout, rng) + kv_in
        out = inter + nx.dropout(positionwise_ffn(layer_norm(inter, layer.ln_ff), layer.ffn, dropout, rng), dropout, rng)
        z, c = out[:-1], out[-1:]
        new_contexts.append(c)
    return z, new_contexts


def block_plan(n_frames: int, block_len: int, hop_len: int) -> list[tuple[int, int, int]]:
    """``(start, emit_lo, emit_hi)`` per block; emitted ranges partition ``[0, n)``."""
    if n_frames <= 0:
        return []
    margin = (block_len - hop_len) // 2
    plan = []
    start = 0
    while True:
        last = start + block_len >= n_frames
        lo = 0 if start == 0 else start + margin
        hi = n_frames if last else start + margin + hop_len
        plan.append((start, lo, hi))
        if last:
            return plan
        start += hop_len


def _block_input(frames: Tensor, offset: int, start: int, cfg: EncoderConfig) -> tuple[Tensor, int]:
    """Rows ``offset..offset+block_len`` of ``frames``, whose first row is
    global frame ``start``; positional encodings use global indices."""
    n = frames.shape[0]
    idx = np.minimum(np.arange(offset, offset + cfg.block_len), n - 1)  # pad by repeating the last frame
    pos = np.arange(start, start + cfg.block_len)
    rows = nx.getitem(frames, idx) + positional_encoding(pos, cfg.d_model)
    return rows, min(n - offset, cfg.block_len)


def encode_frames_blockwise(frames: Tensor, params: EncoderParams, cfg: EncoderConfig, rng=None) -> Tensor:
    """Blockwise encoding of already-downsampled frames (differentiable)."""
    n = frames.shape[0]
    if n == 0:
        return Tensor(np.zeros((0, cfg.d_model)))
    prev = None
    pieces = []
    for start, lo, hi in block_plan(n, cfg.block_len, cfg.hop_len):
        rows, n_real = _block_input(frames, start, start, cfg)
        own = init_context(rows[:n_real])
        if prev is None:
            prev = [own] * cfg.n_layers
        z, ctx = encode_block(rows, prev, own, params.layers, cfg.dropout, rng)
        prev = [own] + ctx[:-1]
        z = layer_norm(z, params.ln_final)
        pieces.append(z[lo - start : hi - start])
    return nx.concat(pieces, axis=0)


def encode_stream(x: np.ndarray, params: EncoderParams, cfg: EncoderConfig, rng=None) -> Tensor:
    """Whole-utterance contextual block encoding (differentiable path)."""
    return encode_frames_blockwise(frontend(x, params.frontend), params, cfg, rng)


def encode_batch(x: np.ndarray, params: EncoderParams, cfg: EncoderConfig, rng=None) -> Tensor:
    """Full self-attention encoder without blocks or context vectors."""
    h = frontend(x, params.frontend)
    if h.shape[0] == 0:
        return h
    h = h + positional_encoding(np.arange(h.shape[0]), cfg.d_model)
    for layer in params.layers:
        h = encoder_layer(h, layer, cfg.dropout, rng)
    return layer_norm(h, params.ln_final)


# -- streaming ----------------------------------------------------------------


@dataclass
class EncoderContextState:
    block_index: int = 0
    contexts: list | None = None  # c_{b-1}^n, n = 0..N_e-1, each 1 x d_model
    emitted: int = 0


class StreamingEncoder:
    """Incremental encoder fed raw frames in arbitrary chunks.

    A block is encoded as soon as all of its downsampled frames exist, so
    the computation depends only on frame indices, never on how the caller
    split the input.  ``peak_state`` tracks the largest number of floats held
    between frames (contexts, frontend cache, pending frames, last block).
    """

    def __init__(self, params: EncoderParams, cfg: EncoderConfig, feat_dim: int):
        self.params = params
        self.feat_dim = feat_dim
        self.cfg = cfg
        self.cache = FrontendCache()
        self.state = EncoderContextState()
        self.pending: list[np.ndarray] = []  # downsampled frames from pending_start on
        self.pending_start = 0
        self.last_block: tuple[int, np.ndarray] | None = None
        self.finished = False
        self.peak_state = 0

    def state_size(self) -> int:
        n = self.cache.size() + sum(f.size for f in self.pending)
        if self.state.contexts is not None:
            n += sum(c.size for c in self.state.contexts)
        if self.last_block is not None:
            n += self.last_block[1].size
        return n

    def push(self, raw: np.ndarray) -> np.ndarray:
        """Feed raw frames; return newly final encoder frames."""
        if self.finished:
            raise RuntimeError("stream already finished")
        out = []
        raw = np.asarray(raw, dtype=self.params.frontend.conv1_w.data.dtype).reshape(-1, self.feat_dim)
        for row in raw:
            frames, self.cache = downsample(row, self.params.frontend, self.cache)
            self._absorb(frames, out)
        return self._join(out)

    def _absorb(self, frames: np.ndarray, out: list) -> None:
        self.pending.extend(frames)
        while self._available() >= self._next_start() + self.cfg.block_len:
            out.append(self._run_block(final=False))
        self.peak_state = max(self.peak_state, self.state_size())

    def finish(self) -> np.ndarray:
        """Flush at end of stream: emit every remaining frame."""
        self.finished = True
        out = []
        frames, self.cache = downsample(np.zeros((0, self.feat_dim)), self.params.frontend, self.cache, final=True)
        self._absorb(frames, out)
        total = self._available()
        if self.last_block is not None:
            start, z = self.last_block
            if start + self.cfg.block_len >= total:
                # the last full block was the final one; release its tail
                lo = self.state.emitted - start
                out.append(z[lo : total - start])
                self.state.emitted = total
        while self.state.emitted < total:
            out.append(self._run_block(final=True))
        self.last_block = None
        return self._join(out)

    # internals

    def _available(self) -> int:
        return self.pending_start + len(self.pending)

    def _next_start(self) -> int:
        return self.state.block_index * self.cfg.hop_len

    def _run_block(self, final: bool) -> np.ndarray:
        cfg = self.cfg
        start = self._next_start()
        total = self._available()
        lo = 0 if start == 0 else start + cfg.margin
        last = final and start + cfg.block_len >= total
        hi = total if last else start + cfg.margin + cfg.hop_len
        with nx.no_grad():
            off = start - self.pending_start
            window = Tensor(np.stack(self.pending[off : off + cfg.block_len]))
            rows, n_real = _block_input(window, 0, start, cfg)
            own = init_context(rows[:n_real])
            prev = self.state.contexts if self.state.contexts is not None else [own.data] * cfg.n_layers
            z, ctx = encode_block(rows, [Tensor(c) for c in prev], own, self.params.layers)
            z = layer_norm(z, self.params.ln_final).data
        self.state.contexts = [own.data] + [c.data for c in ctx[:-1]]
        self.state.block_index += 1
        emitted = z[lo - start : hi - start]
        self.state.emitted = hi
        self.last_block = (start, z)
        # keep only frames later blocks can still use
        drop = min(self._next_start(), total) - self.pending_start
        if drop > 0:
            self.pending = self.pending[drop:]
            self.pending_start += drop
        return emitted

    def _join(self, parts: list[np.ndarray]) -> np.ndarray:
        if not parts:
            return np.zeros((0, self.cfg.d_model))
        return np.concatenate(parts, axis=0)


def encode_incremental(x: np.ndarray, params: EncoderParams, cfg: EncoderConfig, chunk_sizes=None) -> np.ndarray:
    """Run :class:`StreamingEncoder` over ``x`` split into the given chunk sizes."""
    enc = StreamingEncoder(params, cfg, x.shape[1])
    parts = []
    if chunk_sizes is None:
        parts.append(enc.push(x))
    else:
        pos = 0
        for size in chunk_sizes:
            parts.append(enc.push(x[pos : pos + size]))
            pos += size
        if pos < len(x):
            parts.append(enc.push(x[pos:]))
    parts.append(enc.finish())
    return np.concatenate(parts, axis=0)
