"""Transformer decoder with batch, monotonic-chunkwise and median-shift attention.

Each decoder layer is: causal self-attention, source-target attention over the
encoder output ``h``, position-wise FFN; all pre-norm with residuals.  The
source-target attention (STA) runs in one of four ways:

* ``batch``: ordinary softmax over every encoder frame.
* monotonic chunkwise, training: expected attention ``beta`` obtained by
  marginalising the trigger distribution ``alpha`` over chunk endpoints.
* monotonic chunkwise, inference: each head scans forward from its last
  trigger position and attends to a ``w``-frame chunk ending where it fires.
* median shift: a fixed window re-centred on the weighted median of the
  previous step's attention.

Frame indices are 0-based internally; logs report them 1-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import (
    FeedForwardParams,
    LayerNormParams,
    MultiHeadParams,
    causal_mask,
    layer_norm,
    merge_heads,
    multi_head,
    positional_encoding,
    positionwise_ffn,
    split_heads,
)
from .numerics import Tensor

NORM_EPS = 1e-12
STA_MODES = ("batch", "mocha", "median")


@dataclass
class DecoderConfig:
    n_layers: int = 6
    d_model: int = 256
    n_heads: int = 4
    d_ff: int = 2048
    chunk_size: int = 8
    past_frames: bool = False
    dropout: float = 0.1
    max_len: int = 200
    median_window: int = 16

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.median_window < 1:
            raise ValueError("median_window must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class DecoderLayerParams:
    ln_san: LayerNormParams
    san: MultiHeadParams
    ln_sta: LayerNormParams
    sta: MultiHeadParams
    energy_g: Tensor  # (M,) trigger gain per head
    energy_r: Tensor  # (M,) trigger offset per head
    ln_ff: LayerNormParams
    ffn: FeedForwardParams


@dataclass
class DecoderParams:
    embed: Tensor  # (V, d_model)
    layers: list[DecoderLayerParams]
    ln_final: LayerNormParams
    out_w: Tensor  # (d_model, V)
    out_b: Tensor  # (V,)


@dataclass
class AttentionTrace:
    """Per-head ``M x I x L`` matrices recorded by the training attention."""

    p: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    u: np.ndarray
    alpha_original: np.ndarray | None = None


# -- energies -----------------------------------------------------------------


def monotonic_energy(qh: Tensor, kh: Tensor, g: Tensor, r: Tensor) -> Tensor:
    """``g * q.k / (sqrt(d) * (|q| + eps)) + r`` for every head/query/key.

    ``qh`` is ``M x I x d``, ``kh`` is ``M x L x d``; ``g`` and ``r`` are ``(M,)``.
    """
    m, i, d = qh.shape
    n_keys = kh.shape[1]
    cos = (nx.normalize_rows(qh, NORM_EPS) @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))
    full = (m, i, n_keys)
    return cos * g.reshape(m, 1, 1).expand(full) + r.reshape(m, 1, 1).expand(full)


def chunk_energies(qh: Tensor, kh: Tensor) -> Tensor:
    d = qh.shape[-1]
    return (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(d))


def energy(q, k, g: float, r: float) -> float:
    """Trigger energy for a single query/key pair."""
    q = np.asarray(q, dtype=np.float64).reshape(1, 1, -1)
    k = np.asarray(k, dtype=np.float64).reshape(1, 1, -1)
    with nx.no_grad():
        e = monotonic_energy(Tensor(q), Tensor(k), Tensor([g]), Tensor([r]))
    return float(e.data[0, 0, 0])


def chunk_energy(q, k) -> float:
    q = np.asarray(q, dtype=np.float64).reshape(1, 1, -1)
    k = np.asarray(k, dtype=np.float64).reshape(1, 1, -1)
    with nx.no_grad():
        return float(chunk_energies(Tensor(q), Tensor(k)).data[0, 0, 0])


def sta_projections(z_san: Tensor, h: Tensor, layer: DecoderLayerParams):
    """Per-head queries from the SAN output, keys and values from ``h``."""
    m = layer.sta.n_heads
    qh = split_heads(layer_norm(z_san, layer.ln_sta) @ layer.sta.w_q, m)
    kh = split_heads(h @ layer.sta.w_k, m)
    vh = split_heads(h @ layer.sta.w_v, m)
    return qh, kh, vh


# -- training-time monotonic attention ----------------------------------------


def trigger_probs(e: Tensor, noise_std: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """``sigmoid(energy + eps)`` with Gaussian pre-sigmoid noise when ``noise_std > 0``."""
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("trigger noise requires a seeded generator")
        e = e + rng.normal(0.0, noise_std, size=e.shape)
    return nx.sigmoid(e)


def monotonic_alpha(p: Tensor, modified: bool = True, alpha0: np.ndarray | None = None) -> Tensor:
    """Trigger-position distribution ``alpha`` for every step (``M x I x L``).

    ``alpha[i, j] = p[i, j] * sum_{k<=j} alpha[i-1, k] * prod_{l=k}^{j-1} (1 - p[i, l])``
    plus, when ``modified``, ``q[i, j] * alpha[i-1, j]`` with
    ``q[i, j] = prod_{k>j} (1 - p[i, k])``.  The inner sum is evaluated as a
    linear recurrence over ``j`` and ``q`` as a reverse recurrence, so no
    cumulative-product division is needed.  ``alpha0`` defaults to a one-hot
    on the first frame.
    """
    p = nx.as_tensor(p)
    squeeze = p.ndim == 2
    if squeeze:
        p = p.reshape(1, *p.shape)
    m, n_steps, n_frames = p.shape
    stay = 1.0 - p
    one = np.ones((m, n_steps, 1))
    # a[j] = 1 - p[j-1]; the j=0 entry multiplies s[-1] = 0 and is irrelevant
    carry = nx.concat([one, stay[:, :, :-1]], axis=2)
    if modified:
        tail = np.zeros((m, n_steps, n_frames))
        tail[:, :, -1] = 1.0
        q = nx.scan_linear(nx.concat([stay[:, :, 1:], one], axis=2), Tensor(tail), reverse=True)
    if alpha0 is None:
        alpha0 = np.zeros((m, n_frames))
        alpha0[:, 0] = 1.0
    prev = Tensor(np.broadcast_to(alpha0, (m, n_frames)))
    rows = []
    for i in range(n_steps):
        reach = nx.scan_linear(carry[:, i, :], prev)
        row = p[:, i, :] * reach
        if modified:
            row = row + q[:, i, :] * prev
        rows.append(row)
        prev = row
    alpha = nx.stack(rows, axis=1)
    return alpha[0] if squeeze else alpha


def alpha_original(p: Tensor) -> Tensor:
    """The unmodified recurrence: mass leaks whenever no trigger fires."""
    return monotonic_alpha(p, modified=False)


def chunk_band(n_frames: int, w: int, past_frames: bool = False) -> np.ndarray:
    """``band[k, j]`` is True when frame ``j`` lies in the chunk ending at ``k``."""
    k = np.arange(n_frames)[:, None]
    j = np.arange(n_frames)[None, :]
    lo = 0 if past_frames else k - w + 1
    return (j <= k) & (j >= lo)


def expected_attention(alpha: Tensor, u: Tensor, w: int, past_frames: bool = False) -> Tensor:
    """``beta[i, j] = sum_k alpha[i, k] * softmax_{chunk(k)}(u[i])[j]``.

    Each chunk softmax is computed with its own max subtraction, which keeps
    every term bounded regardless of sequence length.
    """
    alpha, u = nx.as_tensor(alpha), nx.as_tensor(u)
    squeeze = alpha.ndim == 2
    if squeeze:
        alpha, u = alpha.reshape(1, *alpha.shape), u.reshape(1, *u.shape)
    m, n_steps, n_frames = alpha.shape
    band = chunk_band(n_frames, w, past_frames)
    chunks = nx.softmax_rows(u.reshape(m, n_steps, 1, n_frames).expand((m, n_steps, n_frames, n_frames)), band)
    beta = (alpha.reshape(m, n_steps, 1, n_frames) @ chunks).reshape(m, n_steps, n_frames)
    return beta[0] if squeeze else beta


def mocha_train_attention(
    z_san: Tensor,
    h: Tensor,
    layer: DecoderLayerParams,
    cfg: DecoderConfig,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    with_original: bool = False,
):
    """Expected monotonic chunkwise attention for all steps at once.

    Returns ``(beta, trace)`` where ``beta`` is an ``M x I x L`` Tensor.
    """
    qh, kh, _ = sta_projections(z_san, h, layer)
    return _mocha_expected(qh, kh, layer, cfg, noise_std, rng, with_original)


def _mocha_expected(qh, kh, layer, cfg, noise_std, rng, with_original):
    e = monotonic_energy(qh, kh, layer.energy_g, layer.energy_r)
    u = chunk_energies(qh, kh)
    p = trigger_probs(e, noise_std, rng)
    alpha = monotonic_alpha(p)
    beta = expected_attention(alpha, u, cfg.chunk_size, cfg.past_frames)
    orig = None
    if with_original:
        with nx.no_grad():
            orig = alpha_original(Tensor(p.data)).data
    trace = AttentionTrace(p=p.data, alpha=alpha.data, beta=beta.data, u=u.data, alpha_original=orig)
    return beta, trace


# -- inference-time monotonic attention ---------------------------------------


def scan_trigger(p_row: np.ndarray, t_prev: int) -> tuple[int, bool]:
    """First ``j >= t_prev`` with ``p_row[j] >= 0.5``; stays at ``t_prev`` if none."""
    fired = np.flatnonzero(p_row[t_prev:] >= 0.5)
    if fired.size:
        return t_prev + int(fired[0]), True
    return t_prev, False


def chunk_range(t: int, w: int, past_frames: bool) -> tuple[int, int]:
    """Inclusive ``(start, end)`` of the chunk ending at ``t``."""
    return (0 if past_frames else max(0, t - w + 1)), t


def chunk_softmax(u_row: np.ndarray, t: int, w: int, past_frames: bool = False) -> np.ndarray:
    start, end = chunk_range(t, w, past_frames)
    out = np.zeros_like(u_row, dtype=np.float64)
    seg = u_row[start : end + 1] - u_row[start : end + 1].max()
    e = np.exp(seg)
    out[start : end + 1] = e / e.sum()
    return out


def hard_monotonic_positions(p: np.ndarray, t0: int = 0):
    """Run the inference trigger scan over precomputed ``M x I x L`` probabilities.

    Returns ``(t, fired)``, both ``M x I``.
    """
    m, n_steps, _ = p.shape
    t = np.zeros((m, n_steps), dtype=int)
    fired = np.zeros((m, n_steps), dtype=bool)
    for head in range(m):
        prev = t0
        for i in range(n_steps):
            prev, fired[head, i] = scan_trigger(p[head, i], prev)
            t[head, i] = prev
    return t, fired


def mocha_infer_step(z_san_i: Tensor, kv, t_prev: np.ndarray, layer: DecoderLayerParams, cfg: DecoderConfig):
    """One online STA step for one decoder layer.

    ``kv`` is ``(kh, vh)`` from :func:`sta_projections` (or an ``L x d_model``
    encoder output).  Returns ``(z_sta, t_new)``.
    """
    kh, vh = _as_kv(kv, layer)
    n_frames = kh.shape[1]
    if n_frames == 0:
        raise ValueError("cannot attend over an empty encoder output")
    m = layer.sta.n_heads
    qh = split_heads(layer_norm(z_san_i, layer.ln_sta) @ layer.sta.w_q, m)  # (M, 1, d)
    with nx.no_grad():
        p = nx._sigmoid_np(monotonic_energy(qh, kh, layer.energy_g, layer.energy_r).data[:, 0, :])
    u = chunk_energies(qh, kh)  # (M, 1, L)
    t_new = np.empty(m, dtype=int)
    mask = np.zeros((m, 1, n_frames), dtype=bool)
    for head in range(m):
        t_new[head], _ = scan_trigger(p[head], int(t_prev[head]))
        if t_new[head] < t_prev[head]:
            raise AssertionError("trigger position moved backwards")
        start, end = chunk_range(int(t_new[head]), cfg.chunk_size, cfg.past_frames)
        mask[head, 0, start : end + 1] = True
    weights = nx.softmax_rows(u, mask)
    out = merge_heads(weights @ vh) @ layer.sta.w_o
    return out, t_new


def _as_kv(kv, layer):
    if isinstance(kv, tuple):
        return kv
    m = layer.sta.n_heads
    return split_heads(kv @ layer.sta.w_k, m), split_heads(kv @ layer.sta.w_v, m)


def weighted_median(weights: np.ndarray) -> int:
    """Smallest index whose cumulative weight reaches one half."""
    c = np.cumsum(weights) / np.sum(weights)
    return int(np.searchsorted(c, 0.5 - 1e-12))


def median_window(center: int, n_frames: int, width: int) -> tuple[int, int]:
    """Inclusive ``width``-frame window around ``center`` clamped to ``[0, n)``."""
    start = min(max(center - width // 2, 0), max(n_frames - width, 0))
    return start, min(start + width, n_frames) - 1


def median_shift_step(z_san_i: Tensor, kv, centers: np.ndarray, layer: DecoderLayerParams, cfg: DecoderConfig):
    """Median-shift STA step.  Returns ``(z_sta, new_centers, windows)``.

    The window for this step comes from ``centers``; the centres handed to
    the next step are the weighted medians of this step's attention, never
    moving backwards.
    """
    kh, vh = _as_kv(kv, layer)
    n_frames = kh.shape[1]
    m = layer.sta.n_heads
    qh = split_heads(layer_norm(z_san_i, layer.ln_sta) @ layer.sta.w_q, m)
    u = chunk_energies(qh, kh)
    mask = np.zeros((m, 1, n_frames), dtype=bool)
    windows = []
    for head in range(m):
        start, end = median_window(int(centers[head]), n_frames, cfg.median_window)
        if cfg.past_frames:
            start = 0
        mask[head, 0, start : end + 1] = True
        windows.append((start, end))
    weights = nx.softmax_rows(u, mask)
    out = merge_heads(weights @ vh) @ layer.sta.w_o
    new_centers = np.array(
        [max(int(centers[hd]), weighted_median(weights.data[hd, 0])) for hd in range(m)], dtype=int
    )
    return out, new_centers, windows


# -- layers -------------------------------------------------------------------


def embed_tokens(tokens, params: DecoderParams, start_pos: int = 0) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.intp)
    d_model = params.embed.shape[1]
    return nx.getitem(params.embed, tokens) + positional_encoding(
        np.arange(start_pos, start_pos + len(tokens)), d_model
    )


def decoder_layer_batch(
    x: Tensor,
    h: Tensor,
    layer: DecoderLayerParams,
    cfg: DecoderConfig,
    sta_mode: str = "batch",
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    traces: list | None = None,
    with_original: bool = False,
) -> Tensor:
    """Teacher-forced decoder layer over all target positions at once."""
    n = x.shape[0]
    xn = layer_norm(x, layer.ln_san)
    z_san = x + nx.dropout(
        multi_head(xn, xn, xn, layer.san, causal_mask(n), cfg.dropout, rng), cfg.dropout, rng
    )
    if sta_mode == "batch":
        zn = layer_norm(z_san, layer.ln_sta)
        sta, weights = multi_head(zn, h, h, layer.sta, dropout=cfg.dropout, rng=rng, return_weights=True)
        if traces is not None:
            traces.append(weights.data)
    elif sta_mode == "mocha":
        qh, kh, vh = sta_projections(z_san, h, layer)
        beta, trace = _mocha_expected(qh, kh, layer, cfg, noise_std, rng, with_original)
        if traces is not None:
            traces.append(trace)
        sta = merge_heads(nx.dropout(beta, cfg.dropout, rng) @ vh) @ layer.sta.w_o
    else:
        raise ValueError(f"unknown training STA mode {sta_mode!r}")
    x = z_san + nx.dropout(sta, cfg.dropout, rng)
    ff = positionwise_ffn(layer_norm(x, layer.ln_ff), layer.ffn, cfg.dropout, rng)
    return x + nx.dropout(ff, cfg.dropout, rng)


def decoder_forward(
    tokens_in,
    h: Tensor,
    params: DecoderParams,
    cfg: DecoderConfig,
    sta_mode: str = "batch",
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    traces: list | None = None,
    with_original: bool = False,
) -> Tensor:
    """Teacher-forced logits ``I x V`` for input tokens ``<sos> y_1 ... y_{I-1}``."""
    x = embed_tokens(tokens_in, params)
    return decoder_tail(x, h, params, cfg, 0, sta_mode, noise_std, rng, traces, with_original)


def decoder_tail(
    x: Tensor,
    h: Tensor,
    params: DecoderParams,
    cfg: DecoderConfig,
    first_layer: int = 0,
    sta_mode: str = "batch",
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
    traces: list | None = None,
    with_original: bool = False,
) -> Tensor:
    """Logits from the input ``x`` of layer ``first_layer`` onwards."""
    for layer in params.layers[first_layer:]:
        x = decoder_layer_batch(x, h, layer, cfg, sta_mode, noise_std, rng, traces, with_original)
    return layer_norm(x, params.ln_final) @ params.out_w + params.out_b


# -- incremental decoding -----------------------------------------------------


@dataclass
class DecoderStreamState:
    n_layers: int
    n_heads: int
    tokens: list = field(default_factory=list)
    t: np.ndarray = None  # (N_d, M) trigger positions, 0-based
    centers: np.ndarray = None  # (N_d, M) median-window centres, 0-based
    san_cache: list = None  # per layer: list of normalised SAN input rows
    t_log: list = field(default_factory=list)  # (step, layer, head, position 1-based)

    def __post_init__(self):
        if self.t is None:
            self.t = np.zeros((self.n_layers, self.n_heads), dtype=int)
        if self.centers is None:
            self.centers = np.zeros((self.n_layers, self.n_heads), dtype=int)
        if self.san_cache is None:
            self.san_cache = [[] for _ in range(self.n_layers)]


def decoder_step(token: int, kv: list, params: DecoderParams, cfg: DecoderConfig, state: DecoderStreamState, mode: str):
    """Advance the decoder by one token; returns next-token log-probabilities."""
    step = len(state.tokens)
    state.tokens.append(int(token))
    x = embed_tokens([token], params, start_pos=step)
    for n, layer in enumerate(params.layers):
        xn = layer_norm(x, layer.ln_san)
        state.san_cache[n].append(xn.data)
        keys = Tensor(np.concatenate(state.san_cache[n], axis=0))
        z_san = x + multi_head(xn, keys, keys, layer.san)
        if mode == "batch":
            kh, vh = kv[n]
            qh = split_heads(layer_norm(z_san, layer.ln_sta) @ layer.sta.w_q, layer.sta.n_heads)
            weights = nx.softmax_rows(chunk_energies(qh, kh))
            sta = merge_heads(weights @ vh) @ layer.sta.w_o
        elif mode == "mocha":
            prev = state.t[n].copy()
            sta, state.t[n] = mocha_infer_step(z_san, kv[n], prev, layer, cfg)
            if (state.t[n] < prev).any():
                raise AssertionError("monotonicity violated")
            state.t_log.extend((step + 1, n, hd, int(state.t[n, hd]) + 1) for hd in range(layer.sta.n_heads))
        elif mode == "median":
            sta, state.centers[n], windows = median_shift_step(z_san, kv[n], state.centers[n], layer, cfg)
            state.t_log.extend((step + 1, n, hd, windows[hd][1] + 1) for hd in range(layer.sta.n_heads))
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        x = z_san + sta
        x = x + positionwise_ffn(layer_norm(x, layer.ln_ff), layer.ffn)
    logits = layer_norm(x, params.ln_final) @ params.out_w + params.out_b
    return nx.log_softmax(logits).data[0]


@dataclass
class DecodeResult:
    tokens: list
    truncated: bool
    t_log: list


def greedy_decode(
    h,
    params: DecoderParams,
    cfg: DecoderConfig,
    mode: str = "batch",
    sos: int = 0,
    eos: int = 1,
    max_len: int | None = None,
) -> DecodeResult:
    """Argmax decoding from ``<sos>`` until ``<eos>`` or ``max_len`` tokens."""
    if mode not in STA_MODES:
        raise ValueError(f"unknown decode mode {mode!r}")
    max_len = cfg.max_len if max_len is None else max_len
    h = nx.as_tensor(h)
    if h.shape[0] == 0:
        raise ValueError("empty encoder output")
    out: list[int] = []
    state = DecoderStreamState(len(params.layers), cfg.n_heads)
    with nx.no_grad():
        kv = [
            (split_heads(h @ layer.sta.w_k, layer.sta.n_heads), split_heads(h @ layer.sta.w_v, layer.sta.n_heads))
            for layer in params.layers
        ]
        token = sos
        for _ in range(max_len):
            logp = decoder_step(token, kv, params, cfg, state, mode)
            token = int(np.argmax(logp))
            if token == eos:
                return DecodeResult(out, False, state.t_log)
            out.append(token)
    return DecodeResult(out, True, state.t_log)
