"""Model assembly, initialisation, loss and checkpoint serialisation."""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import FeedForwardParams, LayerNormParams, MultiHeadParams
from .decoder import DecoderConfig, DecoderLayerParams, DecoderParams, decoder_forward, greedy_decode
from .encoder import (
    EncoderConfig,
    EncoderLayerParams,
    EncoderParams,
    FrontendParams,
    conv_out_len,
    encode_batch,
    encode_incremental,
    encode_stream,
)
from .numerics import ShapeError, Tensor

SOS, EOS = 0, 1
CKPT_MAGIC = "MOCHACKPT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    vocab_size: int = 52
    feat_dim: int = 81
    seed: int = 0
    precision: str = "float64"
    # optimisation
    lr: float = 1e-3
    betas: tuple = (0.9, 0.98)
    adam_eps: float = 1e-9
    noam: bool = False
    noam_scale: float = 5.0
    warmup_steps: int = 25000
    clip_norm: float | None = None
    batch_size: int = 1
    noise_std: float = 1.0
    encoder_mode: str = "stream"
    sta_mode: str = "mocha"
    # trigger energy init; None means 1/sqrt(d_head)
    trigger_gain_init: float | None = None
    trigger_offset_init: float = -1.0

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        self.betas = tuple(self.betas)
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be at least 3 (<sos>, <eos>, one symbol)")
        if self.feat_dim < 1:
            raise ValueError("feat_dim must be positive")
        if self.encoder.d_model != self.decoder.d_model or self.encoder.n_heads != self.decoder.n_heads:
            raise ValueError("encoder and decoder must share d_model and n_heads")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")
        if self.encoder_mode not in ("stream", "batch"):
            raise ValueError("encoder_mode must be 'stream' or 'batch'")
        if self.sta_mode not in ("mocha", "batch"):
            raise ValueError("sta_mode must be 'mocha' or 'batch'")

    @property
    def d_model(self) -> int:
        return self.encoder.d_model

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def toy_config(vocab_size: int = 12, feat_dim: int = 8, **overrides) -> ModelConfig:
    """Desk-scale configuration keeping the full-size structural ratios."""
    enc = EncoderConfig(n_layers=2, d_model=32, n_heads=4, d_ff=64, block_len=8, hop_len=4, dropout=0.0)
    dec = DecoderConfig(
        n_layers=2, d_model=32, n_heads=4, d_ff=64, chunk_size=4, dropout=0.0, max_len=60, median_window=8
    )
    cfg = dict(encoder=enc, decoder=dec, vocab_size=vocab_size, feat_dim=feat_dim, lr=2e-3, noise_std=1.0)
    cfg.update(overrides)
    return ModelConfig(**cfg)


@dataclass
class Model:
    encoder: EncoderParams
    decoder: DecoderParams


# -- parameters ---------------------------------------------------------------


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Walk nested parameter dataclasses/lists in declaration order."""
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    out = []
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.extend(named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.extend(named_tensors(item, f"{prefix}.{i}"))
    return out


def parameters(model: Model) -> list[Tensor]:
    return [t for _, t in named_tensors(model)]


def init_model(config: ModelConfig) -> Model:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains.

    Trigger gains start at ``1/sqrt(d)`` and offsets at ``-1`` unless the
    config overrides them.
    """
    rng = np.random.default_rng(config.seed)
    dtype = np.dtype(config.precision)
    d = config.d_model
    m = config.encoder.n_heads

    def mat(rows, cols):
        bound = math.sqrt(6.0 / (rows + cols))
        return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True, dtype=dtype)

    def vec(n, value=0.0):
        return Tensor(np.full(n, value), requires_grad=True, dtype=dtype)

    def ln():
        return LayerNormParams(vec(d, 1.0), vec(d))

    def mha():
        return MultiHeadParams(mat(d, d), mat(d, d), mat(d, d), mat(d, d), m)

    def ffn(d_ff):
        return FeedForwardParams(mat(d, d_ff), vec(d_ff), mat(d_ff, d), vec(d))

    f2 = conv_out_len(conv_out_len(config.feat_dim))
    front = FrontendParams(mat(9, d), vec(d), mat(9 * d, d), vec(d), mat(f2 * d, d), vec(d))
    enc_layers = [EncoderLayerParams(ln(), mha(), ln(), ffn(config.encoder.d_ff)) for _ in range(config.encoder.n_layers)]
    encoder = EncoderParams(front, enc_layers, ln())

    d_head = d // m
    g0 = config.trigger_gain_init if config.trigger_gain_init is not None else 1.0 / math.sqrt(d_head)
    dec_layers = [
        DecoderLayerParams(
            ln(), mha(), ln(), mha(), vec(m, g0), vec(m, config.trigger_offset_init), ln(), ffn(config.decoder.d_ff)
        )
        for _ in range(config.decoder.n_layers)
    ]
    v = config.vocab_size
    decoder = DecoderParams(mat(v, d), dec_layers, ln(), mat(d, v), vec(v))
    return Model(encoder, decoder)


def param_count(model: Model) -> int:
    return sum(t.size for t in parameters(model))


# -- forward ------------------------------------------------------------------


def encode(model: Model, x: np.ndarray, config: ModelConfig, rng=None, mode: str | None = None) -> Tensor:
    mode = mode or config.encoder_mode
    if mode == "stream":
        return encode_stream(x, model.encoder, config.encoder, rng)
    return encode_batch(x, model.encoder, config.encoder, rng)


def utterance_loss(
    model: Model,
    x: np.ndarray,
    tokens,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
    noise_std: float | None = None,
    traces: list | None = None,
) -> Tensor:
    """Teacher-forced mean cross-entropy (nats/token); ``tokens`` ends with ``<eos>``."""
    tokens = list(tokens)
    noise = config.noise_std if noise_std is None else noise_std
    h = encode(model, x, config, rng)
    logits = decoder_forward([SOS] + tokens[:-1], h, model.decoder, config.decoder, config.sta_mode, noise, rng, traces)
    logp = nx.log_softmax(logits)
    picked = logp[np.arange(len(tokens)), np.asarray(tokens, dtype=np.intp)]
    return -picked.mean()


def transcribe(model: Model, x: np.ndarray, config: ModelConfig, mode: str = "batch", past_frames: bool | None = None):
    """Greedy transcription; online modes use the incremental encoder."""
    dec_cfg = config.decoder
    if past_frames is not None and past_frames != dec_cfg.past_frames:
        dec_cfg = dataclasses.replace(dec_cfg, past_frames=past_frames)
    with nx.no_grad():
        if config.encoder_mode == "stream":
            h = encode_incremental(x, model.encoder, config.encoder)
        else:
            h = encode_batch(x, model.encoder, config.encoder).data
    return greedy_decode(h, model.decoder, dec_cfg, mode, SOS, EOS)


# -- checkpoints --------------------------------------------------------------


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: Model
    config: ModelConfig
    meta: dict


def save_checkpoint(model: Model, path, config: ModelConfig, meta: dict | None = None) -> None:
    """Write a UTF-8 JSON manifest followed by a little-endian float32 payload."""
    tensors = []
    chunks = []
    offset = 0
    for name, t in named_tensors(model):
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        tensors.append(
            {"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "dtype": "<f4",
        "config": config.to_dict(),
        "meta": meta or {},
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "tensors": tensors,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION} {len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(payload)


def read_checkpoint_manifest(path) -> tuple[dict, bytes]:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    header = blob[:nl].decode("ascii", errors="replace").split()
    if len(header) != 3 or header[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(header[1]) != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header[1]}")
    n = int(header[2])
    manifest = json.loads(blob[nl + 1 : nl + 1 + n].decode("utf-8"))
    payload = blob[nl + 1 + n :]
    if len(payload) != manifest["payload_bytes"]:
        raise ChecksumError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if zlib.crc32(payload) != manifest["payload_crc32"]:
        raise ChecksumError(f"{path}: payload CRC-32 mismatch")
    return manifest, payload


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Load a checkpoint, validating checksums and every tensor's shape.

    With ``config`` the parameter layout is taken from it instead of the
    stored configuration, so a mismatch is reported tensor by tensor.
    """
    manifest, payload = read_checkpoint_manifest(path)
    stored = ModelConfig.from_dict(manifest["config"])
    config = config or stored
    model = init_model(config)
    index = {entry["name"]: entry for entry in manifest["tensors"]}
    dtype = np.dtype(config.precision)
    for name, t in named_tensors(model):
        entry = index.get(name)
        if entry is None:
            raise MissingTensorError(f"{path}: tensor {name!r} missing from checkpoint")
        if tuple(entry["shape"]) != t.shape:
            raise ShapeError(f"{path}: tensor {name!r} has shape {tuple(entry['shape'])}, config expects {t.shape}")
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"{path}: CRC-32 mismatch in tensor {name!r}")
        t.data = np.frombuffer(raw, dtype="<f4").astype(dtype).reshape(t.shape)
        t.grad = None
    return Checkpoint(model, config, manifest.get("meta", {}))


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Same container for auxiliary arrays (optimizer moments), stored as float64."""
    tensors, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": CKPT_MAGIC,
        "version": CKPT_VERSION,
        "dtype": "<f8",
        "meta": meta or {},
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "tensors": tensors,
    }
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION} {len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    manifest, payload = read_checkpoint_manifest(path)
    out = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if zlib.crc32(raw) != entry["crc32"]:
            raise ChecksumError(f"{path}: CRC-32 mismatch in {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).copy()
    return out, manifest.get("meta", {})
