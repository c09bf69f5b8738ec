"""Synthetic transduction data and the on-disk feature/vocabulary formats."""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOS_TOKEN = "<sos>"
EOS_TOKEN = "<eos>"
CSV_LIMIT = 1 << 20


@dataclass
class SynthSpec:
    alphabet: int = 10
    frames_per_token: int = 4
    noise: float = 0.1
    seed: int = 0
    n_utts: int = 100
    min_tokens: int = 4
    max_tokens: int = 12
    feat_dim: int = 8

    def validate(self, vocab_size: int | None = None) -> None:
        if self.alphabet < 1:
            raise ValueError("alphabet must contain at least one symbol")
        if vocab_size is not None and self.alphabet > vocab_size - 2:
            raise ValueError(f"alphabet of {self.alphabet} symbols does not fit a vocabulary of {vocab_size}")
        if self.frames_per_token < 1 or self.min_tokens < 1 or self.max_tokens < self.min_tokens:
            raise ValueError("invalid token/frame counts")


@dataclass
class SynthDataset:
    utterances: list = field(default_factory=list)  # (features T x F, token ids ending in <eos>)
    spec: SynthSpec | None = None
    prototypes: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def split(self, n_first: int) -> tuple["SynthDataset", "SynthDataset"]:
        return (
            SynthDataset(self.utterances[:n_first], self.spec, self.prototypes),
            SynthDataset(self.utterances[n_first:], self.spec, self.prototypes),
        )


def gen_synth(spec: SynthSpec, vocab_size: int | None = None) -> SynthDataset:
    """Render each token (including the final ``<eos>``) as ``k`` noisy copies of its prototype.

    Token ids: 0 ``<sos>``, 1 ``<eos>``, symbols from 2.
    """
    spec.validate(vocab_size)
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.normal(size=(spec.alphabet + 2, spec.feat_dim))
    prototypes[0] = 0.0  # <sos> is never rendered
    utts = []
    for _ in range(spec.n_utts):
        n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = [int(t) for t in rng.integers(2, spec.alphabet + 2, size=n)] + [1]
        frames = np.repeat(prototypes[tokens], spec.frames_per_token, axis=0)
        if spec.noise > 0:
            frames = frames + rng.normal(0.0, spec.noise, size=frames.shape)
        utts.append((frames, tokens))
    return SynthDataset(utts, spec, prototypes)


def symbol_names(alphabet: int) -> list[str]:
    if alphabet <= 26:
        return list(string.ascii_lowercase[:alphabet])
    return [f"s{i}" for i in range(alphabet)]


def vocabulary(alphabet: int) -> list[str]:
    return [SOS_TOKEN, EOS_TOKEN] + symbol_names(alphabet)


# -- files --------------------------------------------------------------------


def write_features(path, x: np.ndarray) -> None:
    """Header line ``"rows cols"``, then little-endian float32 row-major."""
    x = np.asarray(x)
    with open(path, "wb") as fh:
        fh.write(f"{x.shape[0]} {x.shape[1]}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        if path.stat().st_size >= CSV_LIMIT:
            raise ValueError(f"{path}: CSV feature files must be smaller than 1 MB")
        return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    try:
        rows, cols = (int(v) for v in blob[:nl].decode("ascii").split())
    except ValueError as exc:
        raise ValueError(f"{path}: bad feature header") from exc
    data = np.frombuffer(blob[nl + 1 :], dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(np.float64)


def write_vocab(path, tokens: list[str]) -> None:
    Path(path).write_text("".join(t + "\n" for t in tokens), encoding="utf-8")


def read_vocab(path) -> list[str]:
    tokens = Path(path).read_text(encoding="utf-8").splitlines()
    if len(tokens) < 3 or tokens[0] != SOS_TOKEN or tokens[1] != EOS_TOKEN:
        raise ValueError(f"{path}: vocabulary must start with {SOS_TOKEN} and {EOS_TOKEN}")
    return tokens


def encode_transcript(text: str, vocab: list[str]) -> list[int]:
    """Whitespace-separated symbols to ids, with ``<eos>`` appended."""
    index = {t: i for i, t in enumerate(vocab)}
    try:
        ids = [index[s] for s in text.split()]
    except KeyError as exc:
        raise ValueError(f"symbol {exc.args[0]!r} not in vocabulary") from exc
    if not ids or ids[-1] != 1:
        ids.append(1)
    return ids


def decode_transcript(ids, vocab: list[str]) -> str:
    return " ".join(vocab[i] for i in ids if i > 1)


def write_dataset(out_dir, dataset: SynthDataset, vocab: list[str]) -> list[Path]:
    """Write ``feats/uttNNNNN.bin``, ``transcripts.txt`` and ``vocab.txt``."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    written = []
    lines = []
    for n, (x, tokens) in enumerate(dataset):
        uid = f"utt{n:05d}"
        path = out / "feats" / f"{uid}.bin"
        write_features(path, x)
        written.append(path)
        lines.append(f"{uid} {decode_transcript(tokens, vocab)}\n")
    (out / "transcripts.txt").write_text("".join(lines), encoding="utf-8")
    write_vocab(out / "vocab.txt", vocab)
    return written + [out / "transcripts.txt", out / "vocab.txt"]


def read_dataset(data_dir) -> tuple[SynthDataset, list[str], list[str]]:
    """Returns ``(dataset, vocab, utterance_ids)``."""
    d = Path(data_dir)
    vocab = read_vocab(d / "vocab.txt")
    utts, ids = [], []
    for line in (d / "transcripts.txt").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        uid, _, text = line.partition(" ")
        utts.append((read_features(d / "feats" / f"{uid}.bin"), encode_transcript(text, vocab)))
        ids.append(uid)
    return SynthDataset(utts), vocab, ids
