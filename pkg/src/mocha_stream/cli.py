"""Command line: data generation, training, decoding, attention dumps, verification.

Exit codes: 0 success, 1 usage or validation error, 2 runtime error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import decoder as dec
from . import numerics as nx
from . import verify
from .data import SynthSpec, decode_transcript, encode_transcript, gen_synth, read_dataset, read_features, vocabulary, write_dataset
from .model import (
    EOS,
    SOS,
    CheckpointError,
    ModelConfig,
    encode,
    init_model,
    load_arrays,
    load_checkpoint,
    named_tensors,
    parameters,
    save_arrays,
    save_checkpoint,
    toy_config,
    transcribe,
)
from .training import Adam, TrainingDiverged, train

logger = logging.getLogger("mocha_stream")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
SEED_ENV = "MOCHA_STREAM_SEED"
MODES = {"batch": "batch", "stream-mocha": "mocha", "stream-median": "median"}


class UsageError(Exception):
    pass


def git_blob_sha1(path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict | None = None
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    started: float = 0.0
    seconds: float = 0.0
    checkpoint_sha1: str | None = None
    extra: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return path


def env_seed(default: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def load_config(path, vocab_size: int, feat_dim: int) -> ModelConfig:
    """Toy defaults, overridden by the (possibly partial) JSON file at ``path``."""
    base = toy_config(vocab_size=vocab_size, feat_dim=feat_dim).to_dict()
    if path is not None:
        try:
            over = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        base = _merge(base, over)
    try:
        return ModelConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _write_csv(path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt="%.17g")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec_d = {}
    if args.spec:
        try:
            spec_d = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read spec {args.spec}: {exc}") from exc
    vocab_size = spec_d.pop("vocab_size", None)
    try:
        spec = SynthSpec(**spec_d)
    except TypeError as exc:
        raise UsageError(f"invalid spec: {exc}") from exc
    spec.seed = env_seed(spec.seed)
    try:
        spec.validate(vocab_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = RunManifest("gen-data", sys.argv, config=dataclasses.asdict(spec), seed=spec.seed, started=time.time())
    out = Path(args.out)
    ds = gen_synth(spec)
    written = write_dataset(out, ds, vocabulary(spec.alphabet))
    manifest.outputs = [str(p.relative_to(out)) for p in written]
    manifest.inputs = {"spec": args.spec}
    manifest.seconds = time.time() - manifest.started
    manifest.write(out)
    print(f"wrote {len(ds)} utterances to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset, vocab, _ = read_dataset(args.data)
    if not len(dataset):
        raise UsageError(f"no utterances in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    feat_dim = dataset.utterances[0][0].shape[1]
    losses: list = []
    if args.resume:
        ckpt = load_checkpoint(Path(args.resume) / "model.ckpt")
        model, config = ckpt.model, ckpt.config
        arrays, meta = load_arrays(Path(args.resume) / "optimizer.bin")
        # the checkpoint is 32-bit; training continues from the exact weights
        for name, t in named_tensors(model):
            if f"param.{name}" in arrays:
                t.data = arrays[f"param.{name}"].astype(t.data.dtype)
        opt = Adam(parameters(model), config.lr, config.betas, config.adam_eps)
        opt.load_state_arrays(arrays, int(meta["step_count"]))
        losses = list(np.loadtxt(Path(args.resume) / "loss.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1])
    else:
        config = load_config(args.config, len(vocab), feat_dim)
        config.seed = env_seed(config.seed)
        if config.vocab_size < len(vocab):
            raise UsageError(f"vocab_size {config.vocab_size} is smaller than the data vocabulary ({len(vocab)})")
        if config.feat_dim != feat_dim:
            raise UsageError(f"config feat_dim {config.feat_dim} does not match data ({feat_dim})")
        model = init_model(config)
        opt = None
    manifest = RunManifest("train", sys.argv, config=config.to_dict(), seed=config.seed, started=time.time())
    manifest.inputs = {"data": args.data, "config": args.config, "resume": args.resume}
    try:
        result, opt = train(model, dataset, config, args.steps, opt, log_every=args.log_every)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if opt is None:
        opt = Adam(parameters(model), config.lr, config.betas, config.adam_eps)
    losses.extend(result.losses)
    save_checkpoint(model, out / "model.ckpt", config, {"vocab": vocab, "step": opt.step_count})
    state = opt.state_arrays()
    state.update({f"param.{name}": t.data for name, t in named_tensors(model)})
    save_arrays(out / "optimizer.bin", state, {"step_count": opt.step_count})
    with open(out / "loss.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(losses, 1):
            fh.write(f"{i},{v:.17g}\n")
    manifest.outputs = ["model.ckpt", "optimizer.bin", "loss.csv"]
    manifest.checkpoint_sha1 = git_blob_sha1(out / "model.ckpt")
    manifest.extra = {"steps": opt.step_count, "final_loss": losses[-1] if losses else None}
    manifest.seconds = time.time() - manifest.started
    manifest.write(out)
    if losses:
        print(f"step {opt.step_count} loss {losses[-1]:.4f}")
    return EXIT_OK


def _load_vocab(ckpt, path) -> list:
    if path:
        from .data import read_vocab

        return read_vocab(path)
    vocab = ckpt.meta.get("vocab")
    return vocab or [str(i) for i in range(ckpt.config.vocab_size)]


def cmd_decode(args) -> int:
    if args.past_frames and args.mode == "batch":
        raise UsageError("--past-frames is only valid with stream-mocha or stream-median")
    ckpt = load_checkpoint(args.ckpt)
    vocab = _load_vocab(ckpt, args.vocab)
    x = read_features(args.features)
    if x.shape[1] != ckpt.config.feat_dim:
        raise nx.ShapeError(f"features have {x.shape[1]} columns, checkpoint expects {ckpt.config.feat_dim}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("decode", sys.argv, config=ckpt.config.to_dict(), seed=ckpt.config.seed, started=time.time())
    manifest.inputs = {"ckpt": args.ckpt, "features": args.features}
    manifest.checkpoint_sha1 = git_blob_sha1(args.ckpt)
    mode = MODES[args.mode]
    res = transcribe(ckpt.model, x, ckpt.config, mode, True if args.past_frames else None)
    text = decode_transcript(res.tokens, vocab)
    (out / "transcript.txt").write_text(text + "\n", encoding="utf-8")
    manifest.outputs = ["transcript.txt"]
    if mode != "batch":
        with open(out / "t_log.csv", "w") as fh:
            fh.write("step,layer,head,t\n")
            for row in res.t_log:
                fh.write(",".join(str(v) for v in row) + "\n")
        manifest.outputs.append("t_log.csv")
    manifest.extra = {"mode": args.mode, "past_frames": bool(args.past_frames), "truncated": res.truncated}
    manifest.seconds = time.time() - manifest.started
    manifest.write(out)
    print(text)
    return EXIT_OK


def _targets(arg: str, vocab: list) -> list:
    p = Path(arg)
    text = p.read_text(encoding="utf-8").strip() if p.is_file() else arg
    return encode_transcript(text, vocab)


def cmd_dump_attention(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    vocab = _load_vocab(ckpt, args.vocab)
    x = read_features(args.features)
    tokens = _targets(args.targets, vocab)
    seed = env_seed(config.seed if args.seed is None else args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("dump-attention", sys.argv, config=config.to_dict(), seed=seed, started=time.time())
    manifest.inputs = {"ckpt": args.ckpt, "features": args.features, "targets": args.targets}
    manifest.checkpoint_sha1 = git_blob_sha1(args.ckpt)
    traces: list = []
    with nx.no_grad():
        h = encode(ckpt.model, x, config)
        rng = np.random.default_rng(seed)
        dec.decoder_forward(
            [SOS] + tokens[:-1], h, ckpt.model.decoder, config.decoder, "mocha", args.noise_std, rng, traces, True
        )
    for n, tr in enumerate(traces):
        for m in range(tr.p.shape[0]):
            for kind, mat in (("p", tr.p), ("alpha", tr.alpha), ("alpha_original", tr.alpha_original), ("beta", tr.beta)):
                name = f"layer{n}_head{m}_{kind}.csv"
                _write_csv(out / name, mat[m])
                manifest.outputs.append(name)
    manifest.extra = {"noise_std": args.noise_std, "tokens": tokens}
    manifest.seconds = time.time() - manifest.started
    manifest.write(out)
    print(f"wrote {len(manifest.outputs)} matrices to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.inject_fault and args.suite != "hard-limit":
        raise UsageError("--inject-fault applies to the hard-limit suite only")
    seed = env_seed(args.seed)
    kwargs = {"seed": seed}
    res = verify.run_suite(args.suite, args.inject_fault, **kwargs)
    status = "PASS" if res.passed else "FAIL"
    for line in res.lines:
        print(line)
    print(f"{status} suite {res.name} ({res.seconds:.1f} s)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("verify", sys.argv, seed=seed, started=time.time())
        manifest.extra = {"suite": res.name, "fault": args.inject_fault, "passed": res.passed, "lines": res.lines}
        if not res.passed:
            (out / "counterexample.json").write_text(json.dumps(verify.counterexample_json(res)) + "\n")
            manifest.outputs = ["counterexample.json"]
        manifest.seconds = res.seconds
        manifest.write(out)
    if not res.passed:
        print(json.dumps(verify.counterexample_json(res)))
        return EXIT_VERIFY
    return EXIT_OK


# -- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mocha-stream", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--spec", help="JSON file with generation fields (alphabet, frames_per_token, noise, seed, ...)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train or resume a model")
    p.add_argument("--config", help="JSON file overriding the toy configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--resume", help="directory of a previous train run to continue")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="greedy transcription of one feature file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--mode", choices=sorted(MODES), default="batch")
    p.add_argument("--past-frames", action="store_true")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("dump-attention", help="write p, alpha, original alpha and beta as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--targets", required=True, help="transcript text or a file holding it")
    p.add_argument("--vocab")
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("verify", help="run a property suite")
    p.add_argument("--suite", required=True, choices=verify.SUITES)
    p.add_argument("--inject-fault", choices=verify.FAULTS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, nx.ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
