import json

import numpy as np
import pytest

from mocha_stream import cli
from mocha_stream.data import read_features
from mocha_stream.model import load_checkpoint, init_model, named_tensors


def run(*argv):
    return cli.main([str(a) for a in argv])


def write_spec(path, **fields):
    base = {"n_utts": 4, "min_tokens": 2, "max_tokens": 3, "seed": 5}
    path.write_text(json.dumps({**base, **fields}))
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = write_spec(root / "spec.json")
    assert run("gen-data", "--spec", spec, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--out", root / "run", "--steps", 20) == 0
    return root


def tree(path):
    return {p.relative_to(path): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def test_gen_data_is_byte_reproducible(tmp_path):
    spec = write_spec(tmp_path / "spec.json")
    assert run("gen-data", "--spec", spec, "--out", tmp_path / "a") == 0
    assert run("gen-data", "--spec", spec, "--out", tmp_path / "b") == 0
    a = tree(tmp_path / "a")
    assert a == tree(tmp_path / "b")
    assert len([p for p in a if p.parts[0] == "feats"]) == 4
    assert (tmp_path / "a" / "vocab.txt").exists() and (tmp_path / "a" / "manifest.json").exists()


def test_seed_env_overrides_spec(tmp_path, monkeypatch):
    spec = write_spec(tmp_path / "spec.json")
    run("gen-data", "--spec", spec, "--out", tmp_path / "a")
    monkeypatch.setenv(cli.SEED_ENV, "99")
    run("gen-data", "--spec", spec, "--out", tmp_path / "b")
    assert tree(tmp_path / "a") != tree(tmp_path / "b")
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 99


def test_alphabet_larger_than_vocab_is_a_usage_error(tmp_path, capsys):
    spec = write_spec(tmp_path / "spec.json", alphabet=20, vocab_size=12)
    assert run("gen-data", "--spec", spec, "--out", tmp_path / "d") == cli.EXIT_USAGE
    assert "does not fit" in capsys.readouterr().err


def test_train_zero_steps_equals_initialisation(trained, tmp_path):
    assert run("train", "--data", trained / "data", "--out", tmp_path / "r", "--steps", 0) == 0
    ck = load_checkpoint(tmp_path / "r" / "model.ckpt")
    fresh = init_model(ck.config)
    # checkpoints hold 32-bit values
    for (_, a), (_, b) in zip(named_tensors(ck.model), named_tensors(fresh)):
        assert np.array_equal(a.data, b.data.astype(np.float32))


def test_train_writes_loss_curve_and_manifest(trained):
    losses = np.loadtxt(trained / "run" / "loss.csv", delimiter=",", skiprows=1)
    assert losses.shape == (20, 2) and losses[-1, 1] < losses[0, 1]
    manifest = json.loads((trained / "run" / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["checkpoint_sha1"] == cli.git_blob_sha1(trained / "run" / "model.ckpt")


def test_resume_continues_the_uninterrupted_curve(trained, tmp_path):
    data = trained / "data"
    run("train", "--data", data, "--out", tmp_path / "full", "--steps", 6)
    run("train", "--data", data, "--out", tmp_path / "half", "--steps", 3)
    run("train", "--data", data, "--out", tmp_path / "rest", "--steps", 3, "--resume", tmp_path / "half")
    full = np.loadtxt(tmp_path / "full" / "loss.csv", delimiter=",", skiprows=1)
    rest = np.loadtxt(tmp_path / "rest" / "loss.csv", delimiter=",", skiprows=1)
    assert np.array_equal(full, rest)
    assert (tmp_path / "full" / "model.ckpt").read_bytes() == (tmp_path / "rest" / "model.ckpt").read_bytes()


def test_config_file_overrides_and_rejects_nonsense(trained, tmp_path):
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"decoder": {"chunk_size": 2}}))
    assert run("train", "--data", trained / "data", "--out", tmp_path / "r", "--steps", 0, "--config", good) == 0
    assert load_checkpoint(tmp_path / "r" / "model.ckpt").config.decoder.chunk_size == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sta_mode": "sideways"}))
    assert run("train", "--data", trained / "data", "--out", tmp_path / "s", "--steps", 0, "--config", bad) == 1


def decode(trained, out, mode, *extra):
    return run(
        "decode", "--ckpt", trained / "run" / "model.ckpt", "--features", trained / "data" / "feats" / "utt00000.bin",
        "--mode", mode, "--out", out, *extra,
    )


def test_batch_decode_is_deterministic(trained, tmp_path):
    assert decode(trained, tmp_path / "a", "batch") == 0
    assert decode(trained, tmp_path / "b", "batch") == 0
    assert (tmp_path / "a" / "transcript.txt").read_text() == (tmp_path / "b" / "transcript.txt").read_text()
    assert not (tmp_path / "a" / "t_log.csv").exists()


def test_past_frames_needs_an_online_mode(trained, tmp_path, capsys):
    assert decode(trained, tmp_path / "a", "batch", "--past-frames") == cli.EXIT_USAGE
    assert "--past-frames" in capsys.readouterr().err


@pytest.mark.parametrize("mode", ["stream-mocha", "stream-median"])
@pytest.mark.parametrize("past", [False, True])
def test_online_t_log_is_non_decreasing(trained, tmp_path, mode, past):
    assert decode(trained, tmp_path, mode, *(["--past-frames"] if past else [])) == 0
    log = np.loadtxt(tmp_path / "t_log.csv", delimiter=",", skiprows=1, dtype=int, ndmin=2)
    for layer, head in {(r[1], r[2]) for r in log}:
        rows = log[(log[:, 1] == layer) & (log[:, 2] == head)]
        assert np.all(np.diff(rows[:, 0]) > 0)
        assert np.all(np.diff(rows[:, 3]) >= 0)


def test_decode_rejects_feature_dimension_mismatch(trained, tmp_path):
    bad = tmp_path / "x.csv"
    np.savetxt(bad, np.ones((10, 3)), delimiter=",")
    code = run("decode", "--ckpt", trained / "run" / "model.ckpt", "--features", bad, "--mode", "batch", "--out", tmp_path)
    assert code == cli.EXIT_RUNTIME


def dump(trained, out, seed=None, noise=0.5):
    text = (trained / "data" / "transcripts.txt").read_text().splitlines()[0].partition(" ")[2]
    argv = ["dump-attention", "--ckpt", trained / "run" / "model.ckpt", "--features",
            trained / "data" / "feats" / "utt00000.bin", "--targets", text, "--out", out, "--noise-std", noise]
    if seed is not None:
        argv += ["--seed", seed]
    return run(*argv), text


def test_dump_attention_dimensions_and_masses(trained, tmp_path):
    code, text = dump(trained, tmp_path)
    assert code == 0
    ck = load_checkpoint(trained / "run" / "model.ckpt")
    n_steps = len(text.split()) + 1
    n_frames = -(-read_features(trained / "data" / "feats" / "utt00000.bin").shape[0] // 4)
    files = sorted(tmp_path.glob("layer*_head*_*.csv"))
    assert len(files) == 4 * ck.config.decoder.n_layers * ck.config.decoder.n_heads
    for f in files:
        assert np.loadtxt(f, delimiter=",", ndmin=2).shape == (n_steps, n_frames)
    for f in tmp_path.glob("*_alpha_original.csv"):
        assert np.all(np.loadtxt(f, delimiter=",", ndmin=2).sum(axis=1) <= 1.0 + 1e-12)
    for f in tmp_path.glob("*_alpha.csv"):
        alpha = np.loadtxt(f, delimiter=",", ndmin=2)
        p = np.loadtxt(str(f).replace("_alpha.csv", "_p.csv"), delimiter=",", ndmin=2)
        beta = np.loadtxt(str(f).replace("_alpha.csv", "_beta.csv"), delimiter=",", ndmin=2)
        assert np.allclose(beta.sum(axis=1), alpha.sum(axis=1), atol=1e-10)
        # mass identity: sum_j alpha_ij = sum_j alpha_{i-1,j} (1 + p_ij q_ij), q_ij = prod_{k>j} (1 - p_ik)
        prev = np.vstack([np.eye(n_frames)[0], alpha[:-1]])
        tail = np.cumprod((1 - p)[:, ::-1], axis=1)[:, ::-1]
        q = np.hstack([tail[:, 1:], np.ones((n_steps, 1))])
        assert np.allclose(alpha.sum(axis=1), (prev * (1 + p * q)).sum(axis=1), atol=1e-10)


def test_dump_attention_reproducible_given_seed(trained, tmp_path):
    dump(trained, tmp_path / "a", seed=3)
    dump(trained, tmp_path / "b", seed=3)
    dump(trained, tmp_path / "c", seed=4)
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    assert tree(tmp_path / "a") != tree(tmp_path / "c")


def test_verify_oracle_passes(capsys):
    assert run("verify", "--suite", "oracle") == 0
    assert "PASS suite oracle" in capsys.readouterr().out


def test_verify_catches_q_sign_mutant(tmp_path, capsys):
    assert run("verify", "--suite", "hard-limit", "--inject-fault", "q-sign", "--out", tmp_path) == cli.EXIT_VERIFY
    out = capsys.readouterr().out
    assert "FAIL suite hard-limit" in out
    ce = json.loads((tmp_path / "counterexample.json").read_text())
    assert ce["suite"] == "hard-limit" and "energies" in ce["counterexample"]


def test_verify_hard_limit_passes_unmutated():
    assert run("verify", "--suite", "hard-limit") == 0


def test_fault_injection_only_for_hard_limit():
    assert run("verify", "--suite", "oracle", "--inject-fault", "q-sign") == cli.EXIT_USAGE


def test_unknown_suite_is_a_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("verify", "--suite", "nonsense")
    assert exc.value.code == cli.EXIT_USAGE


def test_inputs_are_not_mutated(trained, tmp_path):
    before = tree(trained / "data")
    run("train", "--data", trained / "data", "--out", tmp_path / "r", "--steps", 1)
    decode(trained, tmp_path / "d", "stream-mocha")
    assert tree(trained / "data") == before
