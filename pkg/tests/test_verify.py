import json

import numpy as np
import pytest

from mocha_stream import numerics as nx
from mocha_stream import verify
from mocha_stream.model import named_tensors


def test_oracle_suite_passes():
    res = verify.oracle_suite(n_instances=40, mc_instances=1, mc_trials=5_000)
    assert res.passed, res.lines
    assert res.counterexample is None


def test_hard_limit_suite_counts_stays():
    res = verify.hard_limit_suite(n_configs=20)
    assert res.passed, res.lines
    assert any("stay" in line for line in res.lines)


def test_hard_limit_suite_demands_enough_stays():
    res = verify.hard_limit_suite(n_configs=1, min_stays=10_000)
    assert not res.passed and "stays" in res.counterexample


def test_q_sign_mutant_yields_serialisable_counterexample():
    res = verify.hard_limit_suite(n_configs=20, fault="q-sign")
    assert not res.passed
    blob = json.loads(json.dumps(verify.counterexample_json(res)))
    assert blob["suite"] == "hard-limit"
    assert np.asarray(blob["counterexample"]["energies"]).ndim == 3


def test_mutant_alpha_differs_from_decoder():
    p = np.random.default_rng(0).uniform(size=(2, 4, 6))
    assert np.abs(verify.mutant_alpha_q_sign(p)[0] - verify.oracle.alpha_literal(p[0])).max() > 1e-3


def test_stream_equivalence_suite_small():
    res = verify.stream_equivalence_suite(n_utts=3, t_range=(10, 120))
    assert res.passed, res.lines


def test_run_suite_rejects_bad_names():
    with pytest.raises(ValueError):
        verify.run_suite("nonsense")
    with pytest.raises(ValueError):
        verify.run_suite("oracle", fault="q-sign")
    with pytest.raises(ValueError):
        verify.hard_limit_suite(fault="other")


def test_staged_losses_agree():
    config, model, x, tokens = verify.gradcheck_instance()
    stages = verify._staged_losses(model, x, tokens, config, 0)
    full = stages[0][1]
    with nx.no_grad():
        reference = full().item()
        # every stage replays the same numbers, frozen noise included
        assert [f().item() for _, f in stages] == [reference] * len(stages)
        assert full().item() == reference


def test_every_parameter_has_a_stage():
    config, model, x, tokens = verify.gradcheck_instance()
    prefixes = [p for p, _ in verify._staged_losses(model, x, tokens, config, 0)]
    for name, _ in named_tensors(model):
        assert any(name.startswith(p) for p in prefixes), name


def test_gradcheck_instance_covers_trigger_parameters():
    _, model, _, tokens = verify.gradcheck_instance()
    names = [n for n, _ in verify.named_tensors(model)]
    assert sum(n.endswith("energy_g") or n.endswith("energy_r") for n in names) == 4
    assert tokens[-1] == verify.EOS


def test_stages_track_their_own_perturbations():
    config, model, x, tokens = verify.gradcheck_instance()
    stages = verify._staged_losses(model, x, tokens, config, 0)
    full = stages[0][1]
    first_of_stage = {}
    for name, t in named_tensors(model):
        prefix = next(p for p, _ in stages if name.startswith(p))
        first_of_stage.setdefault(prefix, (name, t))
    with nx.no_grad():
        for prefix, f in stages:
            name, t = first_of_stage[prefix]
            flat = t.data.reshape(-1)
            old = flat[0]
            flat[0] = old + 1e-3
            try:
                assert f().item() == full().item(), name
            finally:
                flat[0] = old
