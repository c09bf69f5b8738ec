"""Named property suites shared by the command line and the acceptance tests.

Each suite returns a :class:`SuiteResult`; a failing suite carries the first
counterexample as a JSON-serialisable dict.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import decoder as dec
from . import numerics as nx
from . import oracle
from .encoder import StreamingEncoder, downsampled_len, encode_frames_blockwise, encode_stream, frontend
from .model import EOS, SOS, ModelConfig, init_model, named_tensors, toy_config

SUITES = ("gradcheck", "oracle", "stream-equivalence", "hard-limit")
FAULTS = ("q-sign",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    lines: list = field(default_factory=list)
    counterexample: dict | None = None
    seconds: float = 0.0

    def fail(self, line: str, counterexample: dict) -> None:
        self.lines.append(line)
        if self.counterexample is None:
            self.counterexample = counterexample
        self.passed = False


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


# -- oracle -------------------------------------------------------------------


def alpha_agreement(n_instances: int = 200, n_steps: int = 5, n_frames: int = 8, seed: int = 0):
    """Max |alpha - literal alpha| over random trigger matrices, plus the worst instance."""
    rng = np.random.default_rng(seed)
    worst, worst_p = 0.0, None
    for _ in range(n_instances):
        p = rng.uniform(0.0, 1.0, size=(n_steps, n_frames))
        err = float(np.abs(dec.monotonic_alpha(nx.Tensor(p)).data - oracle.alpha_literal(p)).max())
        if err > worst or worst_p is None:
            worst, worst_p = err, p
    return worst, worst_p


def oracle_suite(
    n_instances: int = 200,
    mc_instances: int = 3,
    mc_trials: int = 20_000,
    seed: int = 0,
    tolerance: float = 1e-10,
) -> SuiteResult:
    """Modified and original alpha and beta against the literal references,
    plus a Monte-Carlo check of the original recurrence."""
    start = time.perf_counter()
    res = SuiteResult("oracle", True)
    err, p = alpha_agreement(n_instances, seed=seed)
    line = f"modified alpha vs literal: max_abs_error={err:.3e} over {n_instances} instances"
    if err > tolerance:
        res.fail("FAIL " + line, {"check": "modified-alpha", "p": p, "error": err})
    else:
        res.lines.append("ok   " + line)

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for k in range(n_instances // 4):
        p = rng.uniform(size=(4, 7))
        e = float(np.abs(dec.alpha_original(p).data - oracle.alpha_original_literal(p)).max())
        alpha = oracle.alpha_literal(p)
        u = rng.normal(size=p.shape)
        for w in (1, 3):
            for past in (False, True):
                b = dec.expected_attention(nx.Tensor(alpha), nx.Tensor(u), w, past).data
                e = max(e, float(np.abs(b - oracle.beta_literal(alpha, u, w, past)).max()))
        if e > tolerance and res.passed:
            res.fail(f"FAIL original alpha / beta vs literal: error {e:.3e}", {"check": "beta", "p": p, "u": u})
        worst = max(worst, e)
    if res.passed:
        res.lines.append(f"ok   original alpha and beta vs literal: max_abs_error={worst:.3e}")

    for k in range(mc_instances):
        p = rng.uniform(size=(3, 6))
        report = oracle.compare_mc(p, mc_trials, seed + k)
        line = f"Monte-Carlo instance {k}: {report}"
        if not report.passed:
            res.fail("FAIL " + line, {"check": "monte-carlo", "p": p, "cell": report.location})
        else:
            res.lines.append("ok   " + line)
    res.seconds = time.perf_counter() - start
    return res


# -- hard limit ---------------------------------------------------------------


def mutant_alpha_q_sign(p_step: np.ndarray) -> np.ndarray:
    """Modified alpha with the stay term subtracted instead of added (test fixture)."""
    p_step = np.asarray(p_step, dtype=np.float64)
    return np.stack([oracle.alpha_literal(row, q_sign=-1.0) for row in p_step])


def hard_limit_energies(seed: int, n_heads: int = 4, n_steps: int = 6, n_frames: int = 8):
    """Random monotonic-energy and chunk-energy tensors with a mix of fire and stay rows."""
    rng = np.random.default_rng(seed)
    e = rng.normal(-1.5, 2.0, size=(n_heads, n_steps, n_frames))
    e[np.abs(e) < 1e-3] = 0.5  # keep clear of the 0.5 threshold
    u = rng.normal(size=(n_heads, n_steps, n_frames))
    return e, u


def hard_limit_suite(
    n_configs: int = 100,
    seed: int = 0,
    chunk_size: int = 3,
    past_frames: bool = False,
    fault: str | None = None,
    tolerance: float = 1e-12,
    min_stays: int = 10,
) -> SuiteResult:
    """Step-function training attention against the inference scan."""
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}")
    start = time.perf_counter()
    res = SuiteResult("hard-limit", True)
    alpha_fn = mutant_alpha_q_sign if fault == "q-sign" else None
    stays = heavy = 0
    worst = 0.0
    for k in range(n_configs):
        e, u = hard_limit_energies(seed + k)
        report = oracle.hard_limit_compare(e, u, chunk_size, past_frames, tolerance, alpha_fn)
        if not report.passed:
            res.fail(
                f"FAIL configuration {seed + k}: {report}",
                {"seed": seed + k, "head_step": report.location, "energies": e, "chunk_energies": u, **report.details},
            )
            break
        worst = max(worst, report.max_abs_error)
        stays += report.details["stays"]
        heavy += report.details["rows_with_excess_mass"]
    if res.passed:
        res.lines.append(f"ok   {n_configs} configurations: positions match, normalised beta error {worst:.3e}")
        line = f"stay (exception) cases exercised: {stays}"
        if stays < min_stays:
            res.fail("FAIL " + line, {"stays": stays})
        else:
            res.lines.append("ok   " + line)
        res.lines.append(f"note rows carrying more than unit alpha mass: {heavy}")
    res.seconds = time.perf_counter() - start
    return res


# -- streaming encoder ----------------------------------------------------------


def stream_equivalence_suite(
    n_utts: int = 50,
    t_range: tuple = (10, 400),
    seed: int = 0,
    config: ModelConfig | None = None,
) -> SuiteResult:
    """Frame-by-frame versus whole-utterance streaming encoding, bitwise."""
    start = time.perf_counter()
    res = SuiteResult("stream-equivalence", True)
    config = config or toy_config(seed=seed)
    model = init_model(config)
    rng = np.random.default_rng(seed)
    peaks = {}
    for n in range(n_utts):
        t = int(rng.integers(t_range[0], t_range[1] + 1))
        x = rng.normal(size=(t, config.feat_dim))
        whole = StreamingEncoder(model.encoder, config.encoder, config.feat_dim)
        h_all = np.concatenate([whole.push(x), whole.finish()])
        single = StreamingEncoder(model.encoder, config.encoder, config.feat_dim)
        parts = [single.push(row[None, :]) for row in x] + [single.finish()]
        h_one = np.concatenate(parts)
        if h_all.shape[0] != downsampled_len(t) or not np.array_equal(h_all, h_one):
            diff = float(np.abs(h_all - h_one).max()) if h_all.shape == h_one.shape else float("inf")
            res.fail(f"FAIL utterance {n} (T={t}): max difference {diff:.3e}", {"utterance": n, "T": t, "x": x})
            break
        peaks[t] = single.peak_state
    if res.passed:
        res.lines.append(f"ok   {n_utts} utterances bit-identical under one-frame and whole-utterance feeding")
        long = {t: v for t, v in peaks.items() if downsampled_len(t) >= 2 * config.encoder.block_len}
        values = sorted(set(long.values()))
        line = f"peak streaming state over long utterances: {values} floats"
        if len(values) > 1 or max(peaks.values()) > max(values, default=0):
            res.fail("FAIL " + line, {"peaks": {str(k): v for k, v in sorted(peaks.items())}})
        else:
            res.lines.append("ok   " + line)
    res.seconds = time.perf_counter() - start
    return res


# -- gradient check ----------------------------------------------------------------


def gradcheck_instance(seed: int = 0, n_raw: int = 12, n_tokens: int = 3, noise_std: float = 1.0):
    """A 64-bit toy model, one short utterance and frozen trigger noise."""
    config = toy_config(seed=seed, precision="float64", noise_std=noise_std)
    model = init_model(config)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n_raw, config.feat_dim))
    tokens = [int(t) for t in rng.integers(2, config.vocab_size, size=n_tokens - 1)] + [EOS]
    return config, model, x, tokens


def _staged_losses(model, x, tokens, config, seed) -> list:
    """Loss closures, one per parameter stage, as ``(name_prefix, closure)``.

    A parameter can only influence the computation from the point where it
    enters, so each closure replays the forward pass from a frozen copy of
    everything upstream of its stage (frontend output, encoder output, or a
    decoder layer input together with the trigger-noise generator state at
    that layer).  Every closure returns bit-for-bit the loss the full
    computation gives.  Prefixes are listed most specific first.
    """
    noise_seed = [seed, 31337]
    tokens_in = [SOS] + list(tokens[:-1])
    target = np.asarray(tokens, dtype=np.intp)
    dcfg, dparams, n_layers = config.decoder, model.decoder, len(model.decoder.layers)

    def nll(logits):
        return -nx.log_softmax(logits)[np.arange(len(tokens)), target].mean()

    def head(h):
        rng = np.random.default_rng(noise_seed)
        logits = dec.decoder_forward(tokens_in, h, dparams, dcfg, "mocha", config.noise_std, rng)
        return nll(logits)

    def full(*_):
        return head(encode_stream(x, model.encoder, config.encoder))

    with nx.no_grad():
        frames = frontend(x, model.encoder.frontend).data
        h_fixed = encode_frames_blockwise(nx.Tensor(frames), model.encoder, config.encoder).data
        rng = np.random.default_rng(noise_seed)
        inputs, states = [], []
        z = dec.embed_tokens(tokens_in, dparams)
        for layer in dparams.layers:
            inputs.append(z.data)
            states.append(rng.bit_generator.state)
            z = dec.decoder_layer_batch(z, nx.Tensor(h_fixed), layer, dcfg, "mocha", config.noise_std, rng)
        inputs.append(z.data)
        states.append(rng.bit_generator.state)

    def encoder_body(*_):
        return head(encode_frames_blockwise(nx.Tensor(frames), model.encoder, config.encoder))

    def decoder_only(*_):
        return head(nx.Tensor(h_fixed))

    def from_layer(first):
        def f(*_):
            rng = np.random.default_rng()
            rng.bit_generator.state = states[first]
            logits = dec.decoder_tail(
                nx.Tensor(inputs[first]), nx.Tensor(h_fixed), dparams, dcfg, first, "mocha", config.noise_std, rng
            )
            return nll(logits)

        return f

    stages = [("encoder.frontend.", full), ("encoder.", encoder_body), ("decoder.embed", decoder_only)]
    stages += [(f"decoder.layers.{n}.", from_layer(n)) for n in range(n_layers)]
    stages.append(("decoder.", from_layer(n_layers)))
    return stages


def gradcheck_suite(
    seed: int = 0,
    tolerance: float = 1e-4,
    eps: float = 1e-4,
    small_slope: float = 1e-6,
    wide_eps: float = 5e-3,
) -> SuiteResult:
    """Central differences against the tape for every parameter of the toy model.

    Each entry gets the three-point difference at ``eps``.  When that slope is
    non-zero but below ``small_slope`` its value is dominated by rounding in
    the loss (about one ulp divided by ``2 * eps``), so it is re-estimated with
    the five-point stencil at ``wide_eps``.  The choice depends only on the
    numeric slope, never on the analytic gradient.
    """
    start = time.perf_counter()
    res = SuiteResult("gradcheck", True)
    config, model, x, tokens = gradcheck_instance(seed)
    stages = _staged_losses(model, x, tokens, config, seed)
    named = named_tensors(model)
    groups = {prefix: [] for prefix, _ in stages}
    for n, t in named:
        groups[next(p for p, _ in stages if n.startswith(p))].append((n, t))
    # analytic gradients come from the full loss for every stage
    loss = stages[0][1]()
    for _, t in named:
        t.grad = None
    nx.backward(loss)
    analytic = {n: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for n, t in named}
    worst, where, count, shrunk, widened = 0.0, None, 0, 0, 0
    for prefix, f in stages:
        group = groups[prefix]
        with nx.no_grad(), nx.record_kinks() as base:
            f()
        for name, t in group:
            flat = t.data.reshape(-1)
            ga = analytic[name].reshape(-1)
            with nx.no_grad():
                for k in range(flat.size):
                    step = eps
                    num, h = nx.central_difference(f, flat, k, step, base)
                    if 0.0 < abs(num) < small_slope:
                        step = wide_eps
                        num, h = nx.central_difference(f, flat, k, step, base, order=4)
                        widened += 1
                    shrunk += h < step
                    err = abs(ga[k] - num) / max(abs(ga[k]), abs(num), 1e-8)
                    count += 1
                    if err > worst:
                        worst, where = err, (name, k, float(ga[k]), num)
    line = f"{count} entries, max relative error {worst:.3e} (tolerance {tolerance:.0e}) at {where[0] if where else '-'}"
    if worst >= tolerance:
        name, k, a, n = where
        res.fail("FAIL " + line, {"tensor": name, "flat_index": k, "analytic": a, "numeric": n, "error": worst})
    else:
        res.lines.append("ok   " + line)
    res.lines.append(f"note {shrunk} entries sat within one step of a relu kink and used a smaller step")
    res.lines.append(f"note {widened} entries with slopes below {small_slope:.0e} used the five-point stencil at {wide_eps:.0e}")
    gr = [n for n, _ in named if n.endswith("energy_g") or n.endswith("energy_r")]
    res.lines.append(f"note trigger parameters checked: {', '.join(gr)}")
    res.seconds = time.perf_counter() - start
    return res


def run_suite(name: str, fault: str | None = None, **kwargs) -> SuiteResult:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    if fault is not None and name != "hard-limit":
        raise ValueError("fault injection applies to the hard-limit suite only")
    if name == "gradcheck":
        return gradcheck_suite(**kwargs)
    if name == "oracle":
        return oracle_suite(**kwargs)
    if name == "stream-equivalence":
        return stream_equivalence_suite(**kwargs)
    return hard_limit_suite(fault=fault, **kwargs)


def counterexample_json(res: SuiteResult) -> dict:
    return _jsonable({"suite": res.name, "counterexample": res.counterexample})
