"""Brute-force and Monte-Carlo references for the monotonic attention recurrences.

The reference functions here use plain nested loops over the printed
formulas and share no code with :mod:`mocha_stream.decoder`; they are meant to
be slow and obviously correct.  :func:`hard_limit_compare` is the exception:
it drives the decoder's two attention paths against each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OracleReport:
    max_abs_error: float
    tolerance: float
    location: tuple | None = None
    samples: int = 0
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_abs_error <= self.tolerance

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" at {self.location}" if self.location is not None else ""
        return f"{status}: max_abs_error={self.max_abs_error:.3e} (tol {self.tolerance:.1e}){where}"


def _initial(n_frames: int) -> list[float]:
    a = [0.0] * n_frames
    a[0] = 1.0
    return a


def alpha_literal(p, q_sign: float = 1.0) -> np.ndarray:
    """Modified recurrence, evaluated term by term.

    alpha[i][j] = p[i][j] * sum_{k<=j} alpha[i-1][k] * prod_{l=k}^{j-1} (1 - p[i][l])
                  + q[i][j] * alpha[i-1][j],   q[i][j] = prod_{k=j+1}^{L-1} (1 - p[i][k])

    ``q_sign=-1`` flips the stay term; it exists only as a mutation fixture.
    """
    p = np.asarray(p, dtype=np.float64)
    n_steps, n_frames = p.shape
    prev = _initial(n_frames)
    out = np.zeros((n_steps, n_frames))
    for i in range(n_steps):
        row = [0.0] * n_frames
        for j in range(n_frames):
            total = 0.0
            for k in range(j + 1):
                prod = 1.0
                for l in range(k, j):
                    prod *= 1.0 - p[i, l]
                total += prev[k] * prod
            q = 1.0
            for k in range(j + 1, n_frames):
                q *= 1.0 - p[i, k]
            row[j] = p[i, j] * total + q_sign * q * prev[j]
        out[i] = row
        prev = row
    return out


def alpha_original_literal(p) -> np.ndarray:
    """The recurrence without the stay term, evaluated term by term."""
    p = np.asarray(p, dtype=np.float64)
    n_steps, n_frames = p.shape
    prev = _initial(n_frames)
    out = np.zeros((n_steps, n_frames))
    for i in range(n_steps):
        row = [0.0] * n_frames
        for j in range(n_frames):
            total = 0.0
            for k in range(j + 1):
                prod = 1.0
                for l in range(k, j):
                    prod *= 1.0 - p[i, l]
                total += prev[k] * prod
            row[j] = p[i, j] * total
        out[i] = row
        prev = row
    return out


def alpha_mc_original(p, trials: int = 100_000, seed: int = 0) -> np.ndarray:
    """Empirical attend-position frequencies of the hard monotonic process.

    Each trial starts at frame 0.  At every output step it scans forward from
    its current position, igniting at frame ``j`` with probability
    ``p[i][j]``; if nothing ignites the trial attends nowhere from then on.
    """
    p = np.asarray(p, dtype=np.float64)
    n_steps, n_frames = p.shape
    rng = np.random.default_rng(seed)
    pos = np.zeros(trials, dtype=np.int64)
    alive = np.ones(trials, dtype=bool)
    counts = np.zeros((n_steps, n_frames))
    for i in range(n_steps):
        draws = rng.random((trials, n_frames)) < p[i][None, :]
        new_pos = np.full(trials, -1, dtype=np.int64)
        for j in range(n_frames):
            hit = alive & (new_pos < 0) & (pos <= j) & draws[:, j]
            new_pos[hit] = j
        alive = alive & (new_pos >= 0)
        pos = np.where(alive, new_pos, pos)
        for j in range(n_frames):
            counts[i, j] = np.count_nonzero(alive & (pos == j))
    return counts / trials


def binomial_bound(alpha: np.ndarray, trials: int, sigmas: float = 4.0) -> np.ndarray:
    return sigmas * np.sqrt(alpha * (1.0 - alpha) / trials)


def compare_mc(p, trials: int = 100_000, seed: int = 0) -> OracleReport:
    """Closed-form original alpha versus Monte-Carlo, with a 4-sigma band per cell."""
    from .decoder import alpha_original  # the path under test

    exact = alpha_original(np.asarray(p, dtype=np.float64)).data
    est = alpha_mc_original(p, trials, seed)
    excess = np.abs(est - exact) - binomial_bound(exact, trials)
    worst = np.unravel_index(np.argmax(excess), excess.shape)
    report = OracleReport(max(float(excess.max()), 0.0), 0.0, tuple(int(x) for x in worst), trials)
    report.details["max_abs_diff"] = float(np.abs(est - exact).max())
    return report


def beta_literal(alpha, u, w: int, past_frames: bool = False) -> np.ndarray:
    """Chunk-endpoint marginalisation, term by term.

    beta[i][j] = sum_{k=j}^{j+w-1} alpha[i][k] * exp(u[i][j]) / sum_{l=k-w+1}^{k} exp(u[i][l])

    with out-of-range indices dropped.  ``past_frames`` widens every chunk to
    start at frame 0.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    n_steps, n_frames = alpha.shape
    beta = np.zeros_like(alpha)
    for i in range(n_steps):
        for j in range(n_frames):
            total = 0.0
            k_hi = n_frames - 1 if past_frames else min(j + w - 1, n_frames - 1)
            for k in range(j, k_hi + 1):
                lo = 0 if past_frames else max(0, k - w + 1)
                den = 0.0
                for l in range(lo, k + 1):
                    den += math.exp(u[i, l])
                total += alpha[i, k] * math.exp(u[i, j]) / den
            beta[i, j] = total
    return beta


def _alpha_hard_default(p_step):
    from .decoder import monotonic_alpha

    return monotonic_alpha(p_step).data


def hard_limit_compare(
    energies,
    chunk_u,
    w: int,
    past_frames: bool = False,
    tolerance: float = 1e-12,
    alpha_fn=None,
) -> OracleReport:
    """Check that step-function training attention equals the inference scan.

    ``energies`` and ``chunk_u`` are ``M x I x L``.  The inference path uses
    ``sigmoid(e) >= 0.5``; the training path replaces the sigmoid by the same
    0/1 step.  Checks per head and step:

    * ``alpha[i]`` has exactly one non-zero entry, at the inference ``t_i``;
    * that entry is positive;
    * ``beta[i] / sum(alpha[i])`` equals the inference chunk softmax.

    ``details`` records the raw (unnormalised) beta error and how many rows
    carry more than unit mass; see :func:`raw_mass_excess`.
    """
    from . import decoder as dec
    from .numerics import Tensor

    alpha_fn = alpha_fn or _alpha_hard_default
    e = np.asarray(energies, dtype=np.float64)
    u = np.asarray(chunk_u, dtype=np.float64)
    probs = dec.nx._sigmoid_np(e)
    step = (probs >= 0.5).astype(np.float64)
    t, fired = dec.hard_monotonic_positions(probs)
    alpha = np.asarray(alpha_fn(step))
    beta = dec.expected_attention(Tensor(alpha), Tensor(u), w, past_frames).data

    m, n_steps, _ = e.shape
    worst, where = 0.0, None
    raw_worst = 0.0
    heavy_rows = 0
    for head in range(m):
        for i in range(n_steps):
            support = np.flatnonzero(alpha[head, i])
            if support.size != 1 or support[0] != t[head, i]:
                return OracleReport(math.inf, tolerance, (head, i), details={"reason": "position mismatch"})
            mass = alpha[head, i].sum()
            if not mass > 0.0:
                return OracleReport(math.inf, tolerance, (head, i), details={"reason": "non-positive attention mass"})
            ref = dec.chunk_softmax(u[head, i], int(t[head, i]), w, past_frames)
            err = float(np.abs(beta[head, i] / mass - ref).max())
            raw_worst = max(raw_worst, float(np.abs(beta[head, i] - ref).max()))
            heavy_rows += int(mass > 1.0)
            if err > worst:
                worst, where = err, (head, i)
    report = OracleReport(worst, tolerance, where, samples=m * n_steps)
    report.details.update(
        stays=int((~fired).sum()),
        raw_beta_error=raw_worst,
        rows_with_excess_mass=heavy_rows,
        positions=t,
    )
    return report


def raw_mass_excess(p_step: np.ndarray) -> np.ndarray:
    """Row mass of the modified alpha under 0/1 triggers, by literal evaluation.

    A row's mass doubles whenever the trigger fires at the previous position
    and nowhere after it: the ignition term and the stay term both credit it.
    """
    p_step = np.asarray(p_step, dtype=np.float64)
    return np.stack([alpha_literal(row).sum(axis=-1) for row in p_step])
