"""Toy training loop (teacher forcing, Adam, optional Noam decay) and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import Model, ModelConfig, parameters, transcribe, utterance_loss

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def noam_lr(step: int, d_model: int, warmup: int, scale: float) -> float:
    """``scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`` for step >= 1."""
    step = max(step, 1)
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


class Adam:
    def __init__(self, params: list[nx.Tensor], lr: float, betas=(0.9, 0.98), eps: float = 1e-9):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            if lr:
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def finite(self) -> bool:
        return all(
            np.isfinite(p.data).all() and np.isfinite(m).all() and np.isfinite(v).all()
            for p, m, v in zip(self.params, self.m, self.v)
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i in range(len(self.params)):
            self.m[i] = arrays[f"m.{i}"].astype(self.params[i].data.dtype)
            self.v[i] = arrays[f"v.{i}"].astype(self.params[i].data.dtype)
        self.step_count = step_count


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


def utterance_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator for trigger noise and dropout."""
    return np.random.default_rng([seed, 7919, step])


def learning_rate(config: ModelConfig, step: int) -> float:
    if config.noam:
        return noam_lr(step, config.d_model, config.warmup_steps, config.noam_scale)
    return config.lr


def train(
    model: Model,
    dataset,
    config: ModelConfig,
    steps: int,
    optimizer: Adam | None = None,
    log_every: int = 0,
) -> tuple[TrainResult, Adam]:
    """Run ``steps`` optimiser updates, continuing from ``optimizer.step_count``.

    Each update averages the loss over ``config.batch_size`` utterances drawn
    in a per-epoch seeded order, so a resumed run sees the same sequence of
    examples and noise as an uninterrupted one.
    """
    utts = list(dataset)
    if not utts:
        raise ValueError("cannot train on an empty dataset")
    params = parameters(model)
    opt = optimizer or Adam(params, config.lr, config.betas, config.adam_eps)
    result = TrainResult()
    start = time.perf_counter()
    n = len(utts)
    bs = config.batch_size
    for _ in range(steps):
        step = opt.step_count + 1
        rng = step_rng(config.seed, step)
        opt.zero_grad()
        total = 0.0
        for b in range(bs):
            flat = (step - 1) * bs + b
            idx = utterance_order(n, config.seed, flat // n)[flat % n]
            x, tokens = utts[idx]
            try:
                loss = utterance_loss(model, x, tokens, config, rng) * (1.0 / bs)
                nx.backward(loss)
            except nx.NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}, utterance {idx}: {exc}") from exc
            total += loss.item()
        if not math.isfinite(total):
            raise TrainingDiverged(f"step {step}: loss is {total}")
        if config.clip_norm:
            norm = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
            if norm > config.clip_norm:
                for p in params:
                    if p.grad is not None:
                        p.grad *= config.clip_norm / norm
        with np.errstate(over="ignore", invalid="ignore"):
            opt.step(learning_rate(config, step))
        if not opt.finite():
            raise TrainingDiverged(f"step {step}: optimiser state or parameters became non-finite")
        result.losses.append(total)
        if log_every and step % log_every == 0:
            recent = result.losses[-log_every:]
            logger.info("step %d loss %.4f", step, sum(recent) / len(recent))
    result.steps = opt.step_count
    result.seconds = time.perf_counter() - start
    return result, opt


def edit_distance(a, b) -> int:
    """Levenshtein distance between two sequences."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_error_rate(hyps, refs) -> float:
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    total = sum(len(r) for r in refs)
    return errors / total if total else 0.0


def evaluate(model: Model, dataset, config: ModelConfig, mode: str = "batch", past_frames: bool | None = None):
    """Token error rate of greedy decoding; references exclude ``<eos>``.

    Returns ``(rate, results)`` where ``results`` holds every DecodeResult.
    """
    hyps, refs, results = [], [], []
    for x, tokens in dataset:
        res = transcribe(model, x, config, mode, past_frames)
        hyps.append(res.tokens)
        refs.append([t for t in tokens if t > 1])
        results.append(res)
    return token_error_rate(hyps, refs), results
