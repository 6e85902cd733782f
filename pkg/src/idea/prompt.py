"""Fisher-weighted multi-layer moment matching and prompt optimization."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, OptimizationError
from .fusion import (
    FusionStack,
    Observation,
    SoftPrompt,
    alignment_value_and_grad,
    forward,
    policy_entropy,
)
from .stats import FeatureStats, StatsConfig, compute_stats, moment_distance

log = logging.getLogger(__name__)

PROMPT_INIT_STD = 0.02


@dataclass(frozen=True, eq=False)
class LayerWeights:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float).reshape(-1)
        if a.size == 0 or np.any(a < 0) or not np.all(np.isfinite(a)):
            raise InvalidInputError("layer weights must be finite and non-negative")
        if abs(a.sum() - 1.0) > 1e-12:
            raise InvalidInputError(f"layer weights must sum to 1, got {a.sum()!r}")
        a.flags.writeable = False
        object.__setattr__(self, "alpha", a)

    @classmethod
    def uniform(cls, num_layers: int) -> "LayerWeights":
        return cls(np.full(num_layers, 1.0 / num_layers))

    @classmethod
    def decay(cls, num_layers: int, base: float = 0.65) -> "LayerWeights":
        """Fixed weights proportional to ``base ** (M - l)``; the last layer weighs most."""
        raw = base ** (num_layers - np.arange(1, num_layers + 1))
        return cls(_on_simplex(raw / raw.sum()))


@dataclass(frozen=True)
class SourceAnchor:
    per_layer_stats: tuple

    def __post_init__(self):
        stats = tuple(self.per_layer_stats)
        if not stats:
            raise InvalidInputError("anchor needs at least one layer")
        if len({s.dim for s in stats}) != 1:
            raise InvalidInputError("anchor layers must share one feature dimension")
        object.__setattr__(self, "per_layer_stats", stats)

    @property
    def num_layers(self) -> int:
        return len(self.per_layer_stats)

    def final(self) -> FeatureStats:
        return self.per_layer_stats[-1]


@dataclass(frozen=True)
class OptimizerConfig:
    steps: int = 50
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidInputError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise InvalidInputError("weight_decay must be non-negative")


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    prompt_star: SoftPrompt
    final_loss: float
    entropy_u: float
    initial_loss: float
    aborted: bool = False


def _on_simplex(a):
    # absorb the last-ulp summation error so the 1e-12 invariant holds exactly
    a = np.maximum(a, 0.0)
    return a / a.sum()


def update_layer_weights(alpha: LayerWeights, fisher_traces, beta: float) -> LayerWeights:
    traces = np.asarray(fisher_traces, dtype=float)
    if traces.shape != alpha.alpha.shape:
        raise InvalidInputError("fisher_traces must match the number of layers")
    if np.any(traces < 0) or not np.all(np.isfinite(traces)):
        raise InvalidInputError("fisher traces must be finite and non-negative")
    if not 0.0 <= beta <= 1.0:
        raise InvalidInputError("beta must lie in [0, 1]")
    total = traces.sum()
    target = traces / total if total > 0 else np.full(traces.shape, 1.0 / traces.size)
    if beta == 0.0:
        return alpha
    return LayerWeights(_on_simplex((1.0 - beta) * alpha.alpha + beta * target))


def alignment_loss(
    stack: FusionStack,
    prompt,
    alpha: LayerWeights,
    anchor: SourceAnchor,
    obs: Observation,
    cfg: StatsConfig = StatsConfig(),
) -> float:
    """Weighted sum over layers of the moment distance to the source anchor, node rows only."""
    if anchor.num_layers != stack.num_layers or alpha.alpha.shape[0] != stack.num_layers:
        raise InvalidInputError("alpha and anchor must have one entry per stack layer")
    trace = forward(stack, prompt, obs)
    total = 0.0
    for ell, src in enumerate(anchor.per_layer_stats, start=1):
        total += alpha.alpha[ell - 1] * moment_distance(src, trace.layer_stats(ell, cfg))
    return float(total)


def gaussian_prompt(length: int, dim: int, rng, std: float = PROMPT_INIT_STD) -> SoftPrompt:
    return SoftPrompt(rng.normal(0.0, std, (length, dim)))


def optimize_prompt(
    stack: FusionStack,
    init: SoftPrompt,
    alpha: LayerWeights,
    anchor: SourceAnchor,
    obs: Observation,
    opt: OptimizerConfig = OptimizerConfig(),
    cfg: StatsConfig = StatsConfig(),
) -> OptimizationResult:
    """AdamW on the alignment loss, returning the lowest-loss iterate seen."""
    p = np.array(init.tokens, dtype=float)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    best_p, best_loss = None, np.inf
    initial_loss = None
    aborted = False
    for t in range(opt.steps + 1):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad, _ = alignment_value_and_grad(stack, p, obs, alpha.alpha, anchor, cfg)
        except InvalidInputError:
            if initial_loss is None:
                raise
            # an iterate this large has already left the finite range
            loss, grad = np.nan, p
        if initial_loss is None:
            initial_loss = loss
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            log.warning("non-finite loss or gradient at step %d; keeping best iterate", t)
            aborted = True
            break
        if loss < best_loss:
            best_p, best_loss = p.copy(), loss
        if t == opt.steps:
            break
        m = opt.beta1 * m + (1 - opt.beta1) * grad
        v = opt.beta2 * v + (1 - opt.beta2) * grad**2
        m_hat = m / (1 - opt.beta1 ** (t + 1))
        v_hat = v / (1 - opt.beta2 ** (t + 1))
        p = p - opt.learning_rate * (m_hat / (np.sqrt(v_hat) + opt.adam_eps) + opt.weight_decay * p)
        if not np.all(np.isfinite(p)):
            log.warning("prompt diverged at step %d; keeping best iterate", t)
            aborted = True
            break
    if best_p is None:
        raise OptimizationError("no finite iterate was produced")
    prompt_star = SoftPrompt(best_p)
    entropy_u = policy_entropy(forward(stack, prompt_star, obs).policy)
    return OptimizationResult(prompt_star, float(best_loss), entropy_u, float(initial_loss), aborted)
