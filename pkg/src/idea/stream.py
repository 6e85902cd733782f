"""Synthetic non-stationary domain stream built from affine shifts of a Gaussian source.

Observation recipe, for a generator ``rng``:

1. if no instruction is supplied, ``instruction = rng.standard_normal(C)``;
2. ``z = rng.standard_normal((N, C))``;
3. ``node_features = shift_mean + drift_rate * step_index + shift_scale * z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from .errors import InvalidInputError
from .fusion import FusionStack, Observation, forward
from .prompt import SourceAnchor
from .stats import StatsConfig, compute_stats

SCHEDULES = ("cyclic", "random-recurrent")
FAMILIES = ("affine", "layered")


@dataclass(frozen=True, eq=False)
class DomainSpec:
    shift_mean: np.ndarray
    shift_scale: np.ndarray
    drift_rate: float = 0.0

    def __post_init__(self):
        mean = np.array(self.shift_mean, dtype=float).reshape(-1)
        scale = np.array(self.shift_scale, dtype=float).reshape(-1)
        if mean.shape != scale.shape:
            raise InvalidInputError("shift_mean and shift_scale must have the same length")
        if np.any(scale <= 0) or not np.all(np.isfinite(scale)) or not np.all(np.isfinite(mean)):
            raise InvalidInputError("shift_scale must be finite and strictly positive")
        if self.drift_rate < 0:
            raise InvalidInputError("drift_rate must be non-negative")
        object.__setattr__(self, "shift_mean", mean)
        object.__setattr__(self, "shift_scale", scale)

    @property
    def dim(self) -> int:
        return self.shift_mean.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "DomainSpec":
        return cls(np.zeros(dim), np.ones(dim))

    def offset(self, step_index: int) -> np.ndarray:
        return self.shift_mean + self.drift_rate * step_index


@dataclass(frozen=True)
class StreamConfig:
    num_domains: int = 6
    schedule: str = "cyclic"
    schedule_seed: int = 0
    num_cycles: int = 2
    episodes_per_domain: int = 2
    steps_per_episode: int = 5
    num_candidates: int = 6
    feature_dim: int = 8
    source_domain_index: int = 0
    family: str = "affine"
    domain_seed: int = 0
    shift_magnitude: float = 3.0
    scale_spread: float = 0.7
    drift_rate: float = 0.0
    instruction_scale: float = 1.0

    def __post_init__(self):
        if self.num_domains < 1:
            raise InvalidInputError("num_domains must be >= 1")
        if self.schedule not in SCHEDULES:
            raise InvalidInputError(f"schedule must be one of {SCHEDULES}")
        if self.family not in FAMILIES:
            raise InvalidInputError(f"family must be one of {FAMILIES}")
        if min(self.num_cycles, self.episodes_per_domain, self.steps_per_episode) < 1:
            raise InvalidInputError("cycles, episodes and steps must be >= 1")
        if self.num_candidates < 1 or self.feature_dim < 1:
            raise InvalidInputError("num_candidates and feature_dim must be >= 1")
        if not 0 <= self.source_domain_index < self.num_domains:
            raise InvalidInputError("source_domain_index out of range")


@dataclass(frozen=True)
class Episode:
    cycle: int
    domain_index: int
    episode_index: int
    observations: tuple = field(repr=False)


def make_domains(cfg: StreamConfig) -> List[DomainSpec]:
    """Domain family, a pure function of ``cfg.domain_seed``.

    The source slot is the identity domain. ``affine`` domains shift the mean
    along a random direction and rescale every coordinate; ``layered`` domains
    alternate between pure mean shifts and pure scale changes, which surface
    at different depths of the stack.
    """
    rng = np.random.default_rng(cfg.domain_seed)
    c = cfg.feature_dim
    domains = []
    for d in range(cfg.num_domains):
        direction = rng.standard_normal(c)
        direction /= np.linalg.norm(direction)
        log_scale = rng.uniform(-cfg.scale_spread, cfg.scale_spread, c)
        if d == cfg.source_domain_index:
            domains.append(DomainSpec.identity(c))
            continue
        mean = cfg.shift_magnitude * direction
        scale = np.exp(log_scale)
        if cfg.family == "layered":
            if d % 2:
                mean = np.zeros(c)
                scale = np.exp(np.sign(log_scale) * cfg.scale_spread * 2)
            else:
                scale = np.ones(c)
        domains.append(DomainSpec(mean, scale, cfg.drift_rate))
    return domains


def domain_schedule(cfg: StreamConfig) -> List[List[int]]:
    """Domain order for each cycle."""
    if cfg.schedule == "cyclic":
        return [list(range(cfg.num_domains)) for _ in range(cfg.num_cycles)]
    rng = np.random.default_rng(cfg.schedule_seed)
    return [list(rng.integers(0, cfg.num_domains, cfg.num_domains)) for _ in range(cfg.num_cycles)]


def sample_observation(domain: DomainSpec, step_index: int, rng, num_candidates: int,
                       instruction=None, instruction_scale: float = 1.0) -> Observation:
    if instruction is None:
        instruction = instruction_scale * rng.standard_normal(domain.dim)
    z = rng.standard_normal((num_candidates, domain.dim))
    nodes = domain.offset(step_index) + domain.shift_scale * z
    return Observation(nodes, instruction, step_index)


def generate_stream(cfg: StreamConfig, seed, domains: Optional[List[DomainSpec]] = None) -> Iterator[Episode]:
    """Episodes in schedule order; a pure function of ``cfg`` and ``seed``."""
    domains = make_domains(cfg) if domains is None else domains
    rng = np.random.default_rng(seed)
    episode_index = 0
    for cycle, order in enumerate(domain_schedule(cfg)):
        for d in order:
            for _ in range(cfg.episodes_per_domain):
                instruction = cfg.instruction_scale * rng.standard_normal(cfg.feature_dim)
                obs = tuple(
                    sample_observation(domains[d], t, rng, cfg.num_candidates, instruction)
                    for t in range(cfg.steps_per_episode)
                )
                yield Episode(cycle, int(d), episode_index, obs)
                episode_index += 1


def bootstrap_source_stats(stack: FusionStack, source: DomainSpec, num_samples: int = 128,
                           cfg: StatsConfig = StatsConfig(), rng=None,
                           num_candidates: int = 6, instruction_scale: float = 1.0) -> SourceAnchor:
    """Per-layer statistics pooled over all node tokens of ``num_samples`` source observations."""
    if num_samples < 2:
        raise InvalidInputError("num_samples must be >= 2")
    rng = np.random.default_rng(rng)
    pooled = [[] for _ in range(stack.num_layers)]
    for _ in range(num_samples):
        trace = forward(stack, None, sample_observation(source, 0, rng, num_candidates, instruction_scale=instruction_scale))
        for ell in range(1, stack.num_layers + 1):
            pooled[ell - 1].append(trace.token_mats[ell])
    return SourceAnchor(tuple(compute_stats(np.vstack(p), cfg) for p in pooled))


def deshift(source: DomainSpec, domain: DomainSpec, obs: Observation) -> Observation:
    """Map features drawn from ``domain`` back into the source frame."""
    z = (obs.node_features - domain.offset(obs.step_index)) / domain.shift_scale
    return Observation(source.shift_mean + source.shift_scale * z, obs.instruction, obs.step_index)


def oracle_action(stack: FusionStack, source: DomainSpec, domain: DomainSpec, obs: Observation) -> int:
    """Action the source-trained policy would take on the unshifted observation."""
    scores = forward(stack, None, deshift(source, domain, obs)).scores
    return int(np.argmax(scores))
