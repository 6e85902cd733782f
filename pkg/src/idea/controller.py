"""Per-step decision loop: try the bridge, gate on coverage, otherwise learn a new asset."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .assets import Asset, AssetLibrary
from .bridge import assemble_problem, compose_bridge, oracle_solve, solve_closed_form
from .errors import DegenerateProblemError, IdeaError, InvalidInputError
from .fusion import FusionStack, Observation, fisher_trace_per_layer, forward, policy_entropy
from .prompt import (
    LayerWeights,
    OptimizerConfig,
    SourceAnchor,
    gaussian_prompt,
    optimize_prompt,
    update_layer_weights,
)
from .stats import StatsConfig, w2_distance

log = logging.getLogger(__name__)

VARIANTS = ("idea", "no-adapt", "always-optimize", "nearest-retrieval", "decay-weighting")


@dataclass(frozen=True)
class ControllerConfig:
    tau: float = 0.7
    lam: float = 0.4
    beta: float = 0.1
    capacity: int = 32
    prompt_len: int = 4
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    seed: int = 0
    variant: str = "idea"
    decay_base: float = 0.65
    gap_iterations: int = 2000

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")
        if self.lam < 0:
            raise InvalidInputError("lambda must be non-negative")
        if not 0 <= self.beta <= 1:
            raise InvalidInputError("beta must lie in [0, 1]")
        if self.capacity < 1 or self.prompt_len < 1:
            raise InvalidInputError("capacity and prompt_len must be >= 1")
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}")


@dataclass(frozen=True)
class StepOutcome:
    covered: bool
    d0: float
    dp: float
    d_act: float
    action: int
    entropy: float
    prompt_source: str
    optimization_invoked: bool
    library_size: int
    wall_time: float
    projected: bool = False
    projection_gap: Optional[float] = None

    @property
    def reduction(self) -> float:
        """Relative discrepancy reduction of the acted prompt versus acting prompt-free."""
        if self.d0 == 0:
            return 0.0
        return (self.d0 - self.d_act) / self.d0


class StepError(IdeaError):
    def __init__(self, episode, step, cause):
        super().__init__(f"episode {episode}, step {step}: {cause}")
        self.episode = episode
        self.step = step
        self.cause = cause


class IdeaController:
    """Owns one asset library and one set of layer weights; calls must be serialized."""

    def __init__(self, stack: FusionStack, anchor: SourceAnchor, config: ControllerConfig = ControllerConfig(),
                 library: Optional[AssetLibrary] = None):
        if anchor.num_layers != stack.num_layers:
            raise InvalidInputError("anchor must have one entry per stack layer")
        self.stack = stack
        self.anchor = anchor
        self.config = config
        if library is None:
            library = AssetLibrary(config.capacity, config.prompt_len, stack.dim)
        elif library.feature_dim not in (None, stack.dim) or library.prompt_len not in (None, config.prompt_len):
            raise InvalidInputError("loaded library does not match the stack and prompt length")
        self.library = library
        if config.variant == "decay-weighting":
            self.alpha = LayerWeights.decay(stack.num_layers, config.decay_base)
        else:
            self.alpha = LayerWeights.uniform(stack.num_layers)
        self.rng = np.random.default_rng(config.seed)
        self._episodes = 0

    def _final_discrepancy(self, prompt, obs):
        trace = forward(self.stack, prompt, obs)
        stats = trace.layer_stats(self.stack.num_layers, self.config.stats)
        return w2_distance(stats, self.anchor.final()), trace

    def _bridge(self, target):
        """Bridge prompt for ``target`` plus (projected, gap); None prompt when unavailable."""
        cfg = self.config
        if cfg.variant == "nearest-retrieval":
            w = np.zeros(len(self.library))
            w[self.library.nearest(target)] = 1.0
            return compose_bridge(self.library, w)[0], False, None
        problem = assemble_problem(self.library, target, cfg.lam)
        sol = solve_closed_form(problem)
        gap = None
        if sol.projected_flag:
            best = oracle_solve(problem, cfg.gap_iterations)
            gap = problem.objective(sol.weights) - problem.objective(best)
        return compose_bridge(self.library, sol.weights)[0], sol.projected_flag, gap

    def step(self, obs: Observation) -> StepOutcome:
        start = time.perf_counter()
        cfg = self.config
        m = self.stack.num_layers
        free = forward(self.stack, None, obs)
        target = free.layer_stats(m, cfg.stats)
        d0 = w2_distance(target, self.anchor.final())

        if cfg.variant == "no-adapt":
            return self._outcome(start, False, d0, math.inf, d0, free, "none", False)

        bridge_prompt, projected, gap = None, False, None
        dp, bridge_trace = math.inf, None
        if len(self.library):
            try:
                bridge_prompt, projected, gap = self._bridge(target)
                dp, bridge_trace = self._final_discrepancy(bridge_prompt, obs)
            except DegenerateProblemError as exc:
                log.warning("bridge unavailable, treating step as uncovered: %s", exc)
                bridge_prompt = None

        gated = cfg.variant != "always-optimize"
        if d0 == 0.0:
            covered = gated and dp == 0.0
            if covered:
                return self._outcome(start, True, d0, dp, dp, bridge_trace, "bridge", False, projected, gap)
            return self._outcome(start, False, d0, dp, d0, free, "none", False, projected, gap)
        if gated and dp < cfg.tau * d0:
            return self._outcome(start, True, d0, dp, dp, bridge_trace, "bridge", False, projected, gap)

        if cfg.variant != "decay-weighting":
            self.alpha = update_layer_weights(self.alpha, fisher_trace_per_layer(self.stack, obs), cfg.beta)
        if bridge_prompt is None:
            init = gaussian_prompt(cfg.prompt_len, self.stack.dim, self.rng)
        else:
            init = bridge_prompt
        result = optimize_prompt(self.stack, init, self.alpha, self.anchor, obs, cfg.opt, cfg.stats)
        d_act, acted = self._final_discrepancy(result.prompt_star, obs)
        self.library.insert_or_merge(Asset(result.prompt_star, target, result.entropy_u))
        return self._outcome(start, False, d0, dp, d_act, acted, "new-asset", True, projected, gap)

    def _outcome(self, start, covered, d0, dp, d_act, trace, source, optimized, projected=False, gap=None):
        # argmax takes the first maximum, i.e. ties go to the lowest index
        action = int(np.argmax(trace.scores))
        return StepOutcome(
            covered=covered,
            d0=float(d0),
            dp=float(dp),
            d_act=float(d_act),
            action=action,
            entropy=policy_entropy(trace.policy),
            prompt_source=source,
            optimization_invoked=optimized,
            library_size=len(self.library),
            wall_time=time.perf_counter() - start,
            projected=projected,
            projection_gap=gap,
        )

    def run_episode(self, episode) -> list:
        """Apply ``step`` over one episode, threading library and layer weights."""
        index = self._episodes
        self._episodes += 1
        outcomes = []
        for t, obs in enumerate(episode):
            try:
                outcomes.append(self.step(obs))
            except IdeaError as exc:
                raise StepError(index, t, exc) from exc
        return outcomes
