"""Reference fusion stack: a mean-context token mixer with a linear decision head.

Every layer maps the token matrix ``T`` (rows = prompt tokens then node tokens) to

    T'_i = tanh(self_w @ T_i + ctx_w @ mean(T) + instr_w @ instruction + bias)

and the head scores only the node rows of the last layer. Gradients are
computed by hand-written reverse mode over this recurrence.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .stats import FeatureStats, StatsConfig, compute_stats


def _frozen(arr, ndim, name):
    arr = np.array(arr, dtype=float)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{name} must have {ndim} dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class FusionLayer:
    self_w: np.ndarray
    ctx_w: np.ndarray
    instr_w: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        for name in ("self_w", "ctx_w", "instr_w"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 2, name))
        object.__setattr__(self, "bias", _frozen(self.bias, 1, "bias"))
        c = self.bias.shape[0]
        for name in ("self_w", "ctx_w", "instr_w"):
            if getattr(self, name).shape != (c, c):
                raise InvalidInputError(f"{name} must be {c}x{c}, got {getattr(self, name).shape}")


@dataclass(frozen=True, eq=False)
class FusionStack:
    layers: tuple
    head: np.ndarray

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InvalidInputError("a fusion stack needs at least one layer")
        head = _frozen(self.head, 1, "head")
        for layer in layers:
            if layer.bias.shape[0] != head.shape[0]:
                raise InvalidInputError("all layers must share the head dimension")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "head", head)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def dim(self) -> int:
        return self.head.shape[0]

    @classmethod
    def random(cls, num_layers: int, dim: int, seed=None) -> "FusionStack":
        """Gaussian entries with std ``1/sqrt(dim)``, drawn in a fixed order."""
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(dim)
        layers = []
        for _ in range(num_layers):
            layers.append(
                FusionLayer(
                    self_w=rng.normal(0.0, scale, (dim, dim)),
                    ctx_w=rng.normal(0.0, scale, (dim, dim)),
                    instr_w=rng.normal(0.0, scale, (dim, dim)),
                    bias=rng.normal(0.0, scale, dim),
                )
            )
        head = rng.normal(0.0, scale, dim)
        return cls(tuple(layers), head)

    @classmethod
    def zeros(cls, num_layers: int, dim: int) -> "FusionStack":
        z = np.zeros((dim, dim))
        layers = tuple(FusionLayer(z, z, z, np.zeros(dim)) for _ in range(num_layers))
        return cls(layers, np.zeros(dim))


@dataclass(frozen=True, eq=False)
class SoftPrompt:
    """``L x C`` matrix of learnable prompt tokens."""

    tokens: np.ndarray

    def __post_init__(self):
        tokens = _frozen(self.tokens, 2, "prompt tokens")
        if tokens.shape[0] < 1:
            raise InvalidInputError("a soft prompt needs at least one token")
        object.__setattr__(self, "tokens", tokens)

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SoftPrompt):
            return NotImplemented
        return np.array_equal(self.tokens, other.tokens)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Observation:
    node_features: np.ndarray
    instruction: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        nodes = _frozen(self.node_features, 2, "node_features")
        instr = _frozen(self.instruction, 1, "instruction")
        if nodes.shape[0] < 1:
            raise InvalidInputError("an observation needs at least one candidate")
        if nodes.shape[1] != instr.shape[0]:
            raise InvalidInputError("instruction length must match the feature dimension")
        object.__setattr__(self, "node_features", nodes)
        object.__setattr__(self, "instruction", instr)

    @property
    def num_candidates(self) -> int:
        return self.node_features.shape[0]

    @property
    def dim(self) -> int:
        return self.node_features.shape[1]


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    token_mats: list
    num_prompt: int
    scores: np.ndarray
    policy: np.ndarray

    @property
    def node_slices(self) -> list:
        return [t[self.num_prompt:] for t in self.token_mats]

    def layer_stats(self, layer: int, cfg: StatsConfig = StatsConfig()) -> FeatureStats:
        """Statistics over the node rows of layer ``layer`` (1-based; 0 is the input)."""
        return compute_stats(self.token_mats[layer][self.num_prompt:], cfg)


def softmax(scores):
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores):
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _prompt_tokens(prompt, dim):
    if prompt is None:
        return np.zeros((0, dim))
    tokens = prompt.tokens if isinstance(prompt, SoftPrompt) else np.asarray(prompt, dtype=float)
    if tokens.ndim != 2 or tokens.shape[1] != dim:
        raise InvalidInputError(f"prompt must be L x {dim}, got shape {tokens.shape}")
    return tokens


def _apply_layer(layer: FusionLayer, tokens, instruction):
    ctx = tokens.mean(axis=0)
    shared = layer.ctx_w @ ctx + layer.instr_w @ instruction + layer.bias
    return np.tanh(tokens @ layer.self_w.T + shared)


def forward(stack: FusionStack, prompt, obs: Observation) -> ForwardTrace:
    if obs.dim != stack.dim:
        raise InvalidInputError(f"observation dim {obs.dim} does not match stack dim {stack.dim}")
    ptoks = _prompt_tokens(prompt, stack.dim)
    tokens = np.vstack([ptoks, obs.node_features])
    mats = [tokens]
    for layer in stack.layers:
        tokens = _apply_layer(layer, tokens, obs.instruction)
        mats.append(tokens)
    lp = ptoks.shape[0]
    scores = tokens[lp:] @ stack.head
    return ForwardTrace(mats, lp, scores, softmax(scores))


def forward_from(stack: FusionStack, tokens, start_layer: int, instruction, num_prompt: int = 0):
    """Scores obtained by feeding ``tokens`` in as layer ``start_layer``'s output."""
    for layer in stack.layers[start_layer:]:
        tokens = _apply_layer(layer, tokens, instruction)
    return tokens[num_prompt:] @ stack.head


def backprop(stack: FusionStack, trace: ForwardTrace, seeds: dict) -> list:
    """Total gradients w.r.t. every token matrix ``T(0)..T(M)``.

    ``seeds`` maps a layer index to the direct gradient of the objective with
    respect to that layer's full token matrix. Leading batch axes are allowed
    and must agree across seeds.
    """
    m = stack.num_layers
    rows = trace.token_mats[0].shape[0]
    grads = [None] * (m + 1)
    g = seeds.get(m)
    if g is None:
        # find batch shape from any seed
        any_seed = next(iter(seeds.values()))
        g = np.zeros(any_seed.shape[:-2] + trace.token_mats[m].shape)
    for ell in range(m, 0, -1):
        grads[ell] = g
        layer = stack.layers[ell - 1]
        dpre = g * (1.0 - trace.token_mats[ell] ** 2)
        g = dpre @ layer.self_w + (dpre.sum(axis=-2, keepdims=True) @ layer.ctx_w) / rows
        if ell - 1 in seeds:
            g = g + seeds[ell - 1]
    grads[0] = g
    return grads


def policy_entropy(policy) -> float:
    p = np.asarray(policy, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError("policy must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidInputError("policy must be a probability vector")
    nz = p[p > 0]
    return float(max(0.0, -np.sum(nz * np.log(nz))))


def fisher_trace_per_layer(stack: FusionStack, obs: Observation) -> np.ndarray:
    """Exact ``E_a ||d log pi(a) / dZ(l)||^2`` for each layer output, prompt-free."""
    trace = forward(stack, None, obs)
    pi = trace.policy
    n = pi.shape[0]
    # row a: d log pi(a) / d scores = e_a - pi
    dscores = np.eye(n) - pi[None, :]
    seed = dscores[:, :, None] * stack.head[None, None, :]
    grads = backprop(stack, trace, {stack.num_layers: seed})
    out = np.empty(stack.num_layers)
    for ell in range(1, stack.num_layers + 1):
        sq = np.sum(grads[ell] ** 2, axis=(1, 2))
        out[ell - 1] = float(pi @ sq)
    return out


def expected_hessian_trace_oracle(stack: FusionStack, obs: Observation, layer: int, fd_step: float = 1e-4) -> float:
    """``sum_a pi(a) tr Hess_Z(-log pi(a))`` at layer ``layer`` by central second differences.

    Test oracle; cost is ``2 * N * C`` partial forwards.
    """
    if not 1 <= layer <= stack.num_layers:
        raise InvalidInputError(f"layer must be in 1..{stack.num_layers}")
    trace = forward(stack, None, obs)
    pi = trace.policy
    base_tokens = trace.token_mats[layer]
    f0 = -log_softmax(forward_from(stack, base_tokens, layer, obs.instruction))
    total = 0.0
    for idx in np.ndindex(base_tokens.shape):
        plus = base_tokens.copy()
        plus[idx] += fd_step
        minus = base_tokens.copy()
        minus[idx] -= fd_step
        fp = -log_softmax(forward_from(stack, plus, layer, obs.instruction))
        fm = -log_softmax(forward_from(stack, minus, layer, obs.instruction))
        total += float(pi @ ((fp - 2.0 * f0 + fm) / fd_step**2))
    return total


def _check_alignment_inputs(stack, alpha, anchor):
    alpha = np.asarray(getattr(alpha, "alpha", alpha), dtype=float)
    per_layer = list(getattr(anchor, "per_layer_stats", anchor))
    if alpha.shape != (stack.num_layers,):
        raise InvalidInputError(f"alpha must have {stack.num_layers} entries, got {alpha.shape}")
    if len(per_layer) != stack.num_layers:
        raise InvalidInputError(f"anchor must have {stack.num_layers} layers, got {len(per_layer)}")
    for s in per_layer:
        if s.dim != stack.dim:
            raise InvalidInputError("anchor statistics dimension does not match the stack")
    return alpha, per_layer


def alignment_value_and_grad(
    stack: FusionStack,
    prompt,
    obs: Observation,
    alpha,
    anchor,
    cfg: StatsConfig = StatsConfig(),
):
    """Weighted moment-matching loss and its exact gradient w.r.t. the prompt tokens."""
    alpha, per_layer = _check_alignment_inputs(stack, alpha, anchor)
    ptoks = _prompt_tokens(prompt, stack.dim)
    trace = forward(stack, ptoks, obs)
    lp = trace.num_prompt
    n = obs.num_candidates
    loss = 0.0
    seeds = {}
    for ell in range(1, stack.num_layers + 1):
        z = trace.token_mats[ell][lp:]
        cur = compute_stats(z, cfg)
        src = per_layer[ell - 1]
        dmu = cur.mean - src.mean
        dsig = cur.std - src.std
        nmu = np.linalg.norm(dmu)
        nsig = np.linalg.norm(dsig)
        loss += alpha[ell - 1] * (nmu + nsig)
        gz = np.zeros_like(z)
        # subgradient of a norm at exactly zero is taken as zero
        if nmu > 0:
            gz += (dmu / nmu) / n
        if nsig > 0 and n > 1:
            gz += (z - cur.mean) * ((dsig / nsig) / ((n - 1) * cur.std))
        seed = np.zeros_like(trace.token_mats[ell])
        seed[lp:] = alpha[ell - 1] * gz
        seeds[ell] = seed
    grads = backprop(stack, trace, seeds)
    return float(loss), grads[0][:lp], trace


def prompt_gradient(
    stack: FusionStack,
    prompt: SoftPrompt,
    obs: Observation,
    alpha,
    anchor,
    cfg: StatsConfig = StatsConfig(),
) -> np.ndarray:
    return alignment_value_and_grad(stack, prompt, obs, alpha, anchor, cfg)[1]
