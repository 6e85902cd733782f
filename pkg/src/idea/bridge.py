"""Convex-hull bridge over stored assets.

The mixture weights minimise ``||A w - b||^2 + lam * w' diag(u) w`` over the
probability simplex, where column ``j`` of ``A`` stacks asset ``j``'s
``[mean; std]`` and ``b`` stacks the target's. Because statistics mix
linearly and the Gaussians are diagonal, the squared Wasserstein term reduces
exactly to this quadratic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import linalg

from .errors import DegenerateProblemError, EmptyLibraryError, InvalidInputError
from .fusion import SoftPrompt
from .stats import FeatureStats

JITTER_START = 1e-10
JITTER_MAX = 1e-4
# Cholesky pivots this far below the largest count as a failed factorization
_PIVOT_RATIO = 1e-7


@dataclass(frozen=True, eq=False)
class BridgeProblem:
    stat_matrix: np.ndarray
    target: np.ndarray
    uncertainties: np.ndarray
    lam: float

    def __post_init__(self):
        a = np.array(self.stat_matrix, dtype=float)
        b = np.array(self.target, dtype=float).reshape(-1)
        u = np.array(self.uncertainties, dtype=float).reshape(-1)
        if a.ndim != 2 or a.shape[1] < 1:
            raise InvalidInputError("stat_matrix must be 2C x K with K >= 1")
        if a.shape[0] != b.shape[0] or a.shape[1] != u.shape[0]:
            raise InvalidInputError(f"shape mismatch: A {a.shape}, b {b.shape}, u {u.shape}")
        if np.any(u < 0) or self.lam < 0:
            raise InvalidInputError("uncertainties and lambda must be non-negative")
        if not all(np.all(np.isfinite(x)) for x in (a, b, u)) or not np.isfinite(self.lam):
            raise InvalidInputError("bridge problem entries must be finite")
        object.__setattr__(self, "stat_matrix", a)
        object.__setattr__(self, "target", b)
        object.__setattr__(self, "uncertainties", u)
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def num_assets(self) -> int:
        return self.stat_matrix.shape[1]

    def hessian(self) -> np.ndarray:
        a = self.stat_matrix
        return a.T @ a + self.lam * np.diag(self.uncertainties)

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=float)
        r = self.stat_matrix @ w - self.target
        return float(r @ r + self.lam * np.sum(self.uncertainties * w * w))


@dataclass(frozen=True, eq=False)
class BridgeSolution:
    weights_raw: np.ndarray
    weights: np.ndarray
    nu: float
    projected_flag: bool
    jitter_used: bool
    fallback: bool = False


class SimplexProjection(NamedTuple):
    weights: np.ndarray
    clipped: bool
    fallback: bool


def assemble_problem(lib, target: FeatureStats, lam: float) -> BridgeProblem:
    if len(lib) == 0:
        raise EmptyLibraryError("cannot build a bridge from an empty library")
    cols = [asset.coords.as_vector() for asset in lib]
    if any(c.shape[0] != 2 * target.dim for c in cols):
        raise InvalidInputError("asset coordinates do not match the target dimension")
    u = [asset.uncertainty for asset in lib]
    return BridgeProblem(np.column_stack(cols), target.as_vector(), np.array(u), lam)


def _factor(h):
    """Cholesky of ``h`` with the jitter escalation; returns (factor, jittered)."""
    k = h.shape[0]
    jitter = 0.0
    while True:
        try:
            c, lower = linalg.cho_factor(h + jitter * np.eye(k), lower=True, check_finite=False)
            piv = np.abs(np.diag(c))
            if np.all(np.isfinite(c)) and piv.min() > _PIVOT_RATIO * piv.max():
                return (c, lower), jitter > 0
        except linalg.LinAlgError:
            pass
        jitter = JITTER_START if jitter == 0.0 else jitter * 10
        if jitter > JITTER_MAX * (1 + 1e-9):
            raise DegenerateProblemError("bridge Hessian is singular even after maximal jitter")


def project_simplex(w_raw) -> SimplexProjection:
    """Clip negatives to zero and L1-renormalise; uniform if nothing survives."""
    w_raw = np.asarray(w_raw, dtype=float)
    if w_raw.ndim != 1 or w_raw.size == 0:
        raise InvalidInputError("weights must be a non-empty vector")
    clipped = bool(np.any(w_raw < 0))
    w = np.maximum(w_raw, 0.0)
    total = w.sum()
    if not total > 0:
        return SimplexProjection(np.full(w.size, 1.0 / w.size), True, True)
    return SimplexProjection(w / total, clipped, False)


def solve_closed_form(problem: BridgeProblem) -> BridgeSolution:
    k = problem.num_assets
    factor, jittered = _factor(problem.hessian())
    ones = np.ones(k)
    hinv_g = linalg.cho_solve(factor, problem.stat_matrix.T @ problem.target, check_finite=False)
    hinv_1 = linalg.cho_solve(factor, ones, check_finite=False)
    nu = (hinv_g.sum() - 1.0) / hinv_1.sum()
    w_raw = hinv_g - nu * hinv_1
    proj = project_simplex(w_raw)
    return BridgeSolution(w_raw, proj.weights, float(nu), proj.clipped, jittered, proj.fallback)


def compose_bridge(lib, weights):
    """Token-wise mixture of prompts and fieldwise mixture of coordinates."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.shape[0] != len(lib):
        raise InvalidInputError(f"expected {len(lib)} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise InvalidInputError("bridge weights must lie on the simplex")
    prompts = np.stack([a.prompt.tokens for a in lib])
    means = np.stack([a.coords.mean for a in lib])
    stds = np.stack([a.coords.std for a in lib])
    prompt = SoftPrompt(np.tensordot(w, prompts, axes=1))
    return prompt, FeatureStats(w @ means, w @ stds)


def euclidean_simplex_projection(v) -> np.ndarray:
    """Exact Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def oracle_solve(problem: BridgeProblem, iterations: int = 5000, step_size=None) -> np.ndarray:
    """Accelerated projected gradient descent on the simplex-constrained quadratic.

    Reference optimizer for tests and gap statistics. Uses Nesterov momentum
    with function-value restarts; ``step_size`` defaults to ``1 / Lipschitz``.
    """
    if iterations < 1:
        raise InvalidInputError("iterations must be >= 1")
    k = problem.num_assets
    if k == 1:
        return np.ones(1)
    h = problem.hessian()
    g = problem.stat_matrix.T @ problem.target
    if step_size is None:
        lip = 2.0 * np.linalg.eigvalsh(h)[-1]
        step_size = 1.0 / lip if lip > 0 else 1.0

    def f(w):
        return w @ h @ w - 2.0 * g @ w

    x = np.full(k, 1.0 / k)
    y = x.copy()
    t = 1.0
    fx = f(x)
    for _ in range(iterations):
        x_new = euclidean_simplex_projection(y - step_size * 2.0 * (h @ y - g))
        f_new = f(x_new)
        if f_new > fx:
            # restart momentum
            t = 1.0
            y = x.copy()
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        if np.max(np.abs(x_new - x)) < 1e-16:
            x, fx = x_new, f_new
            break
        x, fx, t = x_new, f_new, t_new
    return x


def _power_max_eig(apply, k, tol=1e-10, max_iter=100_000):
    """Largest eigenvalue of a symmetric PSD operator by power iteration."""
    rng = np.random.default_rng(0)
    x = rng.standard_normal(k)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = apply(x)
        lam_new = float(x @ y)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            return 0.0
        x = y / ny
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-300):
            return max(lam_new, ny)
        lam = lam_new
    return max(lam, float(np.linalg.norm(apply(x))))


def perturbation_bound(problem: BridgeProblem) -> float:
    """``||H^-1 A'||_2 * (1 + cond(H^-1))``: Lipschitz constant of the raw weights in ``b``."""
    factor, _ = _factor(problem.hessian())
    chol = np.tril(factor[0])
    h = chol @ chol.T  # the (possibly jittered) matrix actually factored
    k = problem.num_assets
    m = linalg.cho_solve(factor, problem.stat_matrix.T, check_finite=False)
    op_norm = np.sqrt(_power_max_eig(lambda x: m @ (m.T @ x), k))
    lam_max_h = _power_max_eig(lambda x: h @ x, k)
    lam_max_hinv = _power_max_eig(lambda x: linalg.cho_solve(factor, x, check_finite=False), k)
    cond = lam_max_h * lam_max_hinv
    return float(op_norm * (1.0 + max(cond, 1.0)))
