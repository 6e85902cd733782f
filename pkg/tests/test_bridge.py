import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from idea.assets import Asset, AssetLibrary
from idea.bridge import (
    BridgeProblem,
    assemble_problem,
    compose_bridge,
    euclidean_simplex_projection,
    oracle_solve,
    perturbation_bound,
    project_simplex,
    solve_closed_form,
)
from idea.errors import DegenerateProblemError, EmptyLibraryError, InvalidInputError
from idea.fusion import SoftPrompt
from idea.stats import FeatureStats


def asset(mean, std, prompt, u=0.1):
    return Asset(SoftPrompt(np.array(prompt, float)), FeatureStats(np.array(mean, float), np.array(std, float)), u)


def random_problem(rng, k=None, c=None, lam=None):
    k = k or int(rng.integers(1, 17))
    c = c or int(rng.integers(2, 33))
    lam = rng.choice([0.0, 0.4, 1.0]) if lam is None else lam
    means = rng.normal(size=(c, k))
    stds = rng.uniform(0.2, 2.0, size=(c, k))
    target = np.concatenate([rng.normal(size=c), rng.uniform(0.2, 2.0, size=c)])
    return BridgeProblem(np.vstack([means, stds]), target, rng.uniform(0, 2, k), lam)


def test_assemble_shapes_and_order():
    lib = AssetLibrary(4)
    lib.insert_or_merge(asset([1, 0], [1, 1], [[0, 0]], u=0.3))
    target = FeatureStats(np.array([0.5, 0.5]), np.array([2.0, 2.0]))
    prob = assemble_problem(lib, target, 0.4)
    assert prob.stat_matrix.shape == (4, 1)
    np.testing.assert_array_equal(prob.stat_matrix[:, 0], [1, 0, 1, 1])
    np.testing.assert_array_equal(prob.target, [0.5, 0.5, 2, 2])
    lib.insert_or_merge(asset([0, 0], [1, 1], [[0, 0]], u=0.7))
    lib.insert_or_merge(asset([0, 1], [1, 1], [[0, 0]], u=0.0))
    np.testing.assert_array_equal(assemble_problem(lib, target, 0.4).uncertainties, [0.3, 0.7, 0.0])


def test_assemble_empty_library():
    with pytest.raises(EmptyLibraryError):
        assemble_problem(AssetLibrary(2), FeatureStats(np.zeros(1), np.ones(1)), 0.4)


@pytest.mark.parametrize("lam", [0.0, 0.4, 1.0])
def test_single_asset_weight_is_one(lam, rng):
    prob = BridgeProblem(rng.normal(size=(6, 1)), rng.normal(size=6), [0.5], lam)
    sol = solve_closed_form(prob)
    np.testing.assert_allclose(sol.weights_raw, [1.0], rtol=1e-15)
    assert sol.weights.tolist() == [1.0]
    np.testing.assert_array_equal(oracle_solve(prob), [1.0])


def test_symmetric_problem():
    sol = solve_closed_form(BridgeProblem(np.eye(2), [0.5, 0.5], [1, 1], 0.4))
    np.testing.assert_allclose(sol.weights, [0.5, 0.5], rtol=1e-15)


def test_hand_kkt_example():
    prob = BridgeProblem(np.eye(2), [1.0, 0.0], [1, 1], 1.0)
    np.testing.assert_allclose(prob.hessian(), 2 * np.eye(2))
    sol = solve_closed_form(prob)
    assert sol.nu == pytest.approx(-0.5, abs=1e-15)
    np.testing.assert_allclose(sol.weights_raw, [0.75, 0.25], rtol=1e-15)
    assert not sol.projected_flag and not sol.jitter_used
    np.testing.assert_allclose(oracle_solve(prob), [0.75, 0.25], atol=1e-6)


def test_oracle_beats_clip_renormalise_when_raw_negative():
    found = 0
    rng = np.random.default_rng(5)
    for _ in range(400):
        prob = random_problem(rng, k=int(rng.integers(2, 8)), c=3, lam=0.0)
        sol = solve_closed_form(prob)
        if sol.weights_raw.min() >= 0:
            continue
        found += 1
        assert prob.objective(oracle_solve(prob)) <= prob.objective(sol.weights) + 1e-9
    assert found > 10


@pytest.mark.parametrize(
    "raw, expected, fallback",
    [([0.3, 0.7], [0.3, 0.7], False), ([1.2, -0.2], [1.0, 0.0], False), ([-1.0, -1.0], [0.5, 0.5], True)],
)
def test_project_simplex_examples(raw, expected, fallback):
    proj = project_simplex(raw)
    np.testing.assert_allclose(proj.weights, expected, rtol=1e-15)
    assert proj.fallback is fallback


def test_euclidean_projection_matches_brute_force():
    # brute force: minimise ||w - v||^2 over a fine simplex grid in 3-d
    v = np.array([0.9, 0.4, -0.3])
    grid = np.linspace(0, 1, 401)
    best, best_d = None, np.inf
    for a in grid:
        for b in grid[grid <= 1 - a + 1e-12]:
            w = np.array([a, b, max(0.0, 1 - a - b)])
            d = np.sum((w - v) ** 2)
            if d < best_d:
                best, best_d = w, d
    np.testing.assert_allclose(euclidean_simplex_projection(v), best, atol=2.5e-3)


def test_compose_bridge_vertex_and_mixture():
    lib = AssetLibrary(4)
    a0 = asset([0, 2], [1, 1], [[1, 2], [3, 4]])
    a1 = asset([4, 0], [3, 1], [[5, 6], [7, 8]])
    lib.insert_or_merge(a0)
    lib.insert_or_merge(a1)
    p, s = compose_bridge(lib, [1.0, 0.0])
    assert p == a0.prompt and s == a0.coords
    p, s = compose_bridge(lib, [0.25, 0.75])
    expected_prompt = [[0.25 * x + 0.75 * y for x, y in zip(r0, r1)] for r0, r1 in zip(a0.prompt.tokens, a1.prompt.tokens)]
    np.testing.assert_allclose(p.tokens, expected_prompt, rtol=1e-15)
    np.testing.assert_allclose(s.mean, [3.0, 0.5], rtol=1e-15)
    np.testing.assert_allclose(s.std, [2.5, 1.0], rtol=1e-15)


def test_compose_identical_assets_fixed_point():
    lib = AssetLibrary(3)
    for _ in range(3):
        lib.insert_or_merge(asset([1, 2], [0.5, 0.5], [[1, -1]]))
    p, s = compose_bridge(lib, [0.2, 0.5, 0.3])
    np.testing.assert_allclose(p.tokens, [[1, -1]], rtol=1e-15)
    np.testing.assert_allclose(s.mean, [1, 2], rtol=1e-15)


def test_compose_rejects_bad_weights():
    lib = AssetLibrary(2)
    lib.insert_or_merge(asset([0], [1], [[0]]))
    with pytest.raises(InvalidInputError):
        compose_bridge(lib, [0.5, 0.5])
    with pytest.raises(InvalidInputError):
        compose_bridge(lib, [0.9])


@given(st.integers(0, 2**31 - 1))
def test_compose_stats_equal_stat_matrix_times_weights(seed):
    rng = np.random.default_rng(seed)
    k, c = int(rng.integers(1, 6)), int(rng.integers(1, 5))
    lib = AssetLibrary(k)
    for _ in range(k):
        lib.insert_or_merge(asset(rng.normal(size=c), rng.uniform(0.1, 2, c), rng.normal(size=(2, c))))
    w = rng.dirichlet(np.ones(k))
    _, stats = compose_bridge(lib, w)
    target = FeatureStats(np.zeros(c), np.ones(c))
    np.testing.assert_allclose(stats.as_vector(), assemble_problem(lib, target, 0.0).stat_matrix @ w, rtol=1e-13, atol=1e-15)


def test_jitter_rescues_duplicate_assets():
    col = np.array([1.0, 2.0, 0.5, 0.5])
    prob = BridgeProblem(np.column_stack([col, col]), col, [0.0, 0.0], 0.0)
    sol = solve_closed_form(prob)
    assert sol.jitter_used
    assert abs(sol.weights_raw.sum() - 1.0) <= 1e-9
    # every split of duplicate columns reproduces the target exactly
    assert prob.objective(sol.weights) <= 1e-12


def test_degenerate_problem_raises():
    col = np.array([1e10, 1e10])
    prob = BridgeProblem(np.column_stack([col, col]), col, [0.0, 0.0], 0.0)
    with pytest.raises(DegenerateProblemError):
        solve_closed_form(prob)
    with pytest.raises(DegenerateProblemError):
        perturbation_bound(prob)


def test_perturbation_bound_hand_value():
    assert perturbation_bound(BridgeProblem(np.eye(2), [1.0, 0.0], [1, 1], 1.0)) == pytest.approx(1.0, rel=1e-9)


def test_perturbation_bound_shrinks_with_regularisation(rng):
    prob = random_problem(rng, k=4, c=3, lam=0.4)
    weak = perturbation_bound(prob)
    strong = perturbation_bound(BridgeProblem(prob.stat_matrix, prob.target, prob.uncertainties * 1e4 + 1, 1.0))
    assert strong < weak


@pytest.mark.parametrize("seed", range(10))
def test_power_iteration_agrees_with_dense_norms(seed):
    rng = np.random.default_rng(seed)
    prob = random_problem(rng, lam=1.0)
    h = prob.hessian()
    m = np.linalg.solve(h, prob.stat_matrix.T)
    ev = np.linalg.eigvalsh(h)
    dense = np.linalg.norm(m, 2) * (1 + ev[-1] / ev[0])
    bound = perturbation_bound(prob)
    assert bound == pytest.approx(dense, rel=1e-6)
    assert bound >= np.linalg.norm(m, 2) * (1 - 1e-9)


@given(st.integers(0, 2**31 - 1))
def test_equality_constraint_holds(seed):
    sol = solve_closed_form(random_problem(np.random.default_rng(seed)))
    assert abs(sol.weights_raw.sum() - 1.0) <= 1e-9
    assert np.all(sol.weights >= 0) and abs(sol.weights.sum() - 1.0) <= 1e-12
