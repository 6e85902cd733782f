import numpy as np
import pytest

from idea.errors import InvalidInputError
from idea.fusion import FusionLayer, FusionStack, Observation, forward
from idea.stream import (
    DomainSpec,
    StreamConfig,
    bootstrap_source_stats,
    deshift,
    domain_schedule,
    generate_stream,
    make_domains,
    oracle_action,
    sample_observation,
)

# default_rng(11).normal draws, instruction first then z of shape (3, 4)
GOLDEN_INSTRUCTION = [0.03419276725318417, 1.3597475403099617, 1.2247210785859324, -0.5103070767876675]
GOLDEN_Z = [
    [-0.2979695111064471, -0.5273841930334252, 0.5697263575719601, -0.056064439045617594],
    [0.7468856162565439, -1.8473247989741095, 1.5665487746995206, -0.09643216015562055],
    [0.6803784532741461, -0.13656633397682774, -0.3790985670748533, 0.46311015859758675],
]


def test_golden_draw():
    dom = DomainSpec([1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 2.0, 2.0])
    obs = sample_observation(dom, 0, np.random.default_rng(11), 3)
    np.testing.assert_array_equal(obs.instruction, GOLDEN_INSTRUCTION)
    np.testing.assert_array_equal(obs.node_features, np.array([1.0, 2.0, 3.0, 4.0]) + 2.0 * np.array(GOLDEN_Z))


def test_supplied_instruction_is_kept():
    dom = DomainSpec.identity(4)
    obs = sample_observation(dom, 2, np.random.default_rng(11), 3, instruction=np.ones(4))
    np.testing.assert_array_equal(obs.instruction, np.ones(4))
    # with the instruction supplied, the first draw goes to z
    np.testing.assert_array_equal(obs.node_features[0], GOLDEN_INSTRUCTION)
    assert obs.step_index == 2


def test_drift_moves_the_mean():
    dom = DomainSpec(np.zeros(2), np.ones(2), drift_rate=0.5)
    np.testing.assert_array_equal(dom.offset(4), [2.0, 2.0])


@pytest.mark.parametrize("scale", [[0.0, 1.0], [-1.0, 1.0], [np.inf, 1.0]])
def test_invalid_scale(scale):
    with pytest.raises(InvalidInputError):
        DomainSpec(np.zeros(2), scale)


def test_invalid_domain_inputs():
    with pytest.raises(InvalidInputError):
        DomainSpec(np.zeros(2), np.ones(3))
    with pytest.raises(InvalidInputError):
        DomainSpec(np.zeros(2), np.ones(2), drift_rate=-1)
    with pytest.raises(InvalidInputError):
        StreamConfig(schedule="shuffled")
    with pytest.raises(InvalidInputError):
        StreamConfig(source_domain_index=6)


def test_sample_distribution():
    dom = DomainSpec([3.0, -1.0], [0.5, 2.0])
    rng = np.random.default_rng(0)
    x = np.vstack([sample_observation(dom, 0, rng, 50).node_features for _ in range(200)])
    np.testing.assert_allclose(x.mean(0), [3.0, -1.0], atol=0.05)
    np.testing.assert_allclose(x.std(0), [0.5, 2.0], rtol=0.03)


def test_domains_are_deterministic_and_source_is_identity():
    cfg = StreamConfig(domain_seed=4)
    a, b = make_domains(cfg), make_domains(cfg)
    assert len(a) == 6
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.shift_mean, y.shift_mean)
        np.testing.assert_array_equal(x.shift_scale, y.shift_scale)
    np.testing.assert_array_equal(a[0].shift_mean, np.zeros(8))
    np.testing.assert_array_equal(a[0].shift_scale, np.ones(8))
    for d in a[1:]:
        assert np.linalg.norm(d.shift_mean) == pytest.approx(3.0)


def test_layered_family_alternates_shift_kind():
    doms = make_domains(StreamConfig(family="layered"))
    for i, d in enumerate(doms[1:], start=1):
        if i % 2:
            np.testing.assert_array_equal(d.shift_mean, 0.0)
            assert np.all(d.shift_scale != 1.0)
        else:
            np.testing.assert_array_equal(d.shift_scale, 1.0)
            assert np.linalg.norm(d.shift_mean) > 0


def test_cyclic_schedule_visits_every_domain_each_cycle():
    cfg = StreamConfig(num_cycles=3)
    assert domain_schedule(cfg) == [list(range(6))] * 3
    eps = list(generate_stream(cfg, seed=1))
    assert len(eps) == 3 * 6 * 2
    assert [e.episode_index for e in eps] == list(range(len(eps)))
    assert all(len(e.observations) == 5 for e in eps)
    for cycle in range(3):
        assert sorted({e.domain_index for e in eps if e.cycle == cycle}) == list(range(6))


def test_random_recurrent_schedule_is_seeded():
    cfg = StreamConfig(schedule="random-recurrent", schedule_seed=3)
    assert domain_schedule(cfg) == domain_schedule(cfg)
    assert all(0 <= d < 6 for cyc in domain_schedule(cfg) for d in cyc)


def test_stream_is_a_pure_function_of_seed():
    cfg = StreamConfig()
    a = list(generate_stream(cfg, seed=5))
    b = list(generate_stream(cfg, seed=5))
    c = list(generate_stream(cfg, seed=6))
    for x, y in zip(a, b):
        for o, p in zip(x.observations, y.observations):
            np.testing.assert_array_equal(o.node_features, p.node_features)
    assert not np.array_equal(a[0].observations[0].node_features, c[0].observations[0].node_features)


def test_instruction_fixed_within_episode_and_scaled():
    eps = list(generate_stream(StreamConfig(instruction_scale=0.0), seed=2))
    for e in eps:
        for o in e.observations:
            np.testing.assert_array_equal(o.instruction, 0.0)
    e = next(generate_stream(StreamConfig(), seed=2))
    for o in e.observations[1:]:
        np.testing.assert_array_equal(o.instruction, e.observations[0].instruction)


def test_anchor_shape_and_determinism():
    stack = FusionStack.random(3, 4, seed=1)
    a = bootstrap_source_stats(stack, DomainSpec.identity(4), 16, rng=3)
    b = bootstrap_source_stats(stack, DomainSpec.identity(4), 16, rng=3)
    assert a.num_layers == 3
    assert all(s.dim == 4 for s in a.per_layer_stats)
    assert a == b
    with pytest.raises(InvalidInputError):
        bootstrap_source_stats(stack, DomainSpec.identity(4), 1, rng=3)


def test_anchor_standard_error_halves_with_four_times_the_samples():
    stack = FusionStack.random(2, 4, seed=1)
    src = DomainSpec.identity(4)

    def spread(n):
        means = [bootstrap_source_stats(stack, src, n, rng=s).final().mean for s in range(60)]
        return np.std(means, axis=0).mean()

    ratio = spread(8) / spread(32)
    assert 1.6 < ratio < 2.5


def test_deshift_inverts_the_domain_map():
    src = DomainSpec.identity(3)
    dom = DomainSpec([5.0, 0.0, -1.0], [2.0, 0.5, 1.0], drift_rate=0.1)
    z = np.random.default_rng(0).standard_normal((4, 3))
    obs = Observation(dom.offset(3) + dom.shift_scale * z, np.zeros(3), 3)
    np.testing.assert_allclose(deshift(src, dom, obs).node_features, z, atol=1e-15)


def test_oracle_action_on_source_is_prompt_free_argmax():
    stack = FusionStack.random(2, 4, seed=2)
    src = DomainSpec.identity(4)
    rng = np.random.default_rng(1)
    for _ in range(10):
        obs = sample_observation(src, 0, rng, 5)
        assert oracle_action(stack, src, src, obs) == int(np.argmax(forward(stack, None, obs).scores))


def test_oracle_action_hand_fixture():
    # one identity layer with zero context; head reads coordinate 0 through tanh
    c = 2
    layer = FusionLayer(np.eye(c), np.zeros((c, c)), np.zeros((c, c)), np.zeros(c))
    stack = FusionStack((layer,), np.array([1.0, 0.0]))
    src = DomainSpec.identity(c)
    dom = DomainSpec([10.0, 0.0], [1.0, 1.0])
    # after removing the offset node 1 sits at +0.2, the others below zero
    obs = Observation(np.array([[10.2, 0.0], [10.5, 0.0], [9.0, 0.0]]) - [0.3, 0.0], np.zeros(c))
    assert oracle_action(stack, src, dom, obs) == 1
    tied = Observation(np.array([[10.0, 0.0], [10.0, 0.0]]), np.zeros(c))
    assert oracle_action(stack, src, dom, tied) == 0


def test_identity_domain_sample_mean_within_four_standard_errors():
    rng = np.random.default_rng(3)
    x = np.vstack([sample_observation(DomainSpec.identity(4), 0, rng, 6).node_features for _ in range(500)])
    assert np.all(np.abs(x.mean(0)) < 4 / np.sqrt(x.shape[0]))


@pytest.mark.parametrize("n", [32, 128])
def test_doubling_samples_moves_anchor_within_standard_error(n):
    stack = FusionStack.random(3, 8, seed=0)
    src = DomainSpec.identity(8)
    small = bootstrap_source_stats(stack, src, n, rng=9)
    big = bootstrap_source_stats(stack, src, 2 * n, rng=9)
    for a, b in zip(small.per_layer_stats, big.per_layer_stats):
        bound = 6 * b.std / np.sqrt(n * 6)
        assert np.all(np.abs(a.mean - b.mean) < bound)
