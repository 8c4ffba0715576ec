from __future__ import annotations

import numpy as np
import pytest

from restless_bai.errors import ConfigError, InvariantError
from restless_bai.model.exp_family import ExpFamily, arm_model
from restless_bai.model.instance import Instance
from restless_bai.model.mdp import (
    ArmCountMismatchError,
    InvalidActionError,
    MaxDelayError,
    MdpConfig,
    Occupancy,
    SrsPolicy,
    check_occupancy,
    count_delay_vectors,
    deterministic_policy,
    embed_occupancy,
    enumerate_states,
    injective_delay_vectors,
    is_communicating,
    kernel,
    stationary_occupancy,
    successor,
    uniform_policy,
)


@pytest.mark.parametrize(("K", "R", "expected"), [(2, 2, 8), (2, 3, 16), (3, 3, 48)])
def test_state_counts_for_binary_arms(make_space, K, R, expected):
    assert make_space(K, R, 2).n_states == expected


def test_two_arm_two_delay_space_lists_both_delay_vectors(make_space):
    space = make_space(2, 2, 2)
    assert space.delay_vectors == [(1, 2), (2, 1)]
    assert len(space) == 8


@pytest.mark.parametrize(
    ("K", "R"), [(K, R) for K in (2, 3) for R in range(2, 6) if R >= K] + [(4, 4), (4, 6)]
)
@pytest.mark.parametrize("S", [2, 3])
def test_state_count_formula(K, R, S):
    space = enumerate_states(MdpConfig(K=K, R=R, S=S))
    assert sorted(space.delay_vectors) == sorted(injective_delay_vectors(K, R))
    assert len(space.delay_vectors) == count_delay_vectors(K, R)
    assert space.n_states == count_delay_vectors(K, R) * S**K


def test_max_delay_below_arm_count_is_rejected():
    with pytest.raises(MaxDelayError):
        MdpConfig(K=3, R=2, S=2)


def test_every_delay_vector_is_well_formed(make_space):
    space = make_space(3, 5, 2)
    for d in space.delay_vectors:
        assert sorted(d).count(1) == 1
        assert max(d) <= 5
        assert len(set(d)) == len(d)


def test_states_are_in_lexicographic_order(make_space):
    states = make_space(2, 3, 2).states()
    assert states == sorted(states)
    space = make_space(2, 3, 2)
    for s, (d, i) in enumerate(states):
        assert space.index_of(d, i) == s


def test_successor_resets_pulled_arm(make_space):
    space = make_space(2, 3, 2)
    s = space.index_of((2, 1), (0, 1))
    assert space.state(successor(space, s, 0, 1)) == ((1, 2), (1, 1))


def test_successor_rejects_arm_other_than_forced(make_space):
    space = make_space(2, 2, 2)
    s = space.index_of((2, 1), (0, 0))
    assert space.is_forced(s)
    with pytest.raises(InvalidActionError):
        successor(space, s, 1, 0)


def test_successor_wraps_forced_arm_with_three_arms(make_space):
    space = make_space(3, 3, 2)
    s = space.index_of((1, 2, 3), (0, 1, 0))
    assert space.admissible(s).tolist() == [2]
    assert space.state(successor(space, s, 2, 1)) == ((2, 3, 1), (0, 1, 1))


def test_successor_stays_inside_space(make_space):
    space = make_space(3, 4, 2)
    for s in range(space.n_states):
        for a in space.admissible(s):
            for j in range(space.S):
                nxt = successor(space, s, int(a), j)
                assert 0 <= nxt < space.n_states
                d, _ = space.state(nxt)
                assert d[a] == 1


def test_kernel_rows_are_stochastic(sticky_instance):
    space, kern = sticky_instance.space, sticky_instance.kernel
    sums = np.asarray(kern.matrix.sum(axis=1)).ravel().reshape(space.n_states, space.K)
    np.testing.assert_allclose(sums[space.valid], 1.0, atol=1e-10)
    assert np.all(sums[~space.valid] == 0.0)


def test_kernel_row_uses_delay_power(sticky_instance):
    space, kern = sticky_instance.space, sticky_instance.kernel
    s = space.index_of((2, 1), (1, 0))
    P2 = sticky_instance.arms[0].P_theta @ sticky_instance.arms[0].P_theta
    row = dict(kern.row(s, 0))
    for j in range(2):
        assert row[successor(space, s, 0, j)] == pytest.approx(P2[1, j], abs=1e-12)


def test_forced_state_has_no_row_for_other_arm(forced_instance):
    space, kern = forced_instance.space, forced_instance.kernel
    s = space.index_of((1, 2), (0, 0))
    assert kern.row(s, 0) == []
    assert sum(p for _, p in kern.row(s, 1)) == pytest.approx(1.0)


def test_kernel_needs_one_model_per_arm(sticky_instance):
    with pytest.raises(ArmCountMismatchError):
        kernel(sticky_instance.space, sticky_instance.arms[:1])
    assert issubclass(ArmCountMismatchError, ConfigError)


def test_kernel_from_models_matches_cached_powers(sticky_gen, make_space):
    space = make_space(2, 3, 2)
    arms = [arm_model(sticky_gen, t, max_delay=3) for t in (-0.3, 0.4)]
    direct = kernel(space, arms).matrix.toarray()
    family = ExpFamily(sticky_gen, max_delay=3)
    cached = Instance(family, space, [-0.3, 0.4]).kernel.matrix.toarray()
    np.testing.assert_allclose(direct, cached, atol=1e-12)


def test_uniform_occupancy_is_feasible(sticky_instance):
    space, kern = sticky_instance.space, sticky_instance.kernel
    nu = stationary_occupancy(kern, uniform_policy(space))
    report = check_occupancy(space, kern, nu, 1e-8)
    assert report.passed
    assert nu.total() == pytest.approx(1.0, abs=1e-12)
    assert (nu.nu >= 0).all()
    product_form = nu.state_marginal[:, None] * uniform_policy(space).probs
    np.testing.assert_allclose(nu.nu, product_form, atol=1e-10)


def test_forced_round_robin_splits_mass_between_delay_vectors(forced_instance):
    space, kern = forced_instance.space, forced_instance.kernel
    nu = stationary_occupancy(kern, uniform_policy(space))
    per_delay = nu.state_marginal.reshape(len(space.delay_vectors), space.n_obs).sum(axis=1)
    np.testing.assert_allclose(per_delay, [0.5, 0.5], atol=1e-10)


def test_check_occupancy_flags_mass_on_invalid_pairs(sticky_instance):
    space, kern = sticky_instance.space, sticky_instance.kernel
    everywhere = Occupancy(nu=np.full((space.n_states, space.K), 1.0 / (space.n_states * space.K)))
    report = check_occupancy(space, kern, everywhere, 1e-8)
    assert not report.passed
    assert report.mass_on_invalid


def test_check_occupancy_reports_perturbation(sticky_instance):
    space, kern = sticky_instance.space, sticky_instance.kernel
    nu = stationary_occupancy(kern, uniform_policy(space)).nu.copy()
    s = int(np.flatnonzero(space.forced < 0)[0])
    nu[s, 0] += 1e-3
    report = check_occupancy(space, kern, Occupancy(nu=nu), 1e-8)
    assert not report.passed
    assert report.flow_residual == pytest.approx(1e-3, abs=1e-8)


def test_stationary_occupancy_rejects_inadmissible_policy(forced_instance):
    space = forced_instance.space
    both = SrsPolicy(probs=np.full((space.n_states, 2), 0.5))
    with pytest.raises(InvalidActionError):
        stationary_occupancy(forced_instance.kernel, both)


def test_deterministic_policy_rejects_inadmissible_arm(forced_instance):
    space = forced_instance.space
    with pytest.raises(InvalidActionError):
        deterministic_policy(space, np.zeros(space.n_states, dtype=int))
    assert issubclass(InvalidActionError, InvariantError)


def test_positive_generator_gives_communicating_kernel(sticky_instance, forced_instance):
    assert is_communicating(sticky_instance.kernel)
    assert is_communicating(forced_instance.kernel)


def test_embedded_occupancy_stays_feasible(iid_gen, make_instance):
    small = make_instance(iid_gen, [-0.5, 0.5], 2)
    large = make_instance(iid_gen, [-0.5, 0.5], 3)
    nu = stationary_occupancy(small.kernel, uniform_policy(small.space))
    embedded = embed_occupancy(nu, small.space, large.space)
    assert embedded.total() == pytest.approx(1.0, abs=1e-12)
    assert check_occupancy(large.space, large.kernel, embedded, 1e-8).passed


def test_occupancy_triples_skip_zero_mass(forced_instance):
    nu = stationary_occupancy(forced_instance.kernel, uniform_policy(forced_instance.space))
    triples = nu.sparse_triples()
    assert len(triples) == forced_instance.space.n_states
    assert sum(v for _, _, v in triples) == pytest.approx(1.0, abs=1e-12)


def test_equal_delay_cap_splits_into_rotation_classes(make_space):
    space = make_space(3, 3, 2)
    assert len(space.delay_vectors) == 6
    assert (space.forced >= 0).all()
    start = space.initial_state((0, 0, 0))
    s, orbit = start, set()
    for _ in range(6):
        orbit.add(space.state(s)[0])
        s = successor(space, s, int(space.forced[s]), 0)
    assert orbit == {(3, 2, 1), (1, 3, 2), (2, 1, 3)}


def test_equal_delay_cap_with_three_arms_is_not_communicating(iid_gen, make_instance):
    inst = make_instance(iid_gen, [-0.5, 0.0, 0.5], 3)
    assert not is_communicating(inst.kernel)
    assert is_communicating(make_instance(iid_gen, [-0.5, 0.0, 0.5], 4).kernel)
