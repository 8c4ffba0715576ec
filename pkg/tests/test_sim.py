from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from restless_bai.model.mdp import stationary_occupancy, uniform_policy
from restless_bai.oracle.lower_bound import SolverConfig, t_star, uniform_occupancy
from restless_bai.policy.rstl_dtrack import PolicyConfig
from restless_bai.sim.audit import AuditFailureError, flow_audit, mean_flow_residual
from restless_bai.sim.runner import (
    HiddenChains,
    TrialRecord,
    run_batch,
    run_trial,
    summarize,
    uniform_frequencies,
    visitation_distance,
)
from restless_bai.sim.seeding import Stream, splitmix64, stream_rng, trial_seed

from .conftest import GAP_03_THETA

NO_CHECKS = dict(check_period=10**9, update_period=10**9)
CHEAP_SOLVER = SolverConfig(tol=1e-2, max_iter=3)


@pytest.fixture
def wide_gap(iid_gen, make_instance):
    return make_instance(iid_gen, [-2.0, 2.0], 2)


@pytest.fixture
def sticky_forced(sticky_gen, make_instance):
    return make_instance(sticky_gen, [-0.3, 0.4], 2)


@pytest.fixture
def gap_instance(iid_gen, make_instance):
    return make_instance(iid_gen, [-GAP_03_THETA, GAP_03_THETA], 2)


def test_splitmix64_first_output():
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_trial_seeds_are_stable_and_distinct():
    seeds = [trial_seed(2024, i) for i in range(1000)]
    assert seeds == [trial_seed(2024, i) for i in range(1000)]
    assert len(set(seeds)) == 1000
    assert trial_seed(2024, 0) != trial_seed(2025, 0)


def test_streams_are_independent():
    a = stream_rng(7, Stream.ARM_NOISE).random(5)
    b = stream_rng(7, Stream.POLICY).random(5)
    again = stream_rng(7, Stream.ARM_NOISE).random(5)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, again)


def test_hidden_chains_follow_stationary_law(sticky_forced):
    chains = HiddenChains(sticky_forced, np.random.default_rng(3))
    visits = np.zeros((2, 2))
    for _ in range(20_000):
        for arm in range(2):
            visits[arm, chains.observe(arm)] += 1
        chains.advance()
    freq = visits / visits.sum(axis=1, keepdims=True)
    for arm in range(2):
        np.testing.assert_allclose(freq[arm], sticky_forced.arms[arm].mu_theta, atol=0.03)


def test_run_trial_is_deterministic(wide_gap):
    cfg = PolicyConfig(delta=0.1, check_period=25, update_period=10**9)
    first = run_trial(wide_gap, wide_gap.space, cfg, seed=11, checkpoints=(50, 100))
    second = run_trial(wide_gap, wide_gap.space, cfg, seed=11, checkpoints=(50, 100))
    assert first.tau == second.tau
    assert (first.recommended, first.steps) == (second.recommended, second.steps)
    assert first.snapshots.keys() == second.snapshots.keys() == {50, 100}
    for n in first.snapshots:
        np.testing.assert_array_equal(first.snapshots[n], second.snapshots[n])


def test_widest_gap_stops_and_is_correct(iid_gen, make_instance):
    inst = make_instance(iid_gen, [iid_gen.theta_min, iid_gen.theta_max], 2)
    cfg = PolicyConfig(delta=0.1, check_period=25, update_period=10**9)
    record = run_trial(inst, inst.space, cfg, seed=5)
    assert not record.censored
    assert record.tau < 10**6
    assert record.correct
    assert record.outcome() == "correct"


def outcomes(run):
    return [(r.trial, r.seed, r.tau, r.recommended, r.censored) for r in run.records]


def test_batch_is_identical_across_worker_counts(wide_gap):
    cfg = PolicyConfig(delta=0.1, check_period=50, update_period=10**9)
    serial = run_batch(wide_gap, wide_gap.space, cfg, trials=6, master_seed=3)
    threaded = run_batch(wide_gap, wide_gap.space, cfg, trials=6, master_seed=3, parallelism=4)
    assert outcomes(serial) == outcomes(threaded)
    assert [r.trial for r in threaded.records] == list(range(6))


def test_censored_trials_are_neither_correct_nor_wrong():
    cfg = PolicyConfig(delta=0.1)
    records = [
        TrialRecord(
            trial=0, seed=1, tau=100, recommended=1, correct=True, censored=False, steps=101
        ),
        TrialRecord(
            trial=1, seed=2, tau=300, recommended=0, correct=False, censored=False, steps=301
        ),
        TrialRecord(
            trial=2, seed=3, tau=None, recommended=None, correct=None, censored=True, steps=50
        ),
    ]
    summary = summarize(records, cfg)
    assert summary.censored_count == 1
    assert summary.error_count == 1
    assert summary.error_rate == 0.5
    assert summary.mean_tau == 200.0
    assert summary.tau_over_log_inv_delta == pytest.approx(200.0 / math.log(10.0))
    bounded = summary.with_bounds(t_star=0.2, t_unif=0.1)
    assert bounded.bound_denominator == pytest.approx(0.15)
    assert bounded.ratio == pytest.approx(200.0 * 0.15 / math.log(10.0))
    assert records[2].outcome() == "censored"


def test_max_steps_censors_the_trial(wide_gap):
    cfg = PolicyConfig(delta=0.1, max_steps=40, **NO_CHECKS)
    record = run_trial(wide_gap, wide_gap.space, cfg, seed=1)
    assert record.censored
    assert record.tau is None and record.correct is None
    assert record.steps == 40


def test_flow_audit_passes_and_catches_corruption(sticky_instance):
    cfg = PolicyConfig(delta=0.1, max_steps=202, solver=CHEAP_SOLVER, **NO_CHECKS)
    record = run_trial(sticky_instance, sticky_instance.space, cfg, seed=4, record=True)
    trajectory = record.trajectory
    assert len(trajectory) == 200
    report = flow_audit(trajectory, checkpoints=range(0, 200, 10))
    assert report.passed and report.counts_match

    s, a, _ = trajectory.steps[0]
    trajectory.counts[s, a] += 1
    with pytest.raises(AuditFailureError):
        flow_audit(trajectory)
    trajectory.counts[s, a] -= 1

    s, a, nxt = trajectory.steps[50]
    trajectory.steps[50] = (s, a, (nxt + 1) % sticky_instance.space.n_states)
    with pytest.raises(AuditFailureError):
        flow_audit(trajectory)


def test_mean_flow_residual_stays_small(sticky_forced):
    cfg = PolicyConfig(delta=0.1, max_steps=302, **NO_CHECKS)
    space = sticky_forced.space
    trajectories = [
        run_trial(sticky_forced, space, cfg, seed=trial_seed(8, i), record=True).trajectory
        for i in range(100)
    ]
    report = mean_flow_residual(trajectories, sticky_forced.kernel, steps=300)
    assert report.trajectories == 100
    assert report.passed


def test_delayed_jumps_follow_matrix_power(sticky_forced):
    cfg = PolicyConfig(delta=0.1, max_steps=20_003, **NO_CHECKS)
    record = run_trial(sticky_forced, sticky_forced.space, cfg, seed=21, record=True)
    space = sticky_forced.space
    rows = record.trajectory.as_array()
    states, actions, nexts = rows[:, 0], rows[:, 1], rows[:, 2]
    pick = (actions == 0) & (space.delays[states, 0] == 2) & (space.observed[states, 0] == 0)
    observed = np.bincount(space.observed[nexts[pick], 0], minlength=2)
    P = sticky_forced.arms[0].P_theta
    expected = (P @ P)[0] * observed.sum()
    assert observed.sum() > 1000
    assert stats.chisquare(observed, f_exp=expected).pvalue > 1e-3


def test_visitation_distance_is_sup_norm():
    a = np.array([[0.5, 0.0], [0.25, 0.25]])
    b = np.array([[0.4, 0.0], [0.3, 0.3]])
    assert visitation_distance(a, b) == pytest.approx(0.1)


@pytest.mark.slow
def test_uniform_policy_frequencies_converge(sticky_instance):
    freq = uniform_frequencies(sticky_instance, sticky_instance.space, steps=100_000, seed=13)
    target = stationary_occupancy(sticky_instance.kernel, uniform_policy(sticky_instance.space)).nu
    assert np.abs(freq - target).max() <= 0.02


@pytest.mark.slow
def test_mean_flow_residual_over_long_runs(sticky_instance):
    cfg = PolicyConfig(delta=0.1, max_steps=502, solver=CHEAP_SOLVER, **NO_CHECKS)
    space = sticky_instance.space
    trajectories = [
        run_trial(sticky_instance, space, cfg, seed=trial_seed(17, i), record=True).trajectory
        for i in range(500)
    ]
    assert mean_flow_residual(trajectories, sticky_instance.kernel, steps=500).passed


@pytest.mark.slow
def test_error_rate_stays_below_delta(gap_instance):
    cfg = PolicyConfig(delta=0.1, check_period=500, update_period=10**9, max_steps=10**6)
    result = run_batch(gap_instance, gap_instance.space, cfg, trials=200, master_seed=1)
    assert result.censored_count == 0
    assert result.error_rate <= 0.1


@pytest.mark.slow
def test_smaller_delta_takes_longer(gap_instance):
    taus = {}
    for delta in (0.03, 0.3):
        cfg = PolicyConfig(delta=delta, check_period=100, update_period=10**9, max_steps=10**6)
        run = run_batch(gap_instance, gap_instance.space, cfg, trials=100, master_seed=2)
        assert run.censored_count == 0
        taus[delta] = run.mean_tau
    assert taus[0.03] > taus[0.3]


@pytest.mark.slow
def test_visitation_approaches_tracking_target(sticky_instance):
    cfg = PolicyConfig(delta=0.1, max_steps=20_001, check_period=10**9, update_period=2000)
    nu_star = t_star(sticky_instance, cfg.solver).nu_star.nu
    target = cfg.eta * uniform_occupancy(sticky_instance).nu + (1.0 - cfg.eta) * nu_star
    closer = 0
    for i in range(50):
        record = run_trial(
            sticky_instance,
            sticky_instance.space,
            cfg,
            seed=trial_seed(4, i),
            checkpoints=(1000, 20_000),
        )
        early = visitation_distance(record.snapshots[1000], target)
        late = visitation_distance(record.snapshots[20_000], target)
        closer += late < early
    assert closer >= 40
