"""In-process invariant suite behind ``restless-bai validate``.

Each check runs on the instance described by the config and reports pass/fail with a short
detail string. A check that raises is reported as failed.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Callable, List, Tuple

import numpy as np

from restless_bai.infra.logging import get_logger
from restless_bai.model.exp_family import arm_model, mean_to_theta, perron, transition_matrix
from restless_bai.model.instance import Instance
from restless_bai.model.mdp import (
    Occupancy,
    SrsPolicy,
    check_occupancy,
    count_delay_vectors,
    deterministic_policy,
    is_communicating,
    stationary_occupancy,
    successor,
    uniform_policy,
)
from restless_bai.oracle.kl import grid_infimum, occupancy_objectives, occupancy_weights
from restless_bai.oracle.lower_bound import (
    average_reward_oracle,
    kl_cache,
    psi,
    t_star,
    uniform_occupancy,
)
from restless_bai.policy.rstl_dtrack import PolicyConfig
from restless_bai.sim.audit import flow_audit
from restless_bai.sim.runner import run_trial
from restless_bai.sim.seeding import trial_seed

from .config import ExperimentConfig

logger = get_logger(__name__)

MAX_ENUMERATED_POLICIES = 4096


@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


Check = Callable[[ExperimentConfig, Instance], Tuple[bool, str]]


def _family_stochastic(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    gen = cfg.generator_model()
    worst = 0.0
    pattern = True
    for theta in np.linspace(gen.theta_min, gen.theta_max, 11):
        P_theta = transition_matrix(gen, float(theta))
        worst = max(worst, float(np.abs(P_theta.sum(axis=1) - 1.0).max()))
        pattern &= bool(np.array_equal(P_theta > 0, gen.P > 0))
    return worst <= 1e-12 and pattern, f"max row error {worst:.2e}, zero pattern kept={pattern}"


def _rho_at_zero(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    rho = perron(cfg.generator_model(), 0.0).rho
    return abs(rho - 1.0) <= 1e-10, f"rho(0)={rho:.15g}"


def _mean_monotone(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    etas = inst.family.etas(np.linspace(*cfg.theta_interval, 21))
    steps = np.diff(etas)
    return bool((steps > 0).all()), f"min increment {steps.min():.3e}"


def _mean_round_trip(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    gen = cfg.generator_model()
    worst = 0.0
    for theta in np.linspace(gen.theta_min, gen.theta_max, 9)[1:-1]:
        back = mean_to_theta(gen, arm_model(gen, float(theta)).eta_theta)
        worst = max(worst, abs(back - theta))
    return worst <= 1e-8, f"max round-trip error {worst:.2e}"


def _state_count(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    space = inst.space
    expected = count_delay_vectors(space.K, space.R) * space.S**space.K
    return space.n_states == expected, f"{space.n_states} states, formula {expected}"


def _closure(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    space = inst.space
    for s in range(space.n_states):
        for a in space.admissible(s):
            for j in range(space.S):
                successor(space, s, int(a), j)
    return True, "successor stays inside the enumerated space"


def _kernel_rows(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    space = inst.space
    sums = np.asarray(inst.kernel.matrix.sum(axis=1)).ravel().reshape(space.n_states, space.K)
    worst = float(np.abs(sums[space.valid] - 1.0).max())
    empty = float(np.abs(sums[~space.valid]).max(initial=0.0))
    return worst <= 1e-10 and empty == 0.0, f"max row error {worst:.2e}"


def _communicating(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    ok = is_communicating(inst.kernel)
    detail = "single strongly connected class" if ok else "support graph is not strongly connected"
    return ok, detail


def _uniform_occupancy(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    nu = uniform_occupancy(inst)
    report = check_occupancy(inst.space, inst.kernel, nu, 1e-8)
    product_form = nu.state_marginal[:, None] * uniform_policy(inst.space).probs
    factor_error = float(np.abs(nu.nu - product_form).max())
    passed = report.passed and factor_error <= 1e-10
    detail = f"flow residual {report.flow_residual:.2e}, product-form error {factor_error:.2e}"
    return passed, detail


def _psi_homogeneous(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    nu = uniform_occupancy(inst)
    full = psi(nu, inst).value
    worst = 0.0
    for alpha in (0.25, 0.5, 0.9):
        scaled = psi(Occupancy(nu=alpha * nu.nu), inst).value
        worst = max(worst, abs(scaled - alpha * full))
    return worst <= 1e-9, f"max deviation {worst:.2e}"


def _psi_concave(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    rng = np.random.default_rng(trial_seed(cfg.master_seed, 0))
    space = inst.space
    worst = 0.0
    for _ in range(3):
        occupancies = []
        for _ in range(2):
            probs = rng.random((space.n_states, space.K)) * space.valid + 1e-3 * space.valid
            probs /= probs.sum(axis=1, keepdims=True)
            occupancies.append(stationary_occupancy(inst.kernel, SrsPolicy(probs=probs)))
        a, b = occupancies
        mid = Occupancy(nu=0.5 * (a.nu + b.nu))
        slack = psi(mid, inst).value - 0.5 * (psi(a, inst).value + psi(b, inst).value)
        worst = min(worst, slack)
    return worst >= -1e-9, f"worst midpoint slack {worst:.2e}"


def _psi_matches_grid(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    if inst.K != 2:
        return True, f"skipped: grid oracle needs two arms, got {inst.K}"
    nu = uniform_occupancy(inst)
    cache = kl_cache(inst)
    value = psi(nu, inst, cache=cache).value
    objectives = occupancy_objectives(cache, inst.theta, occupancy_weights(inst.space, nu.nu))
    grid = grid_infimum(objectives, inst.best, inst.family.theta_interval)
    passed = value <= grid + 1e-9 and grid - value <= 1e-3
    return passed, f"psi {value:.8g} vs grid {grid:.8g}"


def _rvi_exhaustive(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    space = inst.space
    free = [s for s in range(space.n_states) if not space.is_forced(s)]
    choices = [space.admissible(s) for s in free]
    total = int(np.prod([len(c) for c in choices])) if choices else 1
    if total > MAX_ENUMERATED_POLICIES:
        return True, f"skipped: {total} deterministic policies"
    reward = np.random.default_rng(trial_seed(cfg.master_seed, 1)).random((space.n_states, space.K))
    reward *= space.valid
    gain = average_reward_oracle(inst.kernel, reward, cfg.solver).gain
    base = np.array([int(space.admissible(s)[0]) for s in range(space.n_states)])
    best = -np.inf
    for picks in product(*choices):
        actions = base.copy()
        actions[free] = picks
        nu = stationary_occupancy(inst.kernel, deterministic_policy(space, actions))
        best = max(best, float(np.sum(reward * nu.nu)))
    error = abs(best - gain)
    return error <= 1e-8, f"rvi {gain:.10f} vs enumeration {best:.10f} over {total} policies"


def _bound_order(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    result = t_star(inst, cfg.solver)
    unif = psi(uniform_occupancy(inst), inst).value
    passed = unif <= result.t_star + result.fw_gap + cfg.solver.tol and result.t_star >= 0.0
    return passed, f"t_unif={unif:.6g} t_star={result.t_star:.6g} fw_gap={result.fw_gap:.2e}"


def _trajectory_audit(cfg: ExperimentConfig, inst: Instance) -> Tuple[bool, str]:
    # the stopping check never fires before max_steps with this cadence
    policy_cfg = PolicyConfig(
        delta=cfg.delta,
        eta=cfg.eta,
        epsilon_exponent=cfg.epsilon_exponent,
        update_period=cfg.update_period,
        check_period=10**9,
        max_steps=200 + inst.K,
        solver=cfg.policy_solver,
    )
    for index in range(5):
        seed = trial_seed(cfg.master_seed, index)
        record = run_trial(inst, inst.space, policy_cfg, seed, record=True)
        assert record.trajectory is not None
        flow_audit(record.trajectory)
    return True, "5 trajectories of 200 steps"


CHECKS: List[Tuple[str, Check]] = [
    ("family_row_stochastic", _family_stochastic),
    ("perron_rho_at_zero", _rho_at_zero),
    ("mean_strictly_increasing", _mean_monotone),
    ("mean_round_trip", _mean_round_trip),
    ("state_count_formula", _state_count),
    ("successor_closure", _closure),
    ("kernel_rows_stochastic", _kernel_rows),
    ("kernel_communicating", _communicating),
    ("uniform_occupancy_feasible", _uniform_occupancy),
    ("psi_ray_linear", _psi_homogeneous),
    ("psi_concave_midpoint", _psi_concave),
    ("psi_matches_grid", _psi_matches_grid),
    ("rvi_matches_enumeration", _rvi_exhaustive),
    ("t_unif_below_t_star", _bound_order),
    ("trajectory_flow_identity", _trajectory_audit),
]


def run_suite(cfg: ExperimentConfig) -> List[CheckResult]:
    inst = cfg.instance().materialize()
    results: List[CheckResult] = []
    for name, check in CHECKS:
        try:
            passed, detail = check(cfg, inst)
        except Exception as exc:  # a raising check is a failed check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name=name, passed=bool(passed), detail=detail))
        logger.info("invariant_checked", extra={"invariant": name, "passed": bool(passed)})
    return results
