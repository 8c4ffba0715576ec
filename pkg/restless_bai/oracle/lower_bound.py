"""Lower-bound program ``T_R*(theta) = max_{nu in Sigma_R(theta)} psi(nu, theta)``.

The objective is concave in the occupancy. Frank-Wolfe needs a linear maximization over the
occupancy polytope at each iterate, which is an average-reward MDP with the supergradient as
reward; it is solved by relative value iteration on the lazy kernel ``(Q + I) / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize

from restless_bai.errors import NumericalError
from restless_bai.infra.logging import get_logger
from restless_bai.model.instance import Instance
from restless_bai.model.mdp import (
    Kernel,
    Occupancy,
    check_occupancy,
    deterministic_policy,
    policy_from_occupancy,
    stationary_occupancy,
    uniform_policy,
)

from .kl import (
    InfeasibleOccupancyError,
    InnerInfResult,
    KlCache,
    danskin_weights,
    occupancy_objectives,
    occupancy_weights,
    separable_infimum,
)

logger = get_logger(__name__)

FEASIBILITY_TOL = 1e-8


class RviNoConvergenceError(NumericalError):
    pass


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(2000, ge=1)
    rvi_tol: float = Field(1e-10, gt=0)
    rvi_max_sweeps: int = Field(50_000, ge=1)
    step_rule: Literal["standard", "line_search"] = "standard"


@dataclass(frozen=True, slots=True)
class RviResult:
    gain: float
    bias: np.ndarray
    actions: np.ndarray
    sweeps: int


@dataclass(frozen=True, slots=True)
class LowerBoundResult:
    t_star: float
    nu_star: Occupancy
    fw_gap: float
    iterations: int
    converged: bool
    upper_bound: float


def kl_cache(inst: Instance) -> KlCache:
    return KlCache(inst.family, inst.theta, inst.space.R)


def psi(
    nu: Occupancy,
    inst: Instance,
    best: Optional[int] = None,
    cache: Optional[KlCache] = None,
    check: bool = False,
) -> InnerInfResult:
    """Inner infimum of the occupancy-weighted KL over alternatives to ``inst``.

    Weights need not be normalized; the result is linear along rays.
    """
    space = inst.space
    weights = np.asarray(nu.nu, dtype=float)
    if weights.shape != (space.n_states, space.K):
        raise InfeasibleOccupancyError(
            f"occupancy shape {weights.shape} does not match ({space.n_states}, {space.K})"
        )
    if (weights < -FEASIBILITY_TOL).any():
        raise InfeasibleOccupancyError("occupancy has negative mass")
    if check:
        total = weights.sum()
        report = check_occupancy(space, inst.kernel, Occupancy(nu=weights / total), FEASIBILITY_TOL)
        if not report.passed:
            raise InfeasibleOccupancyError(f"occupancy is not in the feasible polytope: {report}")
    best = inst.best if best is None else best
    cache = cache or kl_cache(inst)
    objectives = occupancy_objectives(cache, inst.theta, occupancy_weights(space, weights))
    return separable_infimum(objectives, best, inst.family.theta_interval)


def supergradient(
    inst: Instance, res: InnerInfResult, cache: Optional[KlCache] = None
) -> np.ndarray:
    cache = cache or kl_cache(inst)
    return danskin_weights(cache, inst.space, res.lambda_star)


def average_reward_oracle(
    kern: Kernel, reward: np.ndarray, cfg: Optional[SolverConfig] = None
) -> RviResult:
    """Relative value iteration for ``max_pi`` long-run average of ``reward(s, a)``.

    Runs on the lazy kernel, which keeps the optimal gain and optimal policies and makes every
    policy aperiodic. Greedy ties go to the smallest arm index.
    """
    cfg = cfg or SolverConfig()
    space = kern.space
    n, K = space.n_states, space.K
    reward = np.where(space.valid, reward, -np.inf)
    h = np.zeros(n)
    for sweep in range(1, cfg.rvi_max_sweeps + 1):
        q = reward + 0.5 * (kern.matrix @ h).reshape(n, K) + 0.5 * h[:, None]
        th = q.max(axis=1)
        diff = th - h
        span = float(diff.max() - diff.min())
        h = th - th[0]
        if span <= cfg.rvi_tol:
            gain = 0.5 * float(diff.max() + diff.min())
            return RviResult(gain=gain, bias=h, actions=np.argmax(q, axis=1), sweeps=sweep)
    logger.error("rvi_no_convergence", extra={"sweeps": cfg.rvi_max_sweeps, "span": span})
    raise RviNoConvergenceError(
        f"relative value iteration span {span:.3e} after {cfg.rvi_max_sweeps} sweeps"
    )


def uniform_occupancy(inst: Instance) -> Occupancy:
    return stationary_occupancy(inst.kernel, uniform_policy(inst.space))


def t_unif(inst: Instance, best: Optional[int] = None) -> float:
    return psi(uniform_occupancy(inst), inst, best=best).value


def _line_search(
    nu: np.ndarray, vertex: np.ndarray, inst: Instance, best: int, cache: KlCache
) -> float:
    def negated(gamma: float) -> float:
        mixed = (1.0 - gamma) * nu + gamma * vertex
        return -psi(Occupancy(nu=mixed), inst, best=best, cache=cache).value

    res = optimize.minimize_scalar(
        negated, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-6}
    )
    return float(res.x)


def t_star(
    inst: Instance,
    cfg: Optional[SolverConfig] = None,
    warm_start: Optional[Occupancy] = None,
    best: Optional[int] = None,
) -> LowerBoundResult:
    """Frank-Wolfe on the occupancy polytope.

    The returned occupancy is the best iterate seen. ``upper_bound`` is the smallest linear-oracle
    value so far and ``fw_gap`` is its distance to the returned value, so the true maximum lies in
    ``[t_star, t_star + fw_gap]``.
    """
    cfg = cfg or SolverConfig()
    best = inst.best if best is None else best
    kern = inst.kernel
    cache = kl_cache(inst)

    if warm_start is not None:
        # keep the conditional action distribution, re-solve the occupancy under this kernel
        nu = stationary_occupancy(kern, policy_from_occupancy(inst.space, warm_start.nu)).nu
        offset = 1
    else:
        nu = uniform_occupancy(inst).nu
        offset = 0

    best_value, best_nu = -np.inf, nu
    upper = np.inf
    gap = np.inf
    iteration = 0
    converged = False
    for iteration in range(cfg.max_iter):
        res = psi(Occupancy(nu=nu), inst, best=best, cache=cache)
        if res.value > best_value:
            best_value, best_nu = res.value, nu
        grad = supergradient(inst, res, cache)
        oracle = average_reward_oracle(kern, grad, cfg)
        upper = min(upper, oracle.gain)
        gap = oracle.gain - float(np.sum(grad * nu))
        if gap <= cfg.tol or upper - best_value <= cfg.tol:
            converged = True
            break
        vertex = stationary_occupancy(kern, deterministic_policy(inst.space, oracle.actions)).nu
        if cfg.step_rule == "line_search":
            gamma = _line_search(nu, vertex, inst, best, cache)
        else:
            gamma = 2.0 / (iteration + offset + 2.0)
        nu = (1.0 - gamma) * nu + gamma * vertex

    fw_gap = max(float(upper - best_value), 0.0)
    logger.info(
        "fw_converged" if converged else "fw_max_iter",
        extra={
            "t_star": best_value,
            "fw_gap": fw_gap,
            "last_gap": gap,
            "iterations": iteration + 1,
            "kl_cache_hits": cache.hits,
            "kl_cache_misses": cache.misses,
        },
    )
    return LowerBoundResult(
        t_star=float(best_value),
        nu_star=Occupancy(nu=best_nu),
        fw_gap=fw_gap,
        iterations=iteration + 1,
        converged=converged,
        upper_bound=float(upper),
    )


def linear_oracle_value(inst: Instance, nu: Occupancy, cfg: Optional[SolverConfig] = None) -> float:
    """Upper bound ``max_{nu'} <c, nu'>`` with ``c`` the supergradient at ``nu``."""
    cache = kl_cache(inst)
    res = psi(nu, inst, cache=cache)
    grad = supergradient(inst, res, cache)
    return average_reward_oracle(inst.kernel, grad, cfg).gain
