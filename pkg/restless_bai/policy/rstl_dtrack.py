"""Rstl-Dtrack: mixture tracking of an optimal occupancy with a GLR-style stopping rule.

Time ``n`` is the index of the latest observation. The first K steps pull arms 0..K-1 once each;
from then on the policy lives on the delay / last-observed-state MDP.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from restless_bai.errors import ConfigError, InvariantError
from restless_bai.infra.logging import get_logger
from restless_bai.model.exp_family import ExpFamily
from restless_bai.model.instance import Instance, best_arm
from restless_bai.model.mdp import (
    Occupancy,
    StateSpace,
    stationary_occupancy,
    successor,
    uniform_policy,
)
from restless_bai.oracle.kl import count_objectives, row_entropy, separable_infimum
from restless_bai.oracle.lower_bound import SolverConfig, t_star

logger = get_logger(__name__)

TIE_TOL = 1e-12


class StaleCacheError(InvariantError):
    pass


class MaxStepsExceededError(InvariantError):
    def __init__(self, max_steps: int):
        super().__init__(f"no stopping decision within {max_steps} steps")
        self.max_steps = max_steps


def max_epsilon_exponent(n_states: int) -> float:
    return 1.0 / (2.0 * (1.0 + n_states))


@dataclass(frozen=True, slots=True)
class PolicyConfig:
    delta: float
    eta: float = 0.5
    epsilon_exponent: Optional[float] = None
    update_period: int = 50
    check_period: int = 1
    max_steps: int = 1_000_000
    solver: SolverConfig = field(default_factory=lambda: SolverConfig(tol=1e-4, max_iter=25))

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.eta < 1.0:
            raise ConfigError(f"eta must lie in (0, 1), got {self.eta}")
        if self.update_period < 1 or self.check_period < 1:
            raise ConfigError("update_period and check_period must be at least 1")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")

    def exponent(self, n_states: int) -> float:
        ceiling = max_epsilon_exponent(n_states)
        beta = ceiling if self.epsilon_exponent is None else self.epsilon_exponent
        if not 0.0 < beta <= ceiling:
            raise ConfigError(f"epsilon_exponent must lie in (0, {ceiling:.6g}], got {beta}")
        return beta


@dataclass(frozen=True, slots=True)
class Continue:
    action: int


@dataclass(frozen=True, slots=True)
class Stop:
    recommended: int
    tau: int
    statistic: float
    threshold: float


Decision = Union[Continue, Stop]


class RstlDtrack:
    """Single-owner policy state for one trial."""

    def __init__(self, space: StateSpace, family: ExpFamily, cfg: PolicyConfig):
        if family.max_delay < space.R:
            family = family.with_max_delay(space.R)
        self.space = space
        self.family = family
        self.cfg = cfg
        self.beta = cfg.exponent(space.n_states)
        K, R, S, n_states = space.K, space.R, space.S, space.n_states

        self.n = -1
        self.state: Optional[int] = None
        self._first_obs: List[int] = []
        self.counts = np.zeros((n_states, K), dtype=np.int64)
        self.arm_counts = np.zeros(K, dtype=np.int64)
        self.reward_sums = np.zeros(K)
        # observed j per (state, arm); the successor state is determined by j
        self.row_counts = np.zeros((n_states, K, S), dtype=np.int64)
        self.jump_counts = np.zeros((K, R, S, S), dtype=np.int64)

        self._theta_hat: Optional[np.ndarray] = None
        self._nu_star: Optional[Occupancy] = None
        self._nu_unif: Optional[Occupancy] = None
        self._mixture: Optional[np.ndarray] = None
        self._uniform = uniform_policy(space).probs
        self._trivial = bool((space.forced >= 0).all())
        self.refreshes = 0

    @property
    def K(self) -> int:
        return self.space.K

    @property
    def warm(self) -> bool:
        return self.n >= self.K - 1

    @property
    def eta_hat(self) -> np.ndarray:
        return np.divide(
            self.reward_sums,
            self.arm_counts,
            out=np.zeros(self.K),
            where=self.arm_counts > 0,
        )

    @property
    def theta_hat(self) -> np.ndarray:
        if self._theta_hat is None:
            self._theta_hat = np.array([self.family.theta_of_mean(e) for e in self.eta_hat])
        return self._theta_hat

    def first_action(self) -> int:
        return 0

    def epsilon(self, n: int) -> float:
        return float(max(n, 1) ** (-self.beta))

    def sampling_rule(self, s: int, n: int) -> np.ndarray:
        """``pi_n(. | s)`` as a length-K vector."""
        forced = int(self.space.forced[s])
        if forced >= 0:
            probs = np.zeros(self.K)
            probs[forced] = 1.0
            return probs
        if self._mixture is None:
            raise StaleCacheError("sampling caches were never built")
        eps = self.epsilon(n)
        return eps * self._uniform[s] + (1.0 - eps) * self._mixture[s]

    def select_action(self, rng: np.random.Generator) -> int:
        """Arm for time ``n + 1`` drawn from the current sampling rule."""
        if self.state is None:
            raise StaleCacheError("select_action called before the warm-up finished")
        s = self.state
        forced = int(self.space.forced[s])
        if forced >= 0:
            return forced
        probs = self.sampling_rule(s, self.n + 1)
        return int(rng.choice(self.K, p=probs / probs.sum()))

    def observe(self, arm: int, j: int) -> None:
        n = self.n + 1
        if not self.warm:
            if arm != n:
                raise InvariantError(f"warm-up expects arm {n} at time {n}, got {arm}")
            self._first_obs.append(j)
        else:
            s = self.state
            assert s is not None
            d = int(self.space.delays[s, arm])
            i = int(self.space.observed[s, arm])
            nxt = successor(self.space, s, arm, j)
            self.counts[s, arm] += 1
            self.row_counts[s, arm, j] += 1
            self.jump_counts[arm, d - 1, i, j] += 1
            self.state = nxt
        self.arm_counts[arm] += 1
        self.reward_sums[arm] += float(self.family.generator.f[j])
        self._theta_hat = None
        self.n = n

        if n == self.K - 1:
            self.state = self.space.initial_state(self._first_obs)
            self.refresh()
        elif n >= self.K and n % self.cfg.update_period == 0:
            self.refresh()

    def refresh(self) -> None:
        """Rebuild the plug-in kernel at ``theta_hat`` and both target occupancies."""
        if self._trivial:
            self._mixture = self._uniform
            return
        theta_hat = self.theta_hat
        best = self.reference_best()
        estimate = Instance(self.family, self.space, theta_hat, strict=False)
        self._nu_unif = stationary_occupancy(estimate.kernel, uniform_policy(self.space))
        result = t_star(estimate, self.cfg.solver, warm_start=self._nu_star, best=best)
        self._nu_star = result.nu_star
        self._mixture = self._mixture_policy(self._nu_unif.nu, self._nu_star.nu)
        self.refreshes += 1
        logger.debug(
            "oracle_refresh",
            extra={"n": self.n, "theta_hat": theta_hat, "t_star": result.t_star, "best": best},
        )

    def _mixture_policy(self, nu_unif: np.ndarray, nu_star: np.ndarray) -> np.ndarray:
        eta = self.cfg.eta
        mixed = eta * nu_unif + (1.0 - eta) * nu_star
        mass = mixed.sum(axis=1, keepdims=True)
        safe = np.where(mass > 0, mass, 1.0)
        return np.where(mass > 0, mixed / safe, self._uniform)

    def reference_best(self) -> int:
        """Best arm of the plug-in estimate; ties go to the smallest index."""
        clamped = np.array([self.family.clamp_mean(e) for e in self.eta_hat])
        return best_arm(clamped, strict=False)

    def test_statistic(self) -> float:
        objectives = count_objectives(
            self.family, self.space.R, self.jump_counts, row_entropy(self.row_counts)
        )
        res = separable_infimum(objectives, self.reference_best(), self.family.theta_interval)
        return res.value

    def threshold(self, delta: Optional[float] = None) -> float:
        delta = self.cfg.delta if delta is None else delta
        m = self.space.n_states - 1
        log_terms = np.log(math.e * (1.0 + self.counts / m))
        return math.log(1.0 / delta) + m * float(log_terms.sum())

    def recommend(self, rng: np.random.Generator) -> int:
        eta_hat = self.eta_hat
        leaders = np.flatnonzero(eta_hat >= eta_hat.max() - TIE_TOL)
        if len(leaders) == 1:
            return int(leaders[0])
        return int(rng.choice(leaders))

    def step(self, rng: np.random.Generator, tie_rng: np.random.Generator) -> Decision:
        """Stopping check at time ``n`` followed by the action for ``n + 1``.

        The check never draws from ``rng``, so the action sequence does not depend on
        ``check_period``.
        """
        n = self.n
        if n < self.K - 1:
            return Continue(action=n + 1)
        if n >= self.K and n % self.cfg.check_period == 0:
            statistic = self.test_statistic()
            threshold = self.threshold()
            if statistic >= threshold:
                recommended = self.recommend(tie_rng)
                logger.debug(
                    "stopping_rule_fired",
                    extra={"n": n, "statistic": statistic, "threshold": threshold},
                )
                return Stop(
                    recommended=recommended, tau=n, statistic=statistic, threshold=threshold
                )
        if n + 1 >= self.cfg.max_steps:
            raise MaxStepsExceededError(self.cfg.max_steps)
        return Continue(action=self.select_action(rng))

    def visitation(self) -> np.ndarray:
        total = max(self.n - self.K + 1, 1)
        return self.counts / total

    def bookkeeping(self) -> Dict[str, Tuple[int, int]]:
        """Count identities as (observed, expected) pairs; empty dict before warm-up ends."""
        if self.n < self.K:
            return {}
        return {
            "total": (int(self.counts.sum()), self.n - self.K + 1),
            "invalid": (int(self.counts[~self.space.valid].sum()), 0),
            "rows": (int(self.row_counts.sum()), int(self.counts.sum())),
            "arm_totals": (int(self.arm_counts.sum()), self.n + 1),
        }

    def empirical_row(self, s: int, a: int) -> List[Tuple[int, float]]:
        """``Q_hat_n(. | s, a)`` over successor states; uniform over all states when unvisited."""
        total = int(self.counts[s, a])
        if total == 0:
            p = 1.0 / self.space.n_states
            return [(t, p) for t in range(self.space.n_states)]
        return [
            (successor(self.space, s, a, j), c / total)
            for j, c in enumerate(self.row_counts[s, a])
            if c > 0
        ]
