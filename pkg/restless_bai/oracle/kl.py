"""KL building blocks shared by the lower-bound program and the stopping statistic.

Every weighted KL objective over alternative instances separates across arms because a kernel row
for action ``a`` only depends on ``lambda_a``. Each arm contributes a one-dimensional function
``g_b(x)``; the infimum over ``Alt`` then reduces to a pairwise search between a challenger and the
reference best arm.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.special import xlogy

from restless_bai.errors import NumericalError
from restless_bai.infra.logging import get_logger
from restless_bai.model.exp_family import ExpFamily, kl_rows
from restless_bai.model.mdp import StateSpace

logger = get_logger(__name__)

LAMBDA_QUANTUM = 1e-9
SEARCH_XATOL = 1e-10


class InfeasibleOccupancyError(NumericalError):
    pass


@dataclass(frozen=True, slots=True)
class InnerInfResult:
    value: float
    lambda_star: np.ndarray
    worst_arm: int


class KlCache:
    """Memo of ``KL(P_{theta_a}^d(.|i) || P_lambda^d(.|i))`` for every (d, i) of an arm.

    Keys snap lambda to LAMBDA_QUANTUM; the stored table is computed at the first lambda that hit
    the key. Safe to share between threads.
    """

    def __init__(
        self,
        family: ExpFamily,
        theta: Sequence[float],
        max_delay: int,
        quantum: float = LAMBDA_QUANTUM,
        max_entries: int = 65_536,
    ):
        self._family = family
        self._theta = np.asarray(theta, dtype=float)
        self._R = max_delay
        self._quantum = quantum
        self._max_entries = max_entries
        self._reference = [family.powers(float(t))[1 : max_delay + 1] for t in self._theta]
        self._tables: OrderedDict[Tuple[int, int], np.ndarray] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def table(self, arm: int, lam: float) -> np.ndarray:
        """Array of shape (R, S); entry ``[d-1, i]`` is the KL term for delay d from state i."""
        key = (arm, int(round(lam / self._quantum)))
        with self._lock:
            cached = self._tables.get(key)
            if cached is not None:
                self.hits += 1
                self._tables.move_to_end(key)
                return cached
            self.misses += 1
        alt = self._family.powers(lam)[1 : self._R + 1]
        table = np.maximum(kl_rows(self._reference[arm], alt), 0.0)
        table.setflags(write=False)
        with self._lock:
            self._tables[key] = table
            while len(self._tables) > self._max_entries:
                self._tables.popitem(last=False)
        return table

    def get(self, arm: int, d: int, i: int, lam: float) -> float:
        return float(self.table(arm, lam)[d - 1, i])


@dataclass(slots=True)
class ArmObjective:
    """One arm's contribution ``g_b(x)`` to a separable KL objective.

    ``minimizer`` is the unconstrained argmin over Theta when it is known in closed form (the true
    parameter for occupancy-weighted objectives), otherwise it is searched for.
    """

    fn: Callable[[float], float]
    weight: float
    minimizer: Optional[float] = None

    def __call__(self, x: float) -> float:
        if self.weight <= 0.0:
            return 0.0
        return self.fn(x)


def _bounded_min(fn: Callable[[float], float], lo: float, hi: float) -> Tuple[float, float]:
    """Bounded Brent search plus both endpoints, so boundary minima are not missed."""
    candidates: List[Tuple[float, float]] = [(fn(lo), lo), (fn(hi), hi)]
    if hi - lo > SEARCH_XATOL:
        res = optimize.minimize_scalar(
            fn, bounds=(lo, hi), method="bounded", options={"xatol": SEARCH_XATOL, "maxiter": 500}
        )
        candidates.append((float(res.fun), float(res.x)))
    value, x = min(candidates)
    return float(value), float(x)


def _unconstrained(
    obj: ArmObjective, interval: Tuple[float, float], is_best: bool
) -> Tuple[float, float]:
    lo, hi = interval
    if obj.weight <= 0.0:
        # flat objective: a challenger may sit anywhere above, the best arm anywhere below
        return 0.0, (lo if is_best else hi)
    if obj.minimizer is not None:
        return float(obj(obj.minimizer)), float(obj.minimizer)
    return _bounded_min(obj, lo, hi)


def separable_infimum(
    objectives: Sequence[ArmObjective], best: int, interval: Tuple[float, float]
) -> InnerInfResult:
    """``min_{a != best} inf {sum_b g_b(lambda_b) : lambda_a >= lambda_best}`` over ``interval^K``.

    Each ``g_b`` is assumed unimodal on the interval: ``inf_{lambda >= x} g_a`` is then ``g_a``
    evaluated at ``max(x, m_a)`` and the meeting point only has to be searched on ``[m_a, m_best]``.
    """
    K = len(objectives)
    if K < 2:
        raise ValueError("need at least two arms")
    base = [_unconstrained(obj, interval, is_best=(b == best)) for b, obj in enumerate(objectives)]
    floor = sum(value for value, _ in base)
    best_value, best_min = base[best]

    result: Optional[InnerInfResult] = None
    for a in range(K):
        if a == best:
            continue
        a_value, a_min = base[a]
        lam = np.array([m for _, m in base])
        if a_min >= best_min:
            total = floor
        else:
            pair = objectives[a], objectives[best]
            meet_value, meet = _bounded_min(lambda x: pair[0](x) + pair[1](x), a_min, best_min)
            total = floor - a_value - best_value + meet_value
            lam[a] = lam[best] = meet
        if result is None or total < result.value:
            result = InnerInfResult(value=max(float(total), 0.0), lambda_star=lam, worst_arm=a)
    assert result is not None
    return result


def occupancy_weights(space: StateSpace, nu: np.ndarray) -> np.ndarray:
    """Aggregate ``nu(s, b)`` into per-arm ``(d, i_b)`` weights of shape (K, R, S)."""
    K, R, S = space.K, space.R, space.S
    weights = np.zeros((K, R, S))
    for b in range(K):
        np.add.at(weights[b], (space.delays[:, b] - 1, space.observed[:, b]), nu[:, b])
    return weights


def occupancy_objectives(
    cache: KlCache, theta: Sequence[float], weights: np.ndarray
) -> List[ArmObjective]:
    objectives: List[ArmObjective] = []
    for b, theta_b in enumerate(theta):
        w_b = weights[b]

        def fn(x: float, b: int = b, w_b: np.ndarray = w_b) -> float:
            return float(np.sum(w_b * cache.table(b, x)))

        objectives.append(ArmObjective(fn=fn, weight=float(w_b.sum()), minimizer=float(theta_b)))
    return objectives


def count_objectives(
    family: ExpFamily, max_delay: int, jump_counts: np.ndarray, entropy: np.ndarray
) -> List[ArmObjective]:
    """Objectives for empirical rows.

    ``jump_counts[b, d-1, i, j]`` pools observed transitions of arm b by delay and last state;
    ``entropy[b]`` is ``sum n log(n / N)`` over the unpooled (state, arm) rows. The value is
    ``entropy[b] - sum_{d,i,j} jump_counts[b,d-1,i,j] log P_x^d(j|i)``.
    """
    objectives: List[ArmObjective] = []
    for b in range(jump_counts.shape[0]):
        counts = jump_counts[b]
        mask = counts > 0
        flat_counts = counts[mask]
        const = float(entropy[b])

        def fn(
            x: float,
            mask: np.ndarray = mask,
            flat_counts: np.ndarray = flat_counts,
            const: float = const,
        ) -> float:
            powers = family.powers(x)[1 : max_delay + 1]
            return const - float(np.dot(flat_counts, np.log(powers[mask])))

        objectives.append(ArmObjective(fn=fn, weight=float(flat_counts.sum())))
    return objectives


def row_entropy(row_counts: np.ndarray) -> np.ndarray:
    """``sum_j n_j log(n_j / N)`` per arm for counts of shape (n_states, K, S)."""
    totals = row_counts.sum(axis=-1, keepdims=True)
    totals = np.broadcast_to(totals, row_counts.shape)
    terms = xlogy(row_counts, row_counts) - xlogy(row_counts, totals)
    return terms.sum(axis=(0, 2))


def danskin_weights(
    cache: KlCache, space: StateSpace, lambda_star: Sequence[float]
) -> np.ndarray:
    """Supergradient of the occupancy objective at the infimizing alternative, shape (n_states, K).

    Inadmissible pairs get 0.
    """
    grad = np.zeros((space.n_states, space.K))
    for a in range(space.K):
        table = cache.table(a, float(lambda_star[a]))
        grad[:, a] = table[space.delays[:, a] - 1, space.observed[:, a]]
    grad[~space.valid] = 0.0
    return grad


def grid_infimum(
    objectives: Sequence[ArmObjective], best: int, interval: Tuple[float, float], points: int = 200
) -> float:
    """Brute-force check for two arms.

    Grids ``interval^2`` and keeps points with ``lambda_other >= lambda_best``.
    """
    if len(objectives) != 2:
        raise ValueError("grid oracle is implemented for two arms")
    other = 1 - best
    grid = np.linspace(interval[0], interval[1], points)
    g_other = np.array([objectives[other](x) for x in grid])
    g_best = np.array([objectives[best](x) for x in grid])
    # for lambda_other = grid[k] the best arm may take any grid[m] with m <= k
    running = np.minimum.accumulate(g_best)
    return float(np.min(g_other + running))
