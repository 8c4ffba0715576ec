"""Single-parameter exponential family of ergodic transition matrices.

A generator ``(P, f)`` is tilted to ``P~_theta(j|i) = P(j|i) exp(theta f(j))`` and renormalized with
the right Perron vector ``v`` of the tilted matrix into the stochastic ``P_theta``. The arm mean
``eta_theta`` is the stationary average of ``f`` and equals the derivative of ``log rho(theta)``.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import csgraph
from scipy.special import rel_entr

from restless_bai.errors import ConfigError, NumericalError
from restless_bai.infra.logging import get_logger

logger = get_logger(__name__)

ROW_SUM_TOL = 1e-12
PERRON_TOL = 1e-12
PERRON_MAX_ITER = 10_000
STATIONARY_TOL = 1e-12
STATIONARY_MAX_ITER = 10_000
MEAN_TOL = 1e-9
THETA_SNAP = 1e-12


class FamilyError(ConfigError):
    pass


class NonStochasticRowError(FamilyError):
    pass


class ReducibleGeneratorError(FamilyError):
    pass


class ConstantRewardError(FamilyError):
    pass


class AssumptionViolatedError(FamilyError):
    def __init__(self, assumption: str, detail: str):
        super().__init__(f"assumption {assumption} violated: {detail}")
        self.assumption = assumption


class ThetaOutOfRangeError(FamilyError):
    pass


class DelayOutOfRangeError(FamilyError):
    pass


class PerronNoConvergenceError(NumericalError):
    pass


@dataclass(frozen=True, eq=False)
class Generator:
    P: np.ndarray
    f: np.ndarray
    theta_interval: Tuple[float, float]

    def __post_init__(self) -> None:
        P = np.array(self.P, dtype=float)
        f = np.array(self.f, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise NonStochasticRowError(f"generator must be square, got shape {P.shape}")
        if P.shape[0] < 2:
            raise FamilyError("generator needs at least two states")
        if f.shape != (P.shape[0],):
            raise FamilyError(f"f must have length {P.shape[0]}, got shape {f.shape}")
        lo, hi = (float(x) for x in self.theta_interval)
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo >= hi:
            raise FamilyError(
                f"theta_interval must satisfy theta_min < theta_max, got [{lo}, {hi}]"
            )
        P.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "theta_interval", (lo, hi))

    @property
    def S(self) -> int:
        return int(self.P.shape[0])

    @property
    def theta_min(self) -> float:
        return self.theta_interval[0]

    @property
    def theta_max(self) -> float:
        return self.theta_interval[1]


@dataclass(frozen=True)
class FamilyReport:
    checks: Dict[str, bool]

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def failed(self) -> List[str]:
        return [name for name, passed in self.checks.items() if not passed]


@dataclass(frozen=True)
class TiltedSpectrum:
    theta: float
    rho: float
    v: np.ndarray


@dataclass(frozen=True, eq=False)
class ArmModel:
    theta: float
    P_theta: np.ndarray
    mu_theta: np.ndarray
    eta_theta: float
    max_delay: int = 1
    _powers: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def _strongly_connected(adjacency: np.ndarray) -> bool:
    if adjacency.shape[0] <= 1:
        return True
    n_components, _ = csgraph.connected_components(
        sparse.csr_matrix(adjacency), directed=True, connection="strong"
    )
    return bool(n_components == 1)


def _hits(P: np.ndarray, sources: np.ndarray, targets: np.ndarray) -> bool:
    if not sources.any():
        return True
    return bool((P[np.ix_(sources, targets)] > 0).any(axis=1).all())


def validate_family(gen: Generator) -> FamilyReport:
    P, f = gen.P, gen.f
    sums_ok = np.allclose(P.sum(axis=1), 1.0, rtol=0.0, atol=ROW_SUM_TOL)
    stochastic = bool((P >= 0).all() and sums_ok)
    positive = P > 0
    top = f == f.max()
    bottom = f == f.min()
    checks = {
        "row_stochastic": stochastic,
        "irreducible": _strongly_connected(positive),
        "f_non_constant": bool(f.max() > f.min()),
        "A1": _strongly_connected(positive[np.ix_(top, top)]),
        "A2": _hits(P, ~top, top),
        "A3": _strongly_connected(positive[np.ix_(bottom, bottom)]),
        "A4": _hits(P, ~bottom, bottom),
    }
    report = FamilyReport(checks=checks)
    if not checks["row_stochastic"]:
        raise NonStochasticRowError(
            "generator rows must be nonnegative and sum to 1, "
            f"got row sums {P.sum(axis=1).tolist()}"
        )
    if not checks["irreducible"]:
        raise ReducibleGeneratorError("generator has more than one communicating class")
    if not checks["f_non_constant"]:
        raise ConstantRewardError("reward function f is constant")
    for name, detail in (
        ("A1", "submatrix on argmax f is not irreducible"),
        ("A2", "some state cannot step into argmax f"),
        ("A3", "submatrix on argmin f is not irreducible"),
        ("A4", "some state cannot step into argmin f"),
    ):
        if not checks[name]:
            raise AssumptionViolatedError(name, detail)
    return report


def tilted(gen: Generator, theta: float) -> np.ndarray:
    return gen.P * np.exp(theta * gen.f)[None, :]


def perron(gen: Generator, theta: float) -> TiltedSpectrum:
    """Perron root and right eigenvector of the tilted matrix by shifted power iteration.

    The shift keeps the iteration convergent for periodic generators; convergence is declared when
    the Collatz-Wielandt bounds ``min (Mv)_i / v_i`` and ``max (Mv)_i / v_i`` agree to PERRON_TOL.
    """
    if not math.isfinite(theta):
        raise ThetaOutOfRangeError(f"theta must be finite, got {theta}")
    M = tilted(gen, theta)
    shift = 0.5 * float(M.sum(axis=1).max())
    v = np.ones(gen.S)
    for iteration in range(1, PERRON_MAX_ITER + 1):
        w = M @ v
        ratios = w / v
        lo, hi = float(ratios.min()), float(ratios.max())
        if hi - lo <= PERRON_TOL * hi:
            rho = 0.5 * (lo + hi)
            return TiltedSpectrum(theta=float(theta), rho=rho, v=v / v.max())
        v = w + shift * v
        v = v / v.max()
    logger.error("perron_no_convergence", extra={"theta": theta, "iterations": PERRON_MAX_ITER})
    raise PerronNoConvergenceError(f"power iteration did not converge at theta={theta}")


def transition_matrix(gen: Generator, theta: float) -> np.ndarray:
    spectrum = perron(gen, theta)
    v = spectrum.v
    P_theta = tilted(gen, theta) * v[None, :] / (spectrum.rho * v[:, None])
    return P_theta / P_theta.sum(axis=1, keepdims=True)


def stationary_distribution(P: np.ndarray) -> np.ndarray:
    lazy = 0.5 * (P + np.eye(P.shape[0]))
    mu = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(STATIONARY_MAX_ITER):
        nxt = mu @ lazy
        if np.abs(nxt - mu).max() <= STATIONARY_TOL:
            return nxt / nxt.sum()
        mu = nxt
    # stalled: solve (P^T - I) mu = 0 with the normalization row appended
    n = P.shape[0]
    system = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    mu, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    return mu / mu.sum()


def _check_theta(gen: Generator, theta: float) -> float:
    lo, hi = gen.theta_interval
    if not (lo - THETA_SNAP <= theta <= hi + THETA_SNAP):
        raise ThetaOutOfRangeError(f"theta={theta} outside [{lo}, {hi}]")
    return float(min(max(theta, lo), hi))


def arm_model(gen: Generator, theta: float, max_delay: int = 1) -> ArmModel:
    theta = _check_theta(gen, theta)
    P_theta = transition_matrix(gen, theta)
    mu = stationary_distribution(P_theta)
    eta = float(gen.f @ mu)
    P_theta.setflags(write=False)
    mu.setflags(write=False)
    return ArmModel(theta=theta, P_theta=P_theta, mu_theta=mu, eta_theta=eta, max_delay=max_delay)


def tpm_power(model: ArmModel, d: int) -> np.ndarray:
    if d < 1 or d > model.max_delay:
        raise DelayOutOfRangeError(f"delay {d} outside [1, {model.max_delay}]")
    with model._lock:
        powers = model._powers
        if not powers:
            powers[1] = model.P_theta
        top = max(powers)
        while top < d:
            power = powers[top] @ model.P_theta
            power.setflags(write=False)
            top += 1
            powers[top] = power
        return powers[d]


def log_partition(gen: Generator, theta: float) -> float:
    return math.log(perron(gen, theta).rho)


def mean_of(gen: Generator, theta: float) -> float:
    return float(gen.f @ stationary_distribution(transition_matrix(gen, theta)))


def mean_range(gen: Generator) -> Tuple[float, float]:
    return mean_of(gen, gen.theta_min), mean_of(gen, gen.theta_max)


def mean_to_theta(gen: Generator, eta: float, bounds: Tuple[float, float] | None = None) -> float:
    lo_eta, hi_eta = bounds or mean_range(gen)
    target = min(max(float(eta), lo_eta), hi_eta)
    if target <= lo_eta:
        return gen.theta_min
    if target >= hi_eta:
        return gen.theta_max
    # bisection is valid because the mean map is strictly increasing in theta
    root = optimize.bisect(
        lambda theta: mean_of(gen, theta) - target,
        gen.theta_min,
        gen.theta_max,
        xtol=1e-14,
        rtol=8.9e-16,
        maxiter=200,
    )
    return float(root)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL divergence; 0 log 0 = 0, rows must share the zero pattern."""
    return rel_entr(p, q).sum(axis=-1)


def kl_rate(gen: Generator, theta: float, lam: float) -> float:
    model = arm_model(gen, theta)
    P_lam = transition_matrix(gen, lam)
    return float(model.mu_theta @ kl_rows(model.P_theta, P_lam))


class ExpFamily:
    """A validated generator with a bounded cache of TPM powers keyed by snapped theta.

    Shared read-only between trials; the cache is guarded by a lock.
    """

    def __init__(self, generator: Generator, max_delay: int = 1, cache_size: int = 4096):
        validate_family(generator)
        self._gen = generator
        self._max_delay = max_delay
        self._cache_size = cache_size
        self._powers: OrderedDict[int, np.ndarray] = OrderedDict()
        self._models: OrderedDict[int, ArmModel] = OrderedDict()
        self._lock = threading.Lock()
        self._mean_bounds = mean_range(generator)

    @property
    def generator(self) -> Generator:
        return self._gen

    @property
    def max_delay(self) -> int:
        return self._max_delay

    @property
    def S(self) -> int:
        return self._gen.S

    @property
    def theta_interval(self) -> Tuple[float, float]:
        return self._gen.theta_interval

    @property
    def mean_bounds(self) -> Tuple[float, float]:
        return self._mean_bounds

    def with_max_delay(self, max_delay: int) -> "ExpFamily":
        if max_delay == self._max_delay:
            return self
        return ExpFamily(self._gen, max_delay=max_delay, cache_size=self._cache_size)

    def _key(self, theta: float) -> int:
        return int(round(theta / THETA_SNAP))

    def _remember(self, store: OrderedDict, key: int, value: object) -> None:
        store[key] = value
        store.move_to_end(key)
        while len(store) > self._cache_size:
            store.popitem(last=False)

    def model(self, theta: float) -> ArmModel:
        key = self._key(theta)
        with self._lock:
            cached = self._models.get(key)
        if cached is not None:
            return cached
        model = arm_model(self._gen, theta, max_delay=self._max_delay)
        with self._lock:
            self._remember(self._models, key, model)
        return model

    def powers(self, theta: float) -> np.ndarray:
        """Stack ``[I, P_theta, P_theta^2, ..., P_theta^R]`` of shape (R+1, S, S)."""
        theta = _check_theta(self._gen, theta)
        key = self._key(theta)
        with self._lock:
            cached = self._powers.get(key)
        if cached is not None:
            return cached
        P_theta = transition_matrix(self._gen, theta)
        stack = np.empty((self._max_delay + 1, self.S, self.S))
        stack[0] = np.eye(self.S)
        for d in range(1, self._max_delay + 1):
            stack[d] = stack[d - 1] @ P_theta
        stack.setflags(write=False)
        with self._lock:
            self._remember(self._powers, key, stack)
        return stack

    def eta(self, theta: float) -> float:
        return self.model(theta).eta_theta

    def theta_of_mean(self, eta: float) -> float:
        return mean_to_theta(self._gen, eta, bounds=self._mean_bounds)

    def clamp_mean(self, eta: float) -> float:
        lo, hi = self._mean_bounds
        return min(max(float(eta), lo), hi)

    def etas(self, thetas: Sequence[float]) -> np.ndarray:
        return np.array([self.eta(theta) for theta in thetas])
