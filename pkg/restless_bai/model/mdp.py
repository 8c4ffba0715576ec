"""Delay / last-observed-state MDP under the R-max-delay constraint.

States are pairs ``(d, i)`` of a delay vector and a last-observed-state vector. Exactly one delay
equals 1 and no delay exceeds R; when an arm sits at delay R it is forced on the next step.
Arms and observed states are 0-based; delays keep their natural values 1..R.
"""
from __future__ import annotations

import math
from collections import deque
from itertools import permutations
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from restless_bai.errors import ConfigError, InvariantError, NumericalError
from restless_bai.infra.logging import get_logger

from .exp_family import ArmModel, tpm_power

logger = get_logger(__name__)

OCCUPANCY_TOL = 1e-12
OCCUPANCY_MAX_SWEEPS = 100_000

State = Tuple[Tuple[int, ...], Tuple[int, ...]]


class MaxDelayError(ConfigError):
    pass


class InvalidActionError(InvariantError):
    pass


class ArmCountMismatchError(ConfigError):
    pass


class DelayCountMismatchError(NumericalError):
    pass


class OccupancyNoConvergenceError(NumericalError):
    pass


class NonErgodicPolicyError(NumericalError):
    pass


@dataclass(frozen=True)
class MdpConfig:
    K: int
    R: int
    S: int

    def __post_init__(self) -> None:
        if self.K < 2:
            raise MaxDelayError(f"need at least two arms, got K={self.K}")
        if self.S < 2:
            raise MaxDelayError(f"need at least two per-arm states, got S={self.S}")
        if self.R < self.K:
            raise MaxDelayError(f"R >= K is required, got R={self.R} < K={self.K}")


def count_delay_vectors(K: int, R: int) -> int:
    return math.factorial(K) * math.comb(R - 1, K - 1)


def _delay_successor(d: Tuple[int, ...], a: int) -> Tuple[int, ...]:
    return tuple(1 if b == a else x + 1 for b, x in enumerate(d))


def _admissible(d: Tuple[int, ...], R: int) -> List[int]:
    at_cap = [b for b, x in enumerate(d) if x == R]
    return at_cap if at_cap else list(range(len(d)))


class StateSpace:
    """Enumerated ``S_R`` with a stable lexicographic order on ``(d, i)``.

    Index layout: ``index = delay_pos * S**K + code(i)`` with ``code`` the base-S number of ``i``.
    """

    def __init__(self, cfg: MdpConfig, delay_vectors: Sequence[Tuple[int, ...]]):
        self.cfg = cfg
        K, R, S = cfg.K, cfg.R, cfg.S
        self.delay_vectors: List[Tuple[int, ...]] = sorted(delay_vectors)
        self.delay_pos: Dict[Tuple[int, ...], int] = {
            d: k for k, d in enumerate(self.delay_vectors)
        }
        self.n_obs = S**K
        self.n_states = len(self.delay_vectors) * self.n_obs
        self._radix = np.array([S ** (K - 1 - b) for b in range(K)], dtype=np.int64)

        n_delays = len(self.delay_vectors)
        self.delay_next = np.full((n_delays, K), -1, dtype=np.int64)
        delay_forced = np.full(n_delays, -1, dtype=np.int64)
        for k, d in enumerate(self.delay_vectors):
            arms = _admissible(d, R)
            if len(arms) == 1 and d[arms[0]] == R:
                delay_forced[k] = arms[0]
            for a in arms:
                self.delay_next[k, a] = self.delay_pos[_delay_successor(d, a)]

        codes = np.arange(self.n_obs, dtype=np.int64)
        obs_table = (codes[:, None] // self._radix[None, :]) % S
        delays = np.array(self.delay_vectors, dtype=np.int64)
        # per-state delay and observed-state vectors, shape (n_states, K)
        self.delays = np.repeat(delays, self.n_obs, axis=0)
        self.observed = np.tile(obs_table, (n_delays, 1))
        self.forced = np.repeat(delay_forced, self.n_obs)
        self.valid = np.repeat(self.delay_next >= 0, self.n_obs, axis=0)

    @property
    def K(self) -> int:
        return self.cfg.K

    @property
    def R(self) -> int:
        return self.cfg.R

    @property
    def S(self) -> int:
        return self.cfg.S

    def __len__(self) -> int:
        return self.n_states

    def index_of(self, d: Sequence[int], i: Sequence[int]) -> int:
        pos = self.delay_pos.get(tuple(int(x) for x in d))
        if pos is None:
            raise KeyError(f"delay vector {tuple(d)} is not in S_R")
        return int(pos * self.n_obs + int(np.dot(self._radix, np.asarray(i, dtype=np.int64))))

    def state(self, index: int) -> State:
        delays = tuple(int(x) for x in self.delays[index])
        return delays, tuple(int(x) for x in self.observed[index])

    def states(self) -> List[State]:
        return [self.state(s) for s in range(self.n_states)]

    def is_forced(self, index: int) -> bool:
        return bool(self.forced[index] >= 0)

    def admissible(self, index: int) -> np.ndarray:
        return np.flatnonzero(self.valid[index])

    def initial_state(self, observed: Sequence[int]) -> int:
        K = self.K
        return self.index_of(tuple(range(K, 0, -1)), observed)


def injective_delay_vectors(K: int, R: int) -> List[Tuple[int, ...]]:
    """Injections ``[K] -> {1..R}`` whose minimum is 1."""
    return [d for d in permutations(range(1, R + 1), K) if min(d) == 1]


def enumerate_states(cfg: MdpConfig) -> StateSpace:
    """Closure of the delay dynamics over every injective delay vector with minimum 1.

    For ``R > K`` everything is reachable from ``(K, ..., 1)``. For ``R = K >= 3`` every state is
    forced and the vectors split into ``(K-1)!`` closed rotation classes.
    """
    seeds = injective_delay_vectors(cfg.K, cfg.R)
    seen = set(seeds)
    queue = deque(seeds)
    while queue:
        d = queue.popleft()
        for a in _admissible(d, cfg.R):
            nxt = _delay_successor(d, a)
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    expected = count_delay_vectors(cfg.K, cfg.R)
    if len(seen) != expected:
        raise DelayCountMismatchError(
            f"closure found {len(seen)} delay vectors, expected {expected}"
        )
    space = StateSpace(cfg, list(seen))
    logger.debug(
        "state_space_enumerated",
        extra={"K": cfg.K, "R": cfg.R, "S": cfg.S, "n_states": space.n_states},
    )
    return space


def successor(space: StateSpace, s: int, a: int, j: int) -> int:
    if not 0 <= a < space.K or not space.valid[s, a]:
        raise InvalidActionError(f"arm {a} is not admissible in state {space.state(s)}")
    if not 0 <= j < space.S:
        raise ValueError(f"observed state {j} outside [0, {space.S})")
    pos, code = divmod(s, space.n_obs)
    digit = (code // int(space._radix[a])) % space.S
    code += (j - digit) * int(space._radix[a])
    return int(space.delay_next[pos, a] * space.n_obs + code)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Controlled kernel as a CSR matrix with rows ``s * K + a`` and columns ``s'``.

    Rows of inadmissible pairs are empty.
    """

    space: StateSpace
    matrix: sparse.csr_matrix

    def row(self, s: int, a: int) -> List[Tuple[int, float]]:
        r = s * self.space.K + a
        start, stop = self.matrix.indptr[r], self.matrix.indptr[r + 1]
        cols, probs = self.matrix.indices[start:stop], self.matrix.data[start:stop]
        return [(int(c), float(p)) for c, p in zip(cols, probs)]


def kernel(space: StateSpace, arms: Sequence[ArmModel]) -> Kernel:
    if len(arms) != space.K:
        raise ArmCountMismatchError(f"expected {space.K} arm models, got {len(arms)}")
    powers = np.stack(
        [np.stack([tpm_power(arm, d) for d in range(1, space.R + 1)]) for arm in arms]
    )
    return kernel_from_powers(space, powers)


def kernel_from_powers(space: StateSpace, powers: np.ndarray) -> Kernel:
    """``powers[a, d-1]`` is ``P_{theta_a}^d``."""
    K, S = space.K, space.S
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    states = np.arange(space.n_states, dtype=np.int64)
    for a in range(K):
        admissible = states[space.valid[:, a]]
        d_a = space.delays[admissible, a]
        i_a = space.observed[admissible, a]
        probs = powers[a, d_a - 1, i_a, :]
        pos = admissible // space.n_obs
        code = admissible % space.n_obs
        radix = int(space._radix[a])
        base = space.delay_next[pos, a] * space.n_obs + code - i_a * radix
        for j in range(S):
            keep = probs[:, j] > 0
            rows.append(admissible[keep] * K + a)
            cols.append(base[keep] + j * radix)
            vals.append(probs[keep, j])
    matrix = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.n_states * K, space.n_states),
    )
    matrix.sort_indices()
    return Kernel(space=space, matrix=matrix)


@dataclass(frozen=True, eq=False)
class SrsPolicy:
    probs: np.ndarray


def uniform_policy(space: StateSpace) -> SrsPolicy:
    valid = space.valid.astype(float)
    return SrsPolicy(probs=valid / valid.sum(axis=1, keepdims=True))


def deterministic_policy(space: StateSpace, actions: Sequence[int]) -> SrsPolicy:
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (space.n_states,):
        raise ValueError(f"need one action per state, got shape {actions.shape}")
    if not space.valid[np.arange(space.n_states), actions].all():
        raise InvalidActionError("deterministic policy selects an inadmissible arm")
    probs = np.zeros((space.n_states, space.K))
    probs[np.arange(space.n_states), actions] = 1.0
    return SrsPolicy(probs=probs)


def policy_from_occupancy(space: StateSpace, nu: np.ndarray) -> SrsPolicy:
    """Conditional ``nu(a | s)``; states without mass fall back to uniform."""
    uniform = uniform_policy(space).probs
    mass = nu.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        probs = np.where(mass > 0, nu / np.where(mass > 0, mass, 1.0), uniform)
    return SrsPolicy(probs=probs)


def check_policy(space: StateSpace, pol: SrsPolicy, tol: float = 1e-10) -> None:
    probs = pol.probs
    if probs.shape != (space.n_states, space.K):
        raise ValueError(f"policy shape {probs.shape} does not match ({space.n_states}, {space.K})")
    if (probs < -tol).any() or not np.allclose(probs.sum(axis=1), 1.0, atol=tol):
        raise ValueError("policy rows must be probability vectors")
    if np.abs(probs[~space.valid]).max(initial=0.0) > tol:
        raise InvalidActionError("policy puts mass on inadmissible arms")


@dataclass(frozen=True, eq=False)
class Occupancy:
    """Mass over (state, arm) pairs stored as an (n_states, K) array."""

    nu: np.ndarray

    @property
    def state_marginal(self) -> np.ndarray:
        return self.nu.sum(axis=1)

    def total(self) -> float:
        return float(self.nu.sum())

    def sparse_triples(self, eps: float = 0.0) -> List[Tuple[int, int, float]]:
        states, arms = np.nonzero(np.abs(self.nu) > eps)
        return [(int(s), int(a), float(self.nu[s, a])) for s, a in zip(states, arms)]


def state_chain(kern: Kernel, pol: SrsPolicy) -> sparse.csr_matrix:
    K = kern.space.K
    weighted = sparse.diags(pol.probs.ravel()) @ kern.matrix
    identity = sparse.identity(kern.space.n_states, format="csr")
    collapse = sparse.kron(identity, np.ones((1, K)), format="csr")
    return (collapse @ weighted).tocsr()


def stationary_occupancy(kern: Kernel, pol: SrsPolicy) -> Occupancy:
    """Stationary state-action distribution of the chain induced by ``pol``.

    Power iteration runs on the lazy chain ``(P + I) / 2`` which has the same stationary
    distributions and is aperiodic, so forced round-robin cycles converge too.
    """
    space = kern.space
    check_policy(space, pol)
    chain = state_chain(kern, pol)
    lazy_t = (0.5 * (chain + sparse.identity(space.n_states, format="csr"))).T.tocsr()
    mu = np.full(space.n_states, 1.0 / space.n_states)
    converged = False
    for _ in range(OCCUPANCY_MAX_SWEEPS):
        nxt = lazy_t @ mu
        if np.abs(nxt - mu).max() <= OCCUPANCY_TOL:
            mu = nxt
            converged = True
            break
        mu = nxt
    if not converged:
        logger.warning("occupancy_power_iteration_stalled", extra={"n_states": space.n_states})
        mu = _direct_stationary(chain)
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()
    residual = np.abs(chain.T @ mu - mu).max()
    if residual > 1e-8:
        raise NonErgodicPolicyError(f"stationary residual {residual:.3e} did not shrink")
    return Occupancy(nu=mu[:, None] * pol.probs)


def _direct_stationary(chain: sparse.csr_matrix) -> np.ndarray:
    n = chain.shape[0]
    system = np.vstack([chain.T.toarray() - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    mu, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    misfit = float(np.abs(system @ mu - rhs).max())
    if misfit > 1e-8:
        raise OccupancyNoConvergenceError(f"direct stationary solve left residual {misfit:.3e}")
    if (mu < -1e-8).any():
        raise NonErgodicPolicyError("direct stationary solve produced negative mass")
    return mu


@dataclass(frozen=True)
class OccupancyReport:
    flow_residual: float
    delay_violation: float
    invalid_mass: float
    negative_mass: float
    total_mass: float
    tol: float

    @property
    def passed(self) -> bool:
        return (
            self.flow_residual <= self.tol
            and self.delay_violation <= self.tol
            and self.invalid_mass <= self.tol
            and self.negative_mass <= self.tol
            and abs(self.total_mass - 1.0) <= self.tol
        )

    @property
    def mass_on_invalid(self) -> bool:
        return self.invalid_mass > self.tol


def flow_residuals(kern: Kernel, nu: np.ndarray) -> np.ndarray:
    inflow = kern.matrix.T @ nu.ravel()
    return nu.sum(axis=1) - inflow


def check_occupancy(space: StateSpace, kern: Kernel, nu: Occupancy, tol: float) -> OccupancyReport:
    weights = nu.nu
    forced_states = np.flatnonzero(space.forced >= 0)
    forced_arms = space.forced[forced_states]
    delay_violation = float(
        np.abs(weights[forced_states, forced_arms] - weights[forced_states].sum(axis=1)).max(
            initial=0.0
        )
    )
    return OccupancyReport(
        flow_residual=float(np.abs(flow_residuals(kern, weights)).max()),
        delay_violation=delay_violation,
        invalid_mass=float(np.abs(weights[~space.valid]).sum()),
        negative_mass=float(-weights[weights < 0].sum()),
        total_mass=float(weights.sum()),
        tol=tol,
    )


def is_communicating(kern: Kernel) -> bool:
    space = kern.space
    support = kern.matrix.copy()
    support.data = np.ones_like(support.data)
    identity = sparse.identity(space.n_states, format="csr")
    collapse = sparse.kron(identity, np.ones((1, space.K)), format="csr")
    adjacency = (collapse @ support).tocsr()
    n_components, _ = csgraph.connected_components(adjacency, directed=True, connection="strong")
    return bool(n_components == 1)


def embed_occupancy(nu: Occupancy, space: StateSpace, larger: StateSpace) -> Occupancy:
    """Zero-pad an occupancy on ``S_R`` into ``S_{R'}`` for ``R' >= R`` (same K and S)."""
    if (space.K, space.S) != (larger.K, larger.S) or larger.R < space.R:
        raise ValueError("target space must share K and S and have a larger max delay")
    out = np.zeros((larger.n_states, larger.K))
    for s in range(space.n_states):
        d, i = space.state(s)
        out[larger.index_of(d, i)] = nu.nu[s]
    return Occupancy(nu=out)
