from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from restless_bai.errors import InvariantError
from restless_bai.infra.logging import get_logger
from restless_bai.model.mdp import Kernel

logger = get_logger(__name__)


class AuditFailureError(InvariantError):
    pass


@dataclass(slots=True)
class Trajectory:
    """MDP part of a trial: one (state, action, next_state) row per step after the warm-up.

    ``counts`` is the policy's own N(n, s, a) table at the end of the trial.
    """

    n_states: int
    K: int
    steps: List[tuple[int, int, int]] = field(default_factory=list)
    counts: Optional[np.ndarray] = None

    def append(self, state: int, action: int, next_state: int) -> None:
        self.steps.append((state, action, next_state))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.steps, dtype=np.int64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True, slots=True)
class FlowAuditReport:
    steps: int
    checkpoints: tuple[int, ...]
    max_identity_error: int
    chain_breaks: int
    counts_match: Optional[bool]

    @property
    def passed(self) -> bool:
        clean = self.max_identity_error == 0 and self.chain_breaks == 0
        return clean and self.counts_match is not False


def flow_audit(trajectory: Trajectory, checkpoints: Sequence[int] | None = None) -> FlowAuditReport:
    """Check ``N(m, s') = 1{s_0 = s'} + #{t < m : next_t = s'}`` for every state and checkpoint.

    ``m`` counts steps from the first MDP step; N(m, s') counts visits at steps 0..m.
    """
    rows = trajectory.as_array()
    T = len(rows)
    if T == 0:
        raise AuditFailureError("trajectory is empty")
    states, actions, nexts = rows[:, 0], rows[:, 1], rows[:, 2]
    chain_breaks = int(np.count_nonzero(states[1:] != nexts[:-1]))
    if checkpoints is None:
        checkpoints = sorted({0, T // 4, T // 2, (3 * T) // 4, T - 1})
    checkpoints = tuple(int(m) for m in checkpoints if 0 <= m < T)

    worst = 0
    for m in checkpoints:
        visits = np.bincount(states[: m + 1], minlength=trajectory.n_states)
        inflow = np.bincount(nexts[:m], minlength=trajectory.n_states)
        inflow[states[0]] += 1
        worst = max(worst, int(np.abs(visits - inflow).max()))

    counts_match: Optional[bool] = None
    if trajectory.counts is not None:
        rebuilt = np.zeros((trajectory.n_states, trajectory.K), dtype=np.int64)
        np.add.at(rebuilt, (states, actions), 1)
        counts_match = bool(np.array_equal(rebuilt, trajectory.counts))

    report = FlowAuditReport(
        steps=T,
        checkpoints=checkpoints,
        max_identity_error=worst,
        chain_breaks=chain_breaks,
        counts_match=counts_match,
    )
    if not report.passed:
        logger.error(
            "flow_audit_failed",
            extra={
                "identity_error": worst,
                "chain_breaks": chain_breaks,
                "counts_match": counts_match,
            },
        )
        raise AuditFailureError(f"trajectory flow identity violated: {report}")
    return report


@dataclass(frozen=True, slots=True)
class FlowResidualReport:
    trajectories: int
    max_abs_residual: float
    std_error: float
    bound: float

    @property
    def passed(self) -> bool:
        return self.max_abs_residual <= self.bound


def mean_flow_residual(
    trajectories: Sequence[Trajectory], kern: Kernel, steps: int, sigmas: float = 3.0
) -> FlowResidualReport:
    """Average of ``N(m, s') - sum_{s,a} N(m, s, a) Q(s' | s, a)`` over trajectories at step ``m``.

    Its expectation is within 1 of 0 in every state; the bound adds ``sigmas`` standard errors.
    """
    if not trajectories:
        raise ValueError("need at least one trajectory")
    space = kern.space
    residuals = []
    for traj in trajectories:
        rows = traj.as_array()[:steps]
        visits = np.bincount(rows[:, 0], minlength=space.n_states).astype(float)
        pairs = np.zeros(space.n_states * space.K)
        np.add.at(pairs, rows[:, 0] * space.K + rows[:, 1], 1.0)
        residuals.append(visits - kern.matrix.T @ pairs)
    stacked = np.vstack(residuals)
    mean = stacked.mean(axis=0)
    if len(trajectories) > 1:
        std_error = stacked.std(axis=0, ddof=1) / np.sqrt(len(trajectories))
    else:
        std_error = np.zeros_like(mean)
    worst = int(np.argmax(np.abs(mean)))
    return FlowResidualReport(
        trajectories=len(trajectories),
        max_abs_residual=float(np.abs(mean[worst])),
        std_error=float(std_error[worst]),
        bound=1.0 + sigmas * float(std_error.max()),
    )
