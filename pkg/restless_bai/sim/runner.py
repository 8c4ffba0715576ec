from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from restless_bai.infra.logging import get_logger
from restless_bai.infra.metrics import Metrics
from restless_bai.model.instance import Instance
from restless_bai.model.mdp import StateSpace, successor
from restless_bai.policy.rstl_dtrack import MaxStepsExceededError, PolicyConfig, RstlDtrack, Stop

from .audit import Trajectory
from .seeding import Stream, stream_rng, trial_seed

logger = get_logger(__name__)


class HiddenChains:
    """The K restless arms; every chain moves one step per tick whether it is pulled or not."""

    def __init__(self, inst: Instance, rng: np.random.Generator):
        self._rng = rng
        self._cum = np.cumsum(np.stack([arm.P_theta for arm in inst.arms]), axis=-1)
        self._rows = np.arange(inst.K)
        self._last = inst.family.S - 1
        self.states = np.array(
            [self._draw(np.cumsum(arm.mu_theta), rng.random()) for arm in inst.arms], dtype=np.int64
        )

    def _draw(self, cum: np.ndarray, u: float) -> int:
        return min(int(np.searchsorted(cum, u, side="right")), self._last)

    def observe(self, arm: int) -> int:
        return int(self.states[arm])

    def advance(self) -> None:
        u = self._rng.random(len(self.states))
        cum = self._cum[self._rows, self.states]
        self.states = np.minimum((cum <= u[:, None]).sum(axis=1), self._last)


@dataclass(slots=True)
class TrialRecord:
    trial: int
    seed: int
    tau: Optional[int]
    recommended: Optional[int]
    correct: Optional[bool]
    censored: bool
    steps: int
    snapshots: Dict[int, np.ndarray] = field(default_factory=dict)
    trajectory: Optional[Trajectory] = None

    def outcome(self) -> str:
        if self.censored:
            return "censored"
        return "correct" if self.correct else "wrong"


@dataclass(frozen=True, slots=True)
class RunStats:
    trials: int
    error_count: int
    error_rate: float
    censored_count: int
    mean_tau: Optional[float]
    tau_over_log_inv_delta: Optional[float]
    delta: float
    eta: float
    bound_denominator: Optional[float] = None
    ratio: Optional[float] = None
    records: tuple[TrialRecord, ...] = ()

    def with_bounds(self, t_star: float, t_unif: float) -> "RunStats":
        denominator = self.eta * t_unif + (1.0 - self.eta) * t_star
        ratio = None
        if self.mean_tau is not None:
            ratio = self.mean_tau * denominator / math.log(1.0 / self.delta)
        return replace(self, bound_denominator=denominator, ratio=ratio)

    def summary(self) -> Dict[str, object]:
        return {
            "trials": self.trials,
            "error_count": self.error_count,
            "error_rate": self.error_rate,
            "censored_count": self.censored_count,
            "mean_tau": self.mean_tau,
            "tau_over_log_inv_delta": self.tau_over_log_inv_delta,
            "bound_denominator": self.bound_denominator,
            "ratio": self.ratio,
        }


def run_trial(
    inst: Instance,
    space: StateSpace,
    cfg: PolicyConfig,
    seed: int,
    trial: int = 0,
    record: bool = False,
    checkpoints: Sequence[int] = (),
) -> TrialRecord:
    chains = HiddenChains(inst, stream_rng(seed, Stream.ARM_NOISE))
    rng = stream_rng(seed, Stream.POLICY)
    tie_rng = stream_rng(seed, Stream.TIE_BREAK)
    policy = RstlDtrack(space, inst.family, cfg)
    trajectory = Trajectory(n_states=space.n_states, K=space.K) if record else None
    marks = set(int(n) for n in checkpoints)
    snapshots: Dict[int, np.ndarray] = {}

    action = policy.first_action()
    tau: Optional[int] = None
    recommended: Optional[int] = None
    censored = False
    try:
        while True:
            j = chains.observe(action)
            chains.advance()
            before = policy.state
            policy.observe(action, j)
            if trajectory is not None and before is not None:
                assert policy.state is not None
                trajectory.append(before, action, policy.state)
            if policy.n in marks:
                snapshots[policy.n] = policy.visitation()
            decision = policy.step(rng, tie_rng)
            if isinstance(decision, Stop):
                tau, recommended = decision.tau, decision.recommended
                break
            action = decision.action
    except MaxStepsExceededError:
        censored = True

    if trajectory is not None:
        trajectory.counts = policy.counts.copy()
    correct = None if censored else recommended == inst.best
    logger.debug(
        "trial_finished",
        extra={"trial": trial, "seed": seed, "tau": tau, "censored": censored, "correct": correct},
    )
    return TrialRecord(
        trial=trial,
        seed=seed,
        tau=tau,
        recommended=recommended,
        correct=correct,
        censored=censored,
        steps=policy.n + 1,
        snapshots=snapshots,
        trajectory=trajectory,
    )


def summarize(records: Sequence[TrialRecord], cfg: PolicyConfig) -> RunStats:
    finished = [r for r in records if not r.censored]
    errors = sum(1 for r in finished if not r.correct)
    mean_tau = float(np.mean([r.tau for r in finished])) if finished else None
    return RunStats(
        trials=len(records),
        error_count=errors,
        error_rate=errors / len(finished) if finished else 0.0,
        censored_count=len(records) - len(finished),
        mean_tau=mean_tau,
        tau_over_log_inv_delta=None if mean_tau is None else mean_tau / math.log(1.0 / cfg.delta),
        delta=cfg.delta,
        eta=cfg.eta,
        records=tuple(records),
    )


def run_batch(
    inst: Instance,
    space: StateSpace,
    cfg: PolicyConfig,
    trials: int,
    master_seed: int,
    parallelism: int = 1,
    checkpoints: Sequence[int] = (),
    record: bool = False,
    metrics: Optional[Metrics] = None,
) -> RunStats:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    inst.materialize()

    def one(index: int) -> TrialRecord:
        return run_trial(
            inst,
            space,
            cfg,
            trial_seed(master_seed, index),
            trial=index,
            record=record,
            checkpoints=checkpoints,
        )

    if parallelism <= 1:
        records = [one(i) for i in range(trials)]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(one, range(trials)))
    records.sort(key=lambda r: r.trial)

    if metrics is not None:
        for r in records:
            metrics.inc_trial(r.outcome())
            if r.tau is not None:
                metrics.observe_stopping_time(r.tau)

    stats = summarize(records, cfg)
    logger.info(
        "batch_finished",
        extra={
            "trials": stats.trials,
            "error_rate": stats.error_rate,
            "censored": stats.censored_count,
            "mean_tau": stats.mean_tau,
            "parallelism": parallelism,
        },
    )
    return stats


def uniform_frequencies(inst: Instance, space: StateSpace, steps: int, seed: int) -> np.ndarray:
    """Empirical state-action frequencies of the uniform policy over ``steps`` MDP steps."""
    chains = HiddenChains(inst, stream_rng(seed, Stream.ARM_NOISE))
    rng = stream_rng(seed, Stream.POLICY)
    first: List[int] = []
    for arm in range(space.K):
        first.append(chains.observe(arm))
        chains.advance()
    s = space.initial_state(first)
    counts = np.zeros((space.n_states, space.K), dtype=np.int64)
    for _ in range(steps):
        arms = space.admissible(s)
        a = int(arms[0]) if len(arms) == 1 else int(rng.choice(arms))
        j = chains.observe(a)
        chains.advance()
        counts[s, a] += 1
        s = successor(space, s, a, j)
    return counts / steps


def visitation_distance(snapshot: np.ndarray, target: np.ndarray) -> float:
    return float(np.abs(snapshot - target).max())
