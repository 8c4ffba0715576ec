from __future__ import annotations

from functools import cached_property
from typing import List, Sequence

import numpy as np

from restless_bai.errors import ConfigError

from .exp_family import ArmModel, ExpFamily
from .mdp import Kernel, StateSpace, kernel_from_powers

BEST_ARM_TOL = 1e-12


class NonUniqueBestArmError(ConfigError):
    pass


def best_arm(etas: Sequence[float], strict: bool = True) -> int:
    """Index of the largest mean; ``strict`` rejects ties within BEST_ARM_TOL.

    Without ``strict`` the smallest index among the maximizers wins.
    """
    etas = np.asarray(etas, dtype=float)
    top = float(etas.max())
    leaders = np.flatnonzero(etas >= top - BEST_ARM_TOL)
    if strict and len(leaders) > 1:
        raise NonUniqueBestArmError(f"arms {leaders.tolist()} tie for the best mean {top:.12g}")
    return int(leaders[0])


class Instance:
    """A parameter vector over a shared family, realized on a state space.

    Used both for the true instance driving a simulation and for plug-in estimates inside the
    policy (``strict=False`` lets estimated means tie).
    """

    def __init__(
        self,
        family: ExpFamily,
        space: StateSpace,
        theta: Sequence[float],
        strict: bool = True,
    ):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (space.K,):
            raise ConfigError(f"theta must have {space.K} entries, got shape {theta.shape}")
        if space.S != family.S:
            raise ConfigError(f"state space has S={space.S} but the generator has {family.S}")
        if family.max_delay < space.R:
            family = family.with_max_delay(space.R)
        self.family = family
        self.space = space
        self.theta = theta
        self.theta.setflags(write=False)
        self._strict = strict

    @property
    def K(self) -> int:
        return self.space.K

    @cached_property
    def arms(self) -> List[ArmModel]:
        return [self.family.model(float(t)) for t in self.theta]

    @cached_property
    def etas(self) -> np.ndarray:
        return np.array([arm.eta_theta for arm in self.arms])

    @cached_property
    def best(self) -> int:
        return best_arm(self.etas, strict=self._strict)

    @cached_property
    def powers(self) -> np.ndarray:
        """``powers[a, d-1] = P_{theta_a}^d`` for d = 1..R."""
        R = self.space.R
        return np.stack([self.family.powers(float(t))[1 : R + 1] for t in self.theta])

    @cached_property
    def kernel(self) -> Kernel:
        return kernel_from_powers(self.space, self.powers)

    def materialize(self) -> "Instance":
        """Fill every lazy attribute so the instance can be shared read-only between threads."""
        _ = (self.arms, self.etas, self.best, self.kernel)
        return self
