from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
import pytest

from restless_bai.model.exp_family import ExpFamily, Generator
from restless_bai.model.instance import Instance
from restless_bai.model.mdp import MdpConfig, StateSpace, enumerate_states

# logit(0.65): arm means 0.35 / 0.65 under the i.i.d. generator
GAP_03_THETA = math.log(0.65 / 0.35)


@pytest.fixture
def iid_gen() -> Generator:
    return Generator(
        P=np.array([[0.5, 0.5], [0.5, 0.5]]), f=np.array([0.0, 1.0]), theta_interval=(-2.0, 2.0)
    )


@pytest.fixture
def sticky_gen() -> Generator:
    return Generator(
        P=np.array([[0.9, 0.1], [0.2, 0.8]]), f=np.array([0.0, 1.0]), theta_interval=(-1.0, 1.0)
    )


@pytest.fixture
def symmetric_gen() -> Generator:
    return Generator(
        P=np.array([[0.7, 0.3], [0.3, 0.7]]), f=np.array([0.0, 1.0]), theta_interval=(-1.0, 1.0)
    )


@pytest.fixture
def make_space() -> Callable[[int, int, int], StateSpace]:
    def build(K: int, R: int, S: int = 2) -> StateSpace:
        return enumerate_states(MdpConfig(K=K, R=R, S=S))

    return build


@pytest.fixture
def make_instance() -> Callable[..., Instance]:
    def build(gen: Generator, theta: Any, R: int) -> Instance:
        K = len(theta)
        space = enumerate_states(MdpConfig(K=K, R=R, S=gen.S))
        return Instance(ExpFamily(gen, max_delay=R), space, theta)

    return build


@pytest.fixture
def forced_instance(iid_gen: Generator, make_instance: Callable[..., Instance]) -> Instance:
    """K=2, R=2: every state is forced, the arms alternate."""
    return make_instance(iid_gen, [-GAP_03_THETA, GAP_03_THETA], 2)


@pytest.fixture
def sticky_instance(sticky_gen: Generator, make_instance: Callable[..., Instance]) -> Instance:
    return make_instance(sticky_gen, [-0.3, 0.4], 3)


def random_instance(rng: np.random.Generator, R: int) -> Instance:
    while True:
        a, b = rng.uniform(0.15, 0.85, size=2)
        gen = Generator(
            P=np.array([[a, 1.0 - a], [b, 1.0 - b]]),
            f=np.array([0.0, 1.0]),
            theta_interval=(-1.0, 1.0),
        )
        family = ExpFamily(gen, max_delay=R)
        theta = np.sort(rng.uniform(-0.9, 0.9, size=2))
        etas = family.etas(theta)
        if etas[1] - etas[0] > 0.05:
            space = enumerate_states(MdpConfig(K=2, R=R, S=2))
            return Instance(family, space, theta[rng.permutation(2)])


def base_config(**overrides: Any) -> Dict[str, Any]:
    payload: Dict[str, Any] = {
        "states": 2,
        "generator": [[0.5, 0.5], [0.5, 0.5]],
        "f": [0.0, 1.0],
        "theta_interval": [-2.0, 2.0],
        "theta": [-GAP_03_THETA, GAP_03_THETA],
        "R": 2,
        "delta": 0.1,
    }
    payload.update(overrides)
    return payload


@pytest.fixture
def write_config(tmp_path: Path) -> Callable[..., Path]:
    def write(name: str = "config.json", **overrides: Any) -> Path:
        path = tmp_path / name
        path.write_text(json.dumps(base_config(**overrides)), encoding="utf-8")
        return path

    return write
