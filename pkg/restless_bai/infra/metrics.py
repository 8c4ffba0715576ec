from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from time import perf_counter
from typing import Iterator

from prometheus_client import CollectorRegistry, Counter, Histogram, generate_latest

from .settings import Settings, get_settings


@dataclass(slots=True)
class MetricHandles:
    trials_total: Counter | None = None
    oracle_solves_total: Counter | None = None
    errors_total: Counter | None = None
    stopping_time: Histogram | None = None
    solve_seconds: Histogram | None = None


class Metrics:
    def __init__(self, settings: Settings):
        self._settings = settings
        self._enabled = settings.metrics_enabled
        self._registry = CollectorRegistry(auto_describe=True)
        self._handles = MetricHandles()
        if self._enabled:
            self._init_metrics()

    def _init_metrics(self) -> None:
        self._handles.trials_total = Counter(
            "trials_total",
            "Finished Monte Carlo trials by outcome",
            labelnames=("outcome",),
            registry=self._registry,
        )
        self._handles.oracle_solves_total = Counter(
            "oracle_solves_total",
            "Lower-bound and uniform-occupancy solves",
            labelnames=("kind",),
            registry=self._registry,
        )
        self._handles.errors_total = Counter(
            "errors_total",
            "Total number of errors by stage",
            labelnames=("stage",),
            registry=self._registry,
        )
        self._handles.stopping_time = Histogram(
            "stopping_time_steps",
            "Stopping time of non-censored trials",
            registry=self._registry,
            buckets=(100, 300, 1_000, 3_000, 10_000, 30_000, 100_000, 300_000, 1_000_000),
        )
        self._handles.solve_seconds = Histogram(
            "oracle_solve_seconds",
            "Wall time of lower-bound solves",
            registry=self._registry,
            unit="seconds",
            buckets=(0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 30.0),
        )

    @property
    def enabled(self) -> bool:
        return self._enabled

    @property
    def registry(self) -> CollectorRegistry:
        return self._registry

    def inc_trial(self, outcome: str) -> None:
        if self._handles.trials_total:
            self._handles.trials_total.labels(outcome=outcome).inc()

    def inc_solve(self, kind: str) -> None:
        if self._handles.oracle_solves_total:
            self._handles.oracle_solves_total.labels(kind=kind).inc()

    def inc_error(self, stage: str) -> None:
        if self._handles.errors_total:
            self._handles.errors_total.labels(stage=stage).inc()

    def observe_stopping_time(self, tau: int) -> None:
        if self._handles.stopping_time:
            self._handles.stopping_time.observe(tau)

    @contextmanager
    def solve_timer(self) -> Iterator[None]:
        start = perf_counter()
        try:
            yield
        finally:
            if self._handles.solve_seconds:
                self._handles.solve_seconds.observe(perf_counter() - start)

    def export(self) -> bytes:
        return generate_latest(self._registry)

    def write(self, output_dir: Path) -> Path | None:
        if not self._enabled:
            return None
        path = output_dir / self._settings.metrics_file
        path.write_bytes(self.export())
        return path


_metrics: Metrics | None = None


def get_metrics(settings: Settings | None = None) -> Metrics:
    global _metrics
    if _metrics:
        return _metrics
    settings = settings or get_settings()
    _metrics = Metrics(settings)
    return _metrics
