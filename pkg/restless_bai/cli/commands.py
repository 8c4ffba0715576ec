from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List

import numpy as np

from restless_bai.infra.logging import get_logger
from restless_bai.infra.metrics import Metrics
from restless_bai.model.exp_family import kl_rate, log_partition, mean_of, perron
from restless_bai.oracle.lower_bound import LowerBoundResult, t_star, t_unif
from restless_bai.sim.runner import RunStats, run_batch

from .config import SCHEMA_VERSION, ExperimentConfig
from .validate import run_suite

logger = get_logger(__name__)

FAMILY_COLUMNS = ("theta", "rho", "eta", "kl_rate_from_zero")
TRIAL_COLUMNS = ("trial", "seed", "tau", "recommended", "correct", "censored")


@dataclass(slots=True)
class CommandResult:
    exit_code: int = 0
    files: List[Path] = field(default_factory=list)
    text: str = ""


class _Outputs:
    def __init__(self, directory: Path):
        self.directory = directory
        self.files: List[Path] = []

    def path(self, name: str) -> Path:
        target = self.directory / name
        self.files.append(target)
        return target


@contextmanager
def _outputs(directory: Path) -> Iterator[_Outputs]:
    """Track files written by a command; remove them again if the command fails."""
    directory.mkdir(parents=True, exist_ok=True)
    outputs = _Outputs(directory)
    try:
        yield outputs
    except BaseException:
        for target in outputs.files:
            target.unlink(missing_ok=True)
        logger.error("partial_outputs_removed", extra={"files": [str(p) for p in outputs.files]})
        raise


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _bound_payload(result: LowerBoundResult, unif: float) -> Dict[str, Any]:
    return {
        "t_star": result.t_star,
        "t_unif": unif,
        "fw_gap": result.fw_gap,
        "iterations": result.iterations,
        "converged": result.converged,
        "upper_bound": result.upper_bound,
    }


def family_rows(cfg: ExperimentConfig) -> List[Dict[str, float]]:
    gen = cfg.generator_model()
    lo, hi = cfg.theta_interval
    thetas = np.linspace(lo, hi, cfg.family_points)
    if lo <= 0.0 <= hi:
        thetas = np.union1d(thetas, [0.0])
    rows = []
    for theta in thetas:
        theta = float(theta)
        rows.append(
            {
                "theta": theta,
                "rho": perron(gen, theta).rho,
                "eta": mean_of(gen, theta),
                "kl_rate_from_zero": kl_rate(gen, theta, 0.0),
            }
        )
    return rows


def cmd_family(cfg: ExperimentConfig, output_dir: Path) -> CommandResult:
    rows = family_rows(cfg)
    with _outputs(output_dir) as out:
        path = out.path("family.csv")
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=FAMILY_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(float(v)) for k, v in row.items()})
    gen = cfg.generator_model()
    logger.info(
        "family_written",
        extra={"rows": len(rows), "log_partition_at_max": log_partition(gen, gen.theta_max)},
    )
    return CommandResult(files=out.files, text=f"wrote {len(rows)} rows to {path}")


def cmd_lower_bound(cfg: ExperimentConfig, output_dir: Path, metrics: Metrics) -> CommandResult:
    inst = cfg.instance()
    with metrics.solve_timer():
        result = t_star(inst, cfg.solver)
    metrics.inc_solve("t_star")
    unif = t_unif(inst)
    metrics.inc_solve("unif")
    payload: Dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    payload.update(_bound_payload(result, unif))
    payload["nu_star"] = [[s, a, v] for s, a, v in result.nu_star.sparse_triples()]
    payload["config"] = cfg.model_dump(mode="json")
    with _outputs(output_dir) as out:
        _write_json(out.path("bound.json"), payload)
        written = metrics.write(output_dir)
        if written is not None:
            out.files.append(written)
    return CommandResult(
        files=out.files,
        text=f"t_star={result.t_star:.6g} t_unif={unif:.6g} fw_gap={result.fw_gap:.3g}",
    )


def _trial_row(record: Any) -> Dict[str, Any]:
    return {
        "trial": record.trial,
        "seed": record.seed,
        "tau": "" if record.tau is None else record.tau,
        "recommended": "" if record.recommended is None else record.recommended,
        "correct": "" if record.correct is None else int(record.correct),
        "censored": int(record.censored),
    }


def write_trials_csv(path: Path, stats: RunStats) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=TRIAL_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for record in stats.records:
            writer.writerow(_trial_row(record))


def cmd_simulate(
    cfg: ExperimentConfig, output_dir: Path, metrics: Metrics, parallel: int = 1
) -> CommandResult:
    inst = cfg.instance()
    with metrics.solve_timer():
        bound = t_star(inst, cfg.solver)
    metrics.inc_solve("t_star")
    unif = t_unif(inst)
    metrics.inc_solve("unif")
    stats = run_batch(
        inst,
        inst.space,
        cfg.policy_config(),
        trials=cfg.trials,
        master_seed=cfg.master_seed,
        parallelism=parallel,
        checkpoints=cfg.checkpoints,
        metrics=metrics,
    ).with_bounds(bound.t_star, unif)

    summary: Dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    summary.update(stats.summary())
    summary.update(
        {
            "t_star": bound.t_star,
            "t_unif": unif,
            "denominator": stats.bound_denominator,
            "config": cfg.model_dump(mode="json"),
        }
    )
    with _outputs(output_dir) as out:
        write_trials_csv(out.path("trials.csv"), stats)
        _write_json(out.path("summary.json"), summary)
        written = metrics.write(output_dir)
        if written is not None:
            out.files.append(written)
    return CommandResult(
        files=out.files,
        text=(
            f"trials={stats.trials} errors={stats.error_count} censored={stats.censored_count} "
            f"mean_tau={stats.mean_tau}"
        ),
    )


def cmd_validate(cfg: ExperimentConfig) -> CommandResult:
    results = run_suite(cfg)
    width = max(len(r.name) for r in results)
    lines = [f"{'invariant'.ljust(width)}  status  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("invariant_suite_failed", extra={"failed": failed})
    return CommandResult(exit_code=3 if failed else 0, text="\n".join(lines))
