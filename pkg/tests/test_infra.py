from __future__ import annotations

import json
import logging

import numpy as np
import pytest
from pydantic import ValidationError

from restless_bai.infra.logging import JsonLogFormatter
from restless_bai.infra.metrics import Metrics
from restless_bai.infra.settings import LogLevel, Settings


@pytest.fixture
def clean_env(monkeypatch):
    for name in (
        "RESTLESS_BAI_LOG",
        "RESTLESS_BAI_METRICS",
        "RESTLESS_BAI_METRICS_FILE",
        "RESTLESS_BAI_OUTPUT_DIR",
    ):
        monkeypatch.delenv(name, raising=False)
    return monkeypatch


def test_settings_defaults(clean_env):
    settings = Settings(_env_file=None)
    assert settings.log_level is LogLevel.INFO
    assert settings.metrics_enabled is True
    assert settings.metrics_file == "metrics.prom"


def test_settings_read_environment(clean_env):
    clean_env.setenv("RESTLESS_BAI_LOG", "DEBUG")
    clean_env.setenv("RESTLESS_BAI_METRICS", "false")
    settings = Settings(_env_file=None)
    assert settings.log_level is LogLevel.DEBUG
    assert settings.metrics_enabled is False


@pytest.mark.parametrize(
    ("name", "value"),
    [("RESTLESS_BAI_LOG", "verbose"), ("RESTLESS_BAI_METRICS_FILE", "a/b.prom")],
)
def test_settings_reject_bad_values(clean_env, name, value):
    clean_env.setenv(name, value)
    with pytest.raises(ValidationError):
        Settings(_env_file=None)


def test_json_formatter_flattens_extra_fields():
    record = logging.makeLogRecord(
        {
            "name": "restless_bai.test",
            "levelname": "INFO",
            "msg": "fw_converged",
            "t_star": np.float64(0.25),
            "theta_hat": np.array([0.1, -0.2]),
        }
    )
    payload = json.loads(JsonLogFormatter().format(record))
    assert payload["msg"] == "fw_converged"
    assert payload["level"] == "INFO"
    assert payload["t_star"] == 0.25
    assert payload["theta_hat"] == [0.1, -0.2]


def test_metrics_export_and_write(clean_env, tmp_path):
    metrics = Metrics(Settings(_env_file=None))
    metrics.inc_trial("correct")
    metrics.inc_trial("correct")
    metrics.inc_solve("t_star")
    metrics.observe_stopping_time(1200)
    with metrics.solve_timer():
        pass
    text = metrics.export().decode()
    assert 'trials_total{outcome="correct"} 2.0' in text
    assert 'oracle_solves_total{kind="t_star"} 1.0' in text
    assert "stopping_time_steps_count 1.0" in text
    assert "oracle_solve_seconds_count 1.0" in text
    path = metrics.write(tmp_path)
    assert path == tmp_path / "metrics.prom"
    assert path.read_text().startswith("#")


def test_disabled_metrics_write_nothing(clean_env, tmp_path):
    clean_env.setenv("RESTLESS_BAI_METRICS", "0")
    metrics = Metrics(Settings(_env_file=None))
    metrics.inc_trial("wrong")
    assert not metrics.enabled
    assert metrics.write(tmp_path) is None
    assert list(tmp_path.iterdir()) == []
