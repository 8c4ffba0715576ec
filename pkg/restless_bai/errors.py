from __future__ import annotations


class RestlessBaiError(Exception):
    """Base error; `exit_code` is what the CLI returns when it escapes a subcommand."""

    exit_code = 2


class ConfigError(RestlessBaiError, ValueError):
    exit_code = 1


class NumericalError(RestlessBaiError, ArithmeticError):
    exit_code = 2


class InvariantError(RestlessBaiError):
    exit_code = 3
