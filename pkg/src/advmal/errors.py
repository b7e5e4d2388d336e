"""Exception hierarchy. The CLI maps each family to an exit code."""


class AdvmalError(Exception):
    exit_code = 3


class ConfigError(AdvmalError, ValueError):
    exit_code = 1


class DataError(AdvmalError, ValueError):
    exit_code = 2


class TrainingError(AdvmalError, RuntimeError):
    exit_code = 3


class AttackError(AdvmalError, RuntimeError):
    exit_code = 3
