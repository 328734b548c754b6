"""Exception hierarchy. Every error carries a stable category string used by
the CLI for exit codes and by error reports."""


class TwinpressError(Exception):
    category = "internal"


class ShapeError(TwinpressError):
    category = "shape"


class NumericalError(TwinpressError):
    category = "numerical"


class RankError(TwinpressError):
    category = "rank"


class PlanError(TwinpressError):
    category = "plan"


class TrainingError(TwinpressError):
    category = "training"


class AssemblyError(TwinpressError):
    category = "assembly"


class FormatError(TwinpressError):
    category = "format"


class ConfigError(TwinpressError):
    category = "config"


class InputError(TwinpressError):
    category = "input"


EXIT_CODES = {
    "config": 2,
    "input": 3,
    "plan": 4,
    "rank": 4,
    "shape": 5,
    "numerical": 6,
    "training": 7,
    "assembly": 8,
    "format": 9,
    "internal": 10,
}


def exit_code(err: TwinpressError) -> int:
    return EXIT_CODES.get(err.category, EXIT_CODES["internal"])
