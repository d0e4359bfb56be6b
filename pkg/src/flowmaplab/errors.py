"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, OSError -> 2,
DivergenceError -> 3, IntegrityError -> 4.
"""


class SingularTimeError(ValueError):
    """A field or closed form was evaluated at a time where it is singular."""


class StaleTapeError(RuntimeError):
    """A backward pass was requested on a tape recorded before a parameter update."""


class DivergenceError(RuntimeError):
    """Training or gradient evaluation produced non-finite values beyond tolerance."""


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class IntegrityError(RuntimeError):
    """Checkpoint payload or config hash does not match its manifest."""
