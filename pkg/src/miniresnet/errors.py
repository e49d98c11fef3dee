"""Exception hierarchy shared by every module.

User-facing errors (bad shapes, configs, files) derive from ``UserError`` so the
CLI can map them to exit code 2.
"""


class UserError(Exception):
    """Base class for errors caused by bad input rather than a bug."""


class ShapeError(UserError, ValueError):
    pass


class ConfigError(UserError, ValueError):
    pass


class ContractError(UserError, ValueError):
    """An operation was called outside its precondition."""


class DegenerateBatchError(ShapeError):
    """Batch normalization in train mode received a single sample."""


class FormatError(UserError, ValueError):
    """A serialized file is truncated, corrupt or does not match the model."""


class ManifestError(UserError, ValueError):
    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class ImageReadError(UserError, OSError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"cannot read image {self.path}: {reason}")


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite.

    ``history`` holds the per-epoch losses recorded before the failure.
    """

    def __init__(self, message: str, epoch: int, step: int, history=None):
        self.epoch = epoch
        self.step = step
        self.history = list(history or [])
        super().__init__(f"{message} (epoch {epoch}, step {step})")
