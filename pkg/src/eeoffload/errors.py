"""Exception hierarchy shared by every subpackage."""


class EEOffloadError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EEOffloadError, ValueError):
    def __init__(self, what: str, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected {expected}, got {actual}")


class BackwardError(EEOffloadError, RuntimeError):
    """Backward called without a matching forward pass."""


class CheckpointError(EEOffloadError, ValueError):
    pass


class DatasetError(EEOffloadError, ValueError):
    pass


class MissingBranchError(EEOffloadError, KeyError):
    def __init__(self, exit_id, kind):
        self.exit_id = exit_id
        self.kind = kind
        super().__init__(f"no branch for exit {exit_id!r}, kind {kind!r}")

    def __str__(self):
        return self.args[0]
