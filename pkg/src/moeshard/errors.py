"""Exception hierarchy shared by all modules."""


class MoEShardError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MoEShardError, ValueError):
    pass


class BoundsError(MoEShardError, IndexError):
    pass


class DivisibilityError(MoEShardError, ValueError):
    """A dimension is not divisible by the device or shard count."""


class ProtocolError(MoEShardError, RuntimeError):
    """A collective exchange received data inconsistent with its metadata."""


class ConfigError(MoEShardError, ValueError):
    pass


class FormatError(MoEShardError, ValueError):
    """A weight file is corrupt or truncated."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
