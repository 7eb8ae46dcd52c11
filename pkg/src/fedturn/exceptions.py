"""Exception types shared across the package."""


class FedTurnError(Exception):
    """Base class for all errors raised by fedturn."""


# signal ingest
class MalformedRow(FedTurnError, ValueError):
    pass


class UnknownChannel(FedTurnError, ValueError):
    pass


class NonMonotonicTimestamps(FedTurnError, ValueError):
    pass


class ChannelMissing(FedTurnError, ValueError):
    pass


class SpanTooShort(FedTurnError, ValueError):
    pass


class GapTooLarge(FedTurnError, ValueError):
    def __init__(self, channel, start, length):
        self.channel = channel
        self.start = start
        self.length = length
        super().__init__(
            f"channel {channel!r} silent for {length:.3f} s starting at t={start:.3f}"
        )


# dataset
class TooShort(FedTurnError, ValueError):
    pass


class VehicleTooSmall(UserWarning):
    """Issued when a vehicle has too few turn events to be split."""


# model / federation
class ShapeMismatch(FedTurnError, ValueError):
    pass


class LengthMismatch(FedTurnError, ValueError):
    pass


class EmptyDataset(FedTurnError, ValueError):
    pass


class EmptyShard(FedTurnError, ValueError):
    pass


class EmptyUpdateList(FedTurnError, ValueError):
    pass


class KTooLarge(FedTurnError, ValueError):
    pass


# statistics
class NTooSmall(FedTurnError, ValueError):
    pass


class EmptyMatrix(FedTurnError, ValueError):
    pass


class ConfigError(FedTurnError, ValueError):
    pass
