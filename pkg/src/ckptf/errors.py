"""Exception hierarchy shared across the package."""


class CkptfError(Exception):
    pass


class FabricError(CkptfError):
    pass


class StaleGenerationError(FabricError):
    """An HCA or queue pair from an earlier fabric generation was used."""


class QueueFullError(FabricError):
    pass


class NotQuiescedError(FabricError):
    pass


class ResolveError(CkptfError):
    """A virtual endpoint could not be resolved to a live real address.

    ``reason`` is ``"NOT_FOUND"`` or ``"STALE"``; both are retriable.
    """

    def __init__(self, reason: str, target=None):
        super().__init__(f"{reason}: {target}")
        self.reason = reason
        self.target = target


class CoordinatorError(CkptfError):
    pass


class RegistrationRejected(CoordinatorError):
    pass


class BarrierAborted(CoordinatorError):
    pass


class SessionFailed(CoordinatorError):
    """The session's path to the root coordinator is gone."""


class CheckpointInProgress(CoordinatorError):
    pass


class LaunchError(CoordinatorError):
    def __init__(self, message: str, failed_ranks=()):
        super().__init__(message)
        self.failed_ranks = tuple(failed_ranks)


class ConnectionKilled(CoordinatorError):
    """Raised by the connection limiter when an attempt overloads it."""


class CheckpointError(CkptfError):
    pass


class DrainTimeout(CheckpointError):
    pass


class ImageCorrupt(CheckpointError):
    pass


class PhaseError(CheckpointError):
    pass


class RestartError(CheckpointError):
    pass
