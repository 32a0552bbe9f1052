from enum import IntEnum


class Phase(IntEnum):
    RUNNING = 0
    SUSPENDED = 1
    DRAINING = 2
    WRITING = 3
    RESUMING = 4
    RESTARTING = 5


LEGAL_TRANSITIONS = {
    (Phase.RUNNING, Phase.SUSPENDED),
    (Phase.SUSPENDED, Phase.DRAINING),
    (Phase.DRAINING, Phase.WRITING),
    (Phase.WRITING, Phase.RESUMING),
    (Phase.RESUMING, Phase.RUNNING),
    (Phase.RESTARTING, Phase.RESUMING),
    # an aborted checkpoint resumes straight away
    (Phase.SUSPENDED, Phase.RESUMING),
    (Phase.DRAINING, Phase.RESUMING),
    (Phase.WRITING, Phase.RESUMING),
}


def is_legal_sequence(phases) -> bool:
    """True if ``phases`` starts at RUNNING or RESTARTING and only takes legal steps."""
    phases = list(phases)
    if not phases:
        return True
    if phases[0] not in (Phase.RUNNING, Phase.RESTARTING):
        return False
    return all((a, b) in LEGAL_TRANSITIONS for a, b in zip(phases, phases[1:]))
