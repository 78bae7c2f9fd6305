from dataclasses import dataclass
from enum import Enum

from servekit.core import ServableState

LOAD = 'load'
UNLOAD = 'unload'


class VersionPolicy(Enum):
    AVAILABILITY_PRESERVING = 'availability'
    RESOURCE_PRESERVING = 'resource'

    @classmethod
    def parse(cls, name):
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f'Unsupported version policy: {name}')


@dataclass(frozen=True)
class Action:
    kind: str
    version: int

    def __str__(self):
        return '{}({})'.format(self.kind.capitalize(), self.version)


def policy_next_action(versions, policy: VersionPolicy):
    '''Next Load/Unload for one servable's versions, or None.

    `versions` are ManagedVersion-like: `.id.version`, `.state`,
    `.is_aspired`. Rules run in order and the first one that decides wins.
    '''
    if len({v.id.name for v in versions}) > 1:
        raise ValueError('All versions must share one servable name')

    for rule in POLICY_RULES[policy]:
        action = rule(versions)
        if action is not None:
            return action
    return None


##############################################################################
#                           Transition Rules
##############################################################################


def _numbers(versions, state, aspired):
    return [v.id.version for v in versions
            if v.state == state and v.is_aspired == aspired]


def _load_newest_aspired(versions):
    candidates = _numbers(versions, ServableState.NEW, True)
    if candidates:
        return Action(LOAD, max(candidates))


def _unload_once_covered(versions):
    # Error versions still count as aspired here, so a failed update
    # never takes the incumbent down.
    stale = _numbers(versions, ServableState.READY, False)
    if not stale:
        return None
    aspired_ready = _numbers(versions, ServableState.READY, True)
    any_aspired = any(v.is_aspired for v in versions)
    if aspired_ready or not any_aspired:
        return Action(UNLOAD, min(stale))


def _unload_stale_first(versions):
    stale = _numbers(versions, ServableState.READY, False)
    if stale:
        return Action(UNLOAD, min(stale))


def _load_once_vacated(versions):
    candidates = _numbers(versions, ServableState.NEW, True)
    occupied = [v for v in versions if not v.is_aspired and v.state in
                (ServableState.READY, ServableState.UNLOADING)]
    if candidates and not occupied:
        return Action(LOAD, max(candidates))


POLICY_RULES = {
    VersionPolicy.AVAILABILITY_PRESERVING: [
        _load_newest_aspired,
        _unload_once_covered,
    ],
    VersionPolicy.RESOURCE_PRESERVING: [
        _unload_stale_first,
        _load_once_vacated,
    ],
}
