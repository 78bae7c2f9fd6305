import os
from .core import ServableId, ServableState, StateEvent, EventBus, Loader, \
    CallableLoader, AspiredVersionList, AspiredVersionsSink, aspire, \
    set_log_level  # noqa
from .manager import AspiredVersionsManager, ManagerConfig, NotFound, \
    VersionNotFound  # noqa
from .policy import VersionPolicy, policy_next_action  # noqa
from .sources import FileSystemSource, CommandSource, SourceConfig, \
    SourceEntry, VersionSelection  # noqa
from .batching import BatchingConfig, SharedBatchScheduler  # noqa
from .models import AffineModel, LookupTable, Example  # noqa

__all__ = [
    'ServableId', 'ServableState', 'StateEvent', 'EventBus', 'Loader',
    'CallableLoader', 'AspiredVersionList', 'AspiredVersionsSink', 'aspire',
    'AspiredVersionsManager', 'ManagerConfig', 'NotFound', 'VersionNotFound',
    'VersionPolicy', 'policy_next_action',
    'FileSystemSource', 'CommandSource', 'SourceConfig', 'SourceEntry',
    'VersionSelection', 'BatchingConfig', 'SharedBatchScheduler',
    'AffineModel', 'LookupTable', 'Example', 'set_log_level',
]

set_log_level(os.getenv('SERVEKIT_LOG_LEVEL') or 'WARNING')
