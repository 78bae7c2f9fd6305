import os
import math
import ctypes
import ctypes.util
import logging

import psutil

logger = logging.getLogger(__name__)

# What proportion of available memory should we actually consider available
SAFETY_FACTOR = 0.8
DEFAULT_OVERHEAD_FACTOR = 1.25

_LIBC = None


def _directory_bytes(path):
    '''Sum of regular-file sizes under path, following no symlinks'''
    if not os.path.isdir(path):
        raise NotADirectoryError(path)

    total = 0
    errors = []
    for root, _, files in os.walk(path, onerror=errors.append):
        for name in files:
            full = os.path.join(root, name)
            if os.path.isfile(full) and not os.path.islink(full):
                total += os.path.getsize(full)
    if errors:
        raise errors[0]
    return total


def _estimate_ram_from_disk(path, overhead_factor=DEFAULT_OVERHEAD_FACTOR):
    return int(math.ceil(_directory_bytes(path) * overhead_factor))


def _free_memory():
    return SAFETY_FACTOR * psutil.virtual_memory().available


def _process_rss():
    return psutil.Process().memory_info().rss


def _default_thread_count():
    return psutil.cpu_count() or os.cpu_count() or 1


def release_memory_to_os():
    '''Ask the allocator to hand freed pages back; True if it released any'''
    global _LIBC
    if _LIBC is None:
        name = ctypes.util.find_library('c')
        try:
            _LIBC = ctypes.CDLL(name) if name else False
        except OSError:
            _LIBC = False
    trim = getattr(_LIBC, 'malloc_trim', None) if _LIBC else None
    if trim is None:
        return False
    return bool(trim(0))
