"""Keep large numpy temporaries on the heap instead of fresh mmap regions.

glibc serves allocations above its mmap threshold with new mappings, and
every batch then pays page faults on its temporaries. On VMs where faults
are expensive that dominates the per-batch cost. Raising the thresholds is
process-wide, so only entry points call :func:`tune`.
"""
import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune(threshold=32 * 1024 * 1024):
    global _done
    if _done or not sys.platform.startswith("linux"):
        return _done
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) == 1
        ok = libc.mallopt(_M_TRIM_THRESHOLD, 2 * threshold) == 1 and ok
    except (OSError, AttributeError):
        return False
    _done = ok
    return ok
