"""Allocator tuning for the many large short-lived temporaries created per training step."""
import ctypes
import ctypes.util
import sys

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(threshold=1 << 30):
    """Keep big blocks in the glibc heap instead of mmap/munmap on every allocation.

    No-op on platforms without glibc ``mallopt``. Returns True when applied.
    """
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(M_MMAP_THRESHOLD, threshold) and libc.mallopt(M_TRIM_THRESHOLD, threshold)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done
