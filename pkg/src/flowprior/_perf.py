"""Process-level performance knobs."""

from __future__ import annotations

import ctypes
import ctypes.util

M_TRIM_THRESHOLD = -1
M_MMAP_THRESHOLD = -3


def enable_heap_reuse() -> bool:
    """Keep large allocations on the heap instead of mmap-ing them.

    The tape allocates and frees tens of megabytes per training step; with
    glibc's default thresholds those buffers go back to the kernel on every
    free and each step pays the page faults again. Returns False when the
    allocator does not expose mallopt (non-glibc platforms).
    """
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(M_TRIM_THRESHOLD, 1 << 30)
        return True
    except (OSError, AttributeError):
        return False
