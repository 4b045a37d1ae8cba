"""cilbench: class-incremental continual-learning engine and benchmark."""

__version__ = "0.1.0"


def _tune_allocator():
    # The training loop churns ~100MB of short-lived buffers per step. With
    # glibc defaults those are mmap'd and unmapped every time, so each step
    # pays page-fault cost. Keeping large blocks on the heap free-lists is
    # worth ~3x on the hot path. Best effort: silently skipped off glibc.
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-4, 0)  # M_MMAP_MAX
    except Exception:
        pass


_tune_allocator()
