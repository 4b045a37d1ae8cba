"""Kernel backend selection.

Prefers the compiled Cython backend, falls back to pure NumPy. Set
CILBENCH_KERNELS=python (or =cython) to force a backend; forcing cython
when the extension is missing raises at import.
"""

import os

from . import py_backend

_forced = os.environ.get("CILBENCH_KERNELS", "").strip().lower()

if _forced == "python":
    active = py_backend
elif _forced == "cython":
    from . import cy_backend as active  # noqa: F401  (ImportError is the contract)
else:
    try:
        from . import cy_backend as active
    except ImportError:
        active = py_backend


def backend_name() -> str:
    return active.NAME


def get_backend(name: str | None = None):
    if name is None:
        return active
    if name == "python":
        return py_backend
    if name == "cython":
        from . import cy_backend

        return cy_backend
    raise ValueError(f"unknown kernel backend {name!r}")
