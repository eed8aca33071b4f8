"""Backend selection for the local-solve inner loops.

The compiled Cython kernels are preferred when the extension built; the
pure-numpy module `_python` implements the same iterations and is used as
a fallback (or when SCHWARZOPT_BACKEND=python).  `set_backend` switches at
runtime, which the benchmark and the cross-backend tests rely on.
"""

from __future__ import annotations

import os
import warnings

from . import _python
from ..errors import ConfigError

try:
    from . import _compiled

    HAVE_COMPILED = True
except ImportError:
    _compiled = None
    HAVE_COMPILED = False

_BACKENDS = {"python": _python}
if HAVE_COMPILED:
    _BACKENDS["compiled"] = _compiled


def _initial_backend() -> str:
    requested = os.environ.get("SCHWARZOPT_BACKEND", "").strip().lower()
    if requested:
        if requested in _BACKENDS:
            return requested
        warnings.warn(
            f"SCHWARZOPT_BACKEND={requested!r} unavailable; falling back to pure python",
            RuntimeWarning,
            stacklevel=2,
        )
        return "python"
    return "compiled" if HAVE_COMPILED else "python"


_active_name = _initial_backend()


def backend_name() -> str:
    return _active_name


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    global _active_name
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active_name = name


def box_qp(A, g0, lb, omega, tol, max_iter):
    return _BACKENDS[_active_name].box_qp(A, g0, lb, omega, tol, max_iter)


def tv_block_qp(r0w, vblock, omega, tol, max_iter):
    return _BACKENDS[_active_name].tv_block_qp(r0w, vblock, omega, tol, max_iter)
