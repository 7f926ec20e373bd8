"""
Training kernels with a compiled fast path.

The Cython extension ``_fast`` is used when it was built; otherwise the
NumPy implementation in ``_reference`` takes over.  Both expose the same
functions, so callers go through :func:`get_backend`.
"""

from __future__ import annotations

import logging

from . import _reference

_log = logging.getLogger(__name__)

try:
    from . import _fast
except ImportError:  # extension not built
    _fast = None
    _log.debug("compiled kernels unavailable, using pure-Python fallback")

BACKENDS = {"python": _reference}
if _fast is not None:
    BACKENDS["cython"] = _fast

HAVE_COMPILED = _fast is not None
DEFAULT = "cython" if HAVE_COMPILED else "python"


def get_backend(name: str | None = None):
    """Kernel module by name (``"cython"`` or ``"python"``); ``None`` picks the default."""
    name = name or DEFAULT
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"kernel backend {name!r} not available; have {sorted(BACKENDS)}"
        ) from None


def backend_name(module) -> str:
    for name, mod in BACKENDS.items():
        if mod is module:
            return name
    raise ValueError("unknown backend module")
