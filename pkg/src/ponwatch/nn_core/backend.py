"""Kernel backend selection.

The compiled kernels are used when the extension was built; otherwise the
numpy versions are. ``PONWATCH_BACKEND=python`` forces the fallback.
"""
import os

from . import _ref

_forced = os.environ.get("PONWATCH_BACKEND", "auto").lower()
_fast = None
if _forced != "python":
    try:
        from . import _fast
    except ImportError:
        if _forced == "cython":
            raise

_BACKENDS = {"python": _ref}
if _fast is not None:
    _BACKENDS["cython"] = _fast

_active = "cython" if _fast is not None else "python"


def available() -> list[str]:
    return sorted(_BACKENDS)


def name() -> str:
    return _active


def use(backend: str) -> None:
    global _active
    if backend not in _BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {available()}")
    _active = backend


def kernels(backend: str | None = None):
    return _BACKENDS[backend or _active]
