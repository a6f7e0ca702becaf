"""Solver kernel backends.

The compiled extension is preferred when importable; the NumPy backend is the
drop-in fallback. Both expose ``depth_profiles`` and ``depth_adjoint`` with
identical semantics and agree to machine precision. Select explicitly with
``SONOTRACE_BACKEND=numpy|compiled`` or per call via ``backend=``.
"""
from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import core as _core
except ImportError:  # extension not built; NumPy fallback serves
    _core = None

HAVE_COMPILED = _core is not None

_BACKENDS = {"numpy": numpy_backend}
if HAVE_COMPILED:
    _BACKENDS["compiled"] = _core


def default_backend_name() -> str:
    env = os.environ.get("SONOTRACE_BACKEND", "").strip().lower()
    if env:
        if env not in _BACKENDS:
            raise RuntimeError(
                f"SONOTRACE_BACKEND={env!r} not available (have {sorted(_BACKENDS)})")
        return env
    return "compiled" if HAVE_COMPILED else "numpy"


def available_backends():
    return sorted(_BACKENDS)


def get_backend(name=None):
    """Resolve a backend module by name (None -> default)."""
    if name is None:
        return _BACKENDS[default_backend_name()]
    if hasattr(name, "depth_profiles"):
        return name
    key = str(name).strip().lower()
    if key in ("auto", ""):
        return _BACKENDS[default_backend_name()]
    if key not in _BACKENDS:
        raise RuntimeError(f"unknown backend {name!r} (have {sorted(_BACKENDS)})")
    return _BACKENDS[key]
