"""Backend selection for the hot kernels.

The compiled extension is used when it was built and
``LASFORMER_PURE_PYTHON`` is not set; otherwise the numpy fallback.
"""
from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _kernels_py

_BACKENDS: dict[str, ModuleType] = {"python": _kernels_py}
try:
    from . import _kernels as _compiled  # type: ignore[attr-defined]
except ImportError:  # extension not built
    _compiled = None
else:
    _BACKENDS["cython"] = _compiled

if _compiled is not None and not os.environ.get("LASFORMER_PURE_PYTHON"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str | None = None) -> ModuleType:
    name = BACKEND if name is None else name
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}") from None


def topk_rows(scores, admissible, kept, backend: str | None = None) -> np.ndarray:
    """Row-wise top-k mask over 2-D ``scores``; returns a bool array."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    admissible = np.ascontiguousarray(admissible, dtype=np.uint8)
    kept = np.ascontiguousarray(kept, dtype=np.int64)
    return get_backend(backend).topk_rows(scores, admissible, kept).astype(bool)


def sparse_attention(q, k, v, mask, heads: int, backend: str | None = None):
    """Gathered attention over kept positions; see ``_kernels_py.sparse_attention``."""
    return get_backend(backend).sparse_attention(
        np.ascontiguousarray(q, dtype=np.float64),
        np.ascontiguousarray(k, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.uint8),
        int(heads),
    )
