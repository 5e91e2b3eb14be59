"""Kernel backend selection.

``MOE_UPCYCLE_BACKEND`` picks the implementation: ``auto`` (default) uses the
compiled extension when it imports and the numpy fallback otherwise; ``native``
requires the extension; ``python`` forces the fallback.
"""
import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_choice = os.environ.get("MOE_UPCYCLE_BACKEND", "auto").lower()
if _choice not in ("auto", "native", "python"):
    raise ImportError(f"MOE_UPCYCLE_BACKEND must be auto, native or python, got {_choice!r}")

_native = None
if _choice != "python":
    try:
        from . import _kernels as _native
    except ImportError:
        if _choice == "native":
            raise
        log.debug("compiled kernels unavailable, using numpy fallback")

if _native is not None:
    NAME = "native"
    matmul = _native.matmul
    row_sum = _native.row_sum
    col_sum = _native.col_sum
else:
    NAME = "python"
    matmul = _fallback.matmul
    row_sum = _fallback.row_sum
    col_sum = _fallback.col_sum


def native_available() -> bool:
    return _native is not None
