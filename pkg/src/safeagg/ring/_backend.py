"""Pick the kernel implementation once, at import.

Set ``SAFEAGG_PURE_PYTHON=1`` to force the numpy fallback even when the
compiled extension is importable.
"""

from __future__ import annotations

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)


def _load():
    if os.environ.get("SAFEAGG_PURE_PYTHON", "") not in ("", "0"):
        return _fallback
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        log.debug("compiled ring kernels unavailable, using numpy fallback")
        return _fallback
    return _kernels


kernels = _load()
BACKEND: str = kernels.NAME

fallback = _fallback


def compiled():
    """Return the compiled kernel module, or None if it was not built."""
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _kernels
