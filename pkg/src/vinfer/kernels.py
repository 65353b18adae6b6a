"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise the numpy twins in
:mod:`vinfer._fallback` take over. Set ``VINFER_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

BACKEND = "python"
_impl = _fallback

if os.environ.get("VINFER_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        logger.debug("compiled kernels unavailable; using numpy fallback")
    else:
        _impl = _compiled
        BACKEND = "compiled"

causal_mix = _impl.causal_mix
threshold_components = _impl.threshold_components

__all__ = ["BACKEND", "causal_mix", "threshold_components"]
