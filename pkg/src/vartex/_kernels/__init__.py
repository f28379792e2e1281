"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
fallback is used otherwise, or when ``VARTEX_PURE_PYTHON=1`` is set. Both
backends expose the same functions (see ``fallback.py`` for the reference
semantics); ``benchmarks/bench_kernels.py`` compares their speed.
"""

import os

from . import fallback

_compiled = None
if os.environ.get("VARTEX_PURE_PYTHON", "").lower() not in ("1", "true", "yes"):
    try:
        from . import _core as _compiled
    except ImportError:
        _compiled = None

active = _compiled if _compiled is not None else fallback
BACKEND = "compiled" if _compiled is not None else "python"

softmax_fwd = active.softmax_fwd
softmax_bwd = active.softmax_bwd
layernorm_fwd = active.layernorm_fwd
layernorm_bwd = active.layernorm_bwd
gelu_fwd = active.gelu_fwd
gelu_bwd = active.gelu_bwd
adamw_update = active.adamw_update
