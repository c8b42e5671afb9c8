"""Kernel selection: compiled extension when available, numpy otherwise.

Set QUADCD_PURE_PYTHON=1 to force the numpy fallback (used by the
benchmark and the parity tests).
"""

import os

if os.environ.get("QUADCD_PURE_PYTHON"):
    from quadcd import _kernels_py as _impl
else:
    try:
        from quadcd import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        from quadcd import _kernels_py as _impl  # type: ignore[no-redef]

softmax = _impl.softmax
kl_div = _impl.kl_div
js_div = _impl.js_div


def backend_name() -> str:
    return _impl.BACKEND
