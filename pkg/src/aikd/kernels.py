"""Backend selection for the warp kernel.

The compiled extension is used when it imports; set ``AIKD_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _kernels_py

if os.environ.get("AIKD_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "cython"

warp_bilinear = _impl.warp_bilinear
warp_bilinear_batch = _impl.warp_bilinear_batch
