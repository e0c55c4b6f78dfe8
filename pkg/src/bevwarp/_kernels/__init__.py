"""Kernel backend selection: compiled core if available, numpy otherwise.

Set ``BEVWARP_PURE_PYTHON=1`` to force the numpy reference backend.
"""

import os

if os.environ.get("BEVWARP_PURE_PYTHON") == "1":
    from . import reference as _backend
else:
    try:
        from . import _core as _backend  # type: ignore[attr-defined]
    except ImportError:
        from . import reference as _backend

BACKEND_NAME = _backend.BACKEND_NAME
bilinear_sample = _backend.bilinear_sample
warp_bilinear = _backend.warp_bilinear
obb_overlap = _backend.obb_overlap
ttc_first_hit = _backend.ttc_first_hit
