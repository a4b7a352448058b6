"""Backend selection for the hot kernels (3D convolution, fused attention).

The compiled extension is preferred; set ``CROSSFUSE_PURE_PYTHON=1`` to force
the numpy fallback (the benchmark and the cross-backend tests do this).
"""
import os

from . import _kernels_py

BACKEND = "python"
conv3d_forward = _kernels_py.conv3d_forward
conv3d_backward = _kernels_py.conv3d_backward
attend_forward = _kernels_py.attend_forward
attend_backward = _kernels_py.attend_backward

if os.environ.get("CROSSFUSE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        BACKEND = "compiled"
        conv3d_forward = _compiled.conv3d_forward
        conv3d_backward = _compiled.conv3d_backward
        attend_forward = _compiled.attend_forward
        attend_backward = _compiled.attend_backward
