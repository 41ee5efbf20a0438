"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set ``TOKENUNET_PURE_PYTHON=1`` before import to force the numpy kernels.
"""
import os

from . import _kernels_py

BACKEND = "numpy"
_impl = _kernels_py

if os.environ.get("TOKENUNET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d
out_extent = _kernels_py.out_extent
