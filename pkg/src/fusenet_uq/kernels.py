"""Backend selection for the convolution/pooling kernels.

The compiled extension is used when it was built at install time; otherwise
the numpy fallback is imported. Setting ``FUSENET_UQ_PURE=1`` forces the
fallback (useful for benchmarking and for checking that both agree).
"""

import os

from fusenet_uq import _pykernels

if os.environ.get("FUSENET_UQ_PURE", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from fusenet_uq import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
