"""Hot convolution kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``_convext``, Cython) is preferred when it imported
cleanly; otherwise the numpy reference implementation is used. Set
``FUSIONREID_PURE=1`` to force the numpy path, e.g. for benchmarking.
"""

import os

from . import reference

if os.environ.get("FUSIONREID_PURE"):
    _impl = reference
else:
    try:
        from . import _convext as _impl
    except ImportError:
        _impl = reference

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
out_extent = reference.out_extent

__all__ = ["BACKEND", "im2col", "col2im", "out_extent", "reference"]
