"""Backend selection for the conv2d / bilinear-sampling kernels.

The compiled extension is used when importable; set ``STALAB_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from stalab import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("STALAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from stalab import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward


def implementations():
    """Return ``{name: module}`` for every backend importable in this process."""
    found = {"python": _pykernels}
    try:
        from stalab import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
