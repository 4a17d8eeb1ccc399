"""Backend selection for the hot kernels.

The compiled ``_ckernels`` extension is used when importable; otherwise the
NumPy versions in ``_pykernels`` are used. Setting the environment variable
``WGMESR_PURE_PYTHON=1`` forces the fallback (useful for benchmarking and
for checking that both backends agree).
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("WGMESR_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

jacobi_eigh = _impl.jacobi_eigh
fano_eval = _impl.fano_eval


def backends():
    """Return a mapping of every available backend name to its module."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
