"""Select the compiled assembly kernels when available.

Set ``DDMCMC_PURE_PYTHON=1`` to force the numpy implementation.
"""
import os

from . import _kernels_py

try:
    if os.environ.get("DDMCMC_PURE_PYTHON"):
        raise ImportError("pure-Python kernels requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

BACKEND = "cython" if _compiled is not None else "python"
_active = BACKENDS[BACKEND]

assemble_band = _active.assemble_band
apply_dirichlet = _active.apply_dirichlet
band_matvec = _active.band_matvec


def get_backend(name):
    """Return the kernel module registered under ``name``."""
    try:
        return BACKENDS[name]
    except KeyError:
        raise ImportError(f"kernel backend {name!r} is not available") from None
