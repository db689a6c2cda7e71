"""Backend selection for the hot kernels.

The compiled extension is used when it was built; setting the environment
variable ``SAFEMAL_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _pykernels

OPTIMAL = _pykernels.OPTIMAL
INFEASIBLE = _pykernels.INFEASIBLE
UNBOUNDED = _pykernels.UNBOUNDED
ITER_LIMIT = _pykernels.ITER_LIMIT

_compiled = None
if not os.environ.get("SAFEMAL_PURE_PYTHON"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"

bounded_simplex = _impl.bounded_simplex
dual_simplex = _impl.dual_simplex
mlp_fit_adam = _impl.mlp_fit_adam


def backends():
    """Map of available backend name -> module (for tests and benchmarks)."""
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
