"""Hot numeric kernels, compiled when available.

The Cython extension ``_ckernels`` is used if it was built; otherwise the
numpy module ``_pykernels`` is imported. Set ``PGALAB_PURE_PYTHON=1`` to
force the fallback. ``BACKEND`` names the module in use.
"""
import os

import numpy as np

from . import _pykernels

_compiled = None
if os.environ.get("PGALAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _pykernels
BACKEND = "cython" if _compiled is not None else "python"


def available_backends():
    return {"python": _pykernels, **({"cython": _compiled} if _compiled is not None else {})}


def lu_logabsdet(mats, tol=1e-12):
    mats = np.ascontiguousarray(mats, dtype=np.float64)
    if mats.ndim == 2:
        vals, sing = lu_logabsdet(mats[None], tol)
        return vals[:1], sing[:1]
    return _impl.lu_logabsdet(mats, float(tol))


def pairwise_sq_dists(x, y):
    return _impl.pairwise_sq_dists(np.ascontiguousarray(x, dtype=np.float64),
                                   np.ascontiguousarray(y, dtype=np.float64))


def gaussian_kernel(x, y, bandwidths):
    return _impl.gaussian_kernel(np.ascontiguousarray(x, dtype=np.float64),
                                 np.ascontiguousarray(y, dtype=np.float64),
                                 np.ascontiguousarray(bandwidths, dtype=np.float64))


def momentum_update(p, v, g, lr, momentum):
    """In place: ``v = momentum*v + g; p -= lr*v`` on contiguous float64 arrays."""
    if _impl is _compiled and p.flags.c_contiguous and v.flags.c_contiguous:
        _impl.momentum_update(p.reshape(-1), v.reshape(-1),
                              np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                              float(lr), float(momentum))
    else:
        _pykernels.momentum_update(p, v, np.asarray(g, dtype=np.float64), lr, momentum)
