"""Backend selection for the fitting kernels.

Imports the compiled extension when available, otherwise falls back to the
pure-numpy implementation. Set GPPANEL_NO_EXT=1 to force the fallback.
"""

from __future__ import annotations

import os

if os.environ.get("GPPANEL_NO_EXT"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _gpkern as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND_NAME

loglik_sum = _impl.loglik_sum
scale_nll = _impl.scale_nll
shape_nll = _impl.shape_nll

if BACKEND == "compiled":
    from . import _kernels_py as _fallback

    def fit_scale(x0, X, z, xi, lower, upper, fatol=1e-8, xatol=1e-8, maxfev=0):
        if len(x0) > 8:  # compiled simplex holds at most 8 coefficients
            return _fallback.fit_scale(x0, X, z, xi, lower, upper, fatol, xatol, maxfev)
        return _impl.fit_scale(x0, X, z, xi, lower, upper, fatol, xatol, maxfev)

    def fit_shape(x0, Xs, z, sigma, lower, upper, fatol=1e-8, xatol=1e-8, maxfev=0):
        if len(x0) > 8:
            return _fallback.fit_shape(x0, Xs, z, sigma, lower, upper, fatol, xatol, maxfev)
        return _impl.fit_shape(x0, Xs, z, sigma, lower, upper, fatol, xatol, maxfev)
else:
    fit_scale = _impl.fit_scale
    fit_shape = _impl.fit_shape
