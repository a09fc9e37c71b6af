# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled fitting kernels: GP composite log-likelihood block objectives
and a bounded Nelder-Mead simplex driving them without Python call overhead.

Mirrors gppanel._kernels_py; keep the two in sync.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log, log1p, INFINITY

cnp.import_array()

BACKEND_NAME = "compiled"

cdef double SHAPE_EPS = 1e-8
cdef double SHAPE_FLOOR = -0.5 + 1e-6
cdef double SHAPE_CEIL = 5.0
cdef double BIG = 1e300

ctypedef struct CellData:
    double* X          # n x p covariates, row-major
    double* z          # n excesses
    double* fixed      # n fixed values (xi for scale blocks, sigma for shape blocks)
    Py_ssize_t n
    Py_ssize_t p

ctypedef double (*objective_t)(const double*, CellData*) nogil


cdef double _scale_nll(const double* gamma, CellData* d) nogil:
    cdef Py_ssize_t c, k
    cdef double eta, v, xi, w, acc = 0.0
    for c in range(d.n):
        eta = 0.0
        for k in range(d.p):
            eta += d.X[c * d.p + k] * gamma[k]
        if eta > 700.0 or eta < -700.0:
            return BIG
        v = d.z[c] * exp(-eta)
        xi = d.fixed[c]
        if fabs(xi) < SHAPE_EPS:
            acc += eta + v
        else:
            w = xi * v
            if w <= -1.0:
                return BIG
            acc += eta + (1.0 + 1.0 / xi) * log1p(w)
    if acc != acc:   # NaN guard
        return BIG
    return acc


cdef double _shape_nll(const double* delta, CellData* d) nogil:
    cdef Py_ssize_t c, k
    cdef double xi, v, w, sigma, acc = 0.0
    for c in range(d.n):
        xi = 0.0
        for k in range(d.p):
            xi += d.X[c * d.p + k] * delta[k]
        if xi < SHAPE_FLOOR or xi > SHAPE_CEIL:
            return BIG
        sigma = d.fixed[c]
        v = d.z[c] / sigma
        if fabs(xi) < SHAPE_EPS:
            acc += log(sigma) + v
        else:
            w = xi * v
            if w <= -1.0:
                return BIG
            acc += log(sigma) + (1.0 + 1.0 / xi) * log1p(w)
    if acc != acc:
        return BIG
    return acc


cdef double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef int _nelder_mead(objective_t f, CellData* data,
                      double* x0, double* lower, double* upper, Py_ssize_t dim,
                      double fatol, double xatol, int maxfev,
                      double* xout, double* fout, int* nfev) nogil:
    """Standard Nelder-Mead with projection onto the box. Returns 1 when the
    simplex converged within tolerance, 0 on the eval budget."""
    cdef Py_ssize_t i, j, k, hi, lo, sec
    cdef double alpha = 1.0, gamma_c = 2.0, rho = 0.5, sigma_c = 0.5
    cdef double fr, fe, fc, spread, xspread, d
    # simplex storage: (dim+1) x dim vertices + values
    cdef double[80] sim_buf
    cdef double[9] fv_buf
    cdef double[8] xr_buf
    cdef double[8] cen_buf
    if dim > 8:
        return -1
    cdef double* sim = sim_buf
    cdef double* fv = fv_buf
    cdef double* xr = xr_buf
    cdef double* cen = cen_buf

    for j in range(dim):
        sim[j] = _clip(x0[j], lower[j], upper[j])
    fv[0] = f(sim, data)
    nfev[0] = 1
    for i in range(1, dim + 1):
        for j in range(dim):
            sim[i * dim + j] = sim[j]
        j = i - 1
        d = sim[j]
        if d != 0.0:
            d = d * 1.05
        else:
            d = 0.00025
        sim[i * dim + j] = _clip(d, lower[j], upper[j])
        if sim[i * dim + j] == sim[j]:
            # step collapsed onto the start (e.g. at a bound); nudge inward
            sim[i * dim + j] = _clip(sim[j] - 0.05 * (upper[j] - lower[j] if upper[j] - lower[j] < 1.0 else 1.0), lower[j], upper[j])
        fv[i] = f(&sim[i * dim], data)
        nfev[0] += 1

    while nfev[0] < maxfev:
        # order: lo = best, hi = worst, sec = second worst
        lo = 0
        hi = 0
        for i in range(1, dim + 1):
            if fv[i] < fv[lo]:
                lo = i
            if fv[i] > fv[hi]:
                hi = i
        sec = lo
        for i in range(dim + 1):
            if i != hi and fv[i] > fv[sec]:
                sec = i

        spread = fabs(fv[hi] - fv[lo])
        xspread = 0.0
        for i in range(dim + 1):
            for j in range(dim):
                d = fabs(sim[i * dim + j] - sim[lo * dim + j])
                if d > xspread:
                    xspread = d
        if spread <= fatol and xspread <= xatol:
            for j in range(dim):
                xout[j] = sim[lo * dim + j]
            fout[0] = fv[lo]
            return 1

        # centroid of all but worst
        for j in range(dim):
            cen[j] = 0.0
        for i in range(dim + 1):
            if i == hi:
                continue
            for j in range(dim):
                cen[j] += sim[i * dim + j]
        for j in range(dim):
            cen[j] /= dim

        # reflect
        for j in range(dim):
            xr[j] = _clip(cen[j] + alpha * (cen[j] - sim[hi * dim + j]), lower[j], upper[j])
        fr = f(xr, data)
        nfev[0] += 1

        if fr < fv[lo]:
            # expand
            for j in range(dim):
                cen[j] = _clip(cen[j] + gamma_c * (xr[j] - cen[j]), lower[j], upper[j])
            fe = f(cen, data)
            nfev[0] += 1
            if fe < fr:
                for j in range(dim):
                    sim[hi * dim + j] = cen[j]
                fv[hi] = fe
            else:
                for j in range(dim):
                    sim[hi * dim + j] = xr[j]
                fv[hi] = fr
        elif fr < fv[sec]:
            for j in range(dim):
                sim[hi * dim + j] = xr[j]
            fv[hi] = fr
        else:
            # contract (outside if reflection helped over the worst)
            if fr < fv[hi]:
                for j in range(dim):
                    xr[j] = _clip(cen[j] + rho * (xr[j] - cen[j]), lower[j], upper[j])
            else:
                for j in range(dim):
                    xr[j] = _clip(cen[j] + rho * (sim[hi * dim + j] - cen[j]), lower[j], upper[j])
            fc = f(xr, data)
            nfev[0] += 1
            if fc < fv[hi] and fc < fr:
                for j in range(dim):
                    sim[hi * dim + j] = xr[j]
                fv[hi] = fc
            else:
                # shrink toward best
                for i in range(dim + 1):
                    if i == lo:
                        continue
                    for j in range(dim):
                        sim[i * dim + j] = _clip(
                            sim[lo * dim + j] + sigma_c * (sim[i * dim + j] - sim[lo * dim + j]),
                            lower[j], upper[j])
                    fv[i] = f(&sim[i * dim], data)
                    nfev[0] += 1

    lo = 0
    for i in range(1, dim + 1):
        if fv[i] < fv[lo]:
            lo = i
    for j in range(dim):
        xout[j] = sim[lo * dim + j]
    fout[0] = fv[lo]
    return 0


def loglik_sum(z, sigma, xi):
    """Sum of per-cell GP log-likelihood terms; -inf on support violation."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] za = np.ascontiguousarray(np.atleast_1d(z), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sa = np.ascontiguousarray(
        np.broadcast_to(sigma, (za.shape[0],)), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xa = np.ascontiguousarray(
        np.broadcast_to(xi, (za.shape[0],)), dtype=np.float64)
    cdef Py_ssize_t n = za.shape[0], c
    cdef double acc = 0.0, v, w
    for c in range(n):
        if sa[c] <= 0.0 or sa[c] != sa[c]:
            return -INFINITY
        v = za[c] / sa[c]
        if fabs(xa[c]) < SHAPE_EPS:
            acc += -log(sa[c]) - v
        else:
            w = xa[c] * v
            if w <= -1.0:
                return -INFINITY
            acc += -log(sa[c]) - (1.0 + 1.0 / xa[c]) * log1p(w)
    return acc


cdef CellData _make_data(cnp.ndarray[cnp.float64_t, ndim=2] X,
                         cnp.ndarray[cnp.float64_t, ndim=1] z,
                         cnp.ndarray[cnp.float64_t, ndim=1] fixed):
    cdef CellData d
    d.X = <double*> cnp.PyArray_DATA(X)
    d.z = <double*> cnp.PyArray_DATA(z)
    d.fixed = <double*> cnp.PyArray_DATA(fixed)
    d.n = X.shape[0]
    d.p = X.shape[1]
    return d


def scale_nll(gamma, X, z, xi):
    """Negative partial composite log-likelihood in the scale coefficients."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Xa = np.ascontiguousarray(X, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] za = np.ascontiguousarray(np.atleast_1d(z), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fa = np.ascontiguousarray(
        np.broadcast_to(xi, (za.shape[0],)), dtype=np.float64)
    cdef CellData d = _make_data(Xa, za, fa)
    return _scale_nll(<double*> cnp.PyArray_DATA(g), &d)


def shape_nll(delta, Xs, z, sigma):
    """Negative partial composite log-likelihood in the shape coefficients."""
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g = np.ascontiguousarray(delta, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Xa = np.ascontiguousarray(Xs, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] za = np.ascontiguousarray(np.atleast_1d(z), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fa = np.ascontiguousarray(
        np.broadcast_to(sigma, (za.shape[0],)), dtype=np.float64)
    cdef CellData d = _make_data(Xa, za, fa)
    return _shape_nll(<double*> cnp.PyArray_DATA(g), &d)


cdef _fit(objective_t obj, x0, X, z, fixed, lower, upper,
          double fatol, double xatol, int maxfev):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] x0a = np.ascontiguousarray(x0, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Xa = np.ascontiguousarray(X, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] za = np.ascontiguousarray(np.atleast_1d(z), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fixa = np.ascontiguousarray(
        np.broadcast_to(fixed, (za.shape[0],)), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] lo = np.ascontiguousarray(lower, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] hi = np.ascontiguousarray(upper, dtype=np.float64)
    cdef Py_ssize_t dim = x0a.shape[0]
    if dim > 8:
        raise ValueError("compiled kernel supports at most 8 coefficients per block")
    if maxfev <= 0:
        maxfev = 400 * max(2, <int> dim)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] xout = np.empty(dim, dtype=np.float64)
    cdef double fout = 0.0
    cdef int nfev = 0, status
    cdef CellData d = _make_data(Xa, za, fixa)
    with nogil:
        status = _nelder_mead(obj, &d,
                              <double*> cnp.PyArray_DATA(x0a),
                              <double*> cnp.PyArray_DATA(lo),
                              <double*> cnp.PyArray_DATA(hi),
                              dim, fatol, xatol, maxfev,
                              <double*> cnp.PyArray_DATA(xout), &fout, &nfev)
    return xout, fout, nfev, status == 1


def fit_scale(x0, X, z, xi, lower, upper, fatol=1e-8, xatol=1e-8, maxfev=0):
    """Bounded Nelder-Mead minimization of scale_nll from x0."""
    return _fit(_scale_nll, x0, X, z, xi, lower, upper, fatol, xatol, maxfev)


def fit_shape(x0, Xs, z, sigma, lower, upper, fatol=1e-8, xatol=1e-8, maxfev=0):
    """Bounded Nelder-Mead minimization of shape_nll from x0."""
    return _fit(_shape_nll, x0, Xs, z, sigma, lower, upper, fatol, xatol, maxfev)
