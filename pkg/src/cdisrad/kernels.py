"""Per-voxel numeric kernels.

Every kernel has a numba implementation and a vectorised numpy fallback with
the same signature. The public wrappers pick one via ``backend`` (``None``
means numba when available). Inputs are flattened to ``(n_b, n_vox)`` so the
kernels stay agnostic of grid shape.
"""

import numpy as np

from cdisrad._accel import njit, resolve_backend


# --------------------------------------------------------------------------
# log-linear monoexponential fit


def _loglinear_fit_numpy(bvalues, signals, eps):
    y = np.log(np.maximum(signals, eps))
    b_mean = bvalues.mean()
    bc = bvalues - b_mean
    sbb = np.dot(bc, bc)
    y_mean = y.mean(axis=0)
    slope = np.dot(bc, y) / sbb
    intercept = y_mean - slope * b_mean
    pred = intercept[None, :] + bvalues[:, None] * slope[None, :]
    resid = np.sqrt(np.mean((y - pred) ** 2, axis=0))
    return np.exp(intercept), -slope, resid


@njit
def _loglinear_fit_jit(bvalues, signals, eps):
    n_b, n_vox = signals.shape
    b_mean = 0.0
    for i in range(n_b):
        b_mean += bvalues[i]
    b_mean /= n_b
    sbb = 0.0
    for i in range(n_b):
        sbb += (bvalues[i] - b_mean) ** 2
    s0 = np.empty(n_vox)
    adc = np.empty(n_vox)
    resid = np.empty(n_vox)
    y = np.empty(n_b)
    for v in range(n_vox):
        y_mean = 0.0
        sby = 0.0
        for i in range(n_b):
            s = signals[i, v]
            if s < eps:
                s = eps
            y[i] = np.log(s)
            y_mean += y[i]
            sby += (bvalues[i] - b_mean) * y[i]
        y_mean /= n_b
        slope = sby / sbb
        intercept = y_mean - slope * b_mean
        sq = 0.0
        for i in range(n_b):
            r = y[i] - (intercept + bvalues[i] * slope)
            sq += r * r
        s0[v] = np.exp(intercept)
        adc[v] = -slope
        resid[v] = np.sqrt(sq / n_b)
    return s0, adc, resid


def loglinear_fit(bvalues, signals, eps, backend=None):
    """Least-squares line through ``(b, ln max(S, eps))`` for every column.

    Parameters
    ----------
    bvalues : ndarray, shape (n_b,)
        At least two distinct b-values.
    signals : ndarray, shape (n_b, n_vox)
        Non-negative signal intensities.
    eps : float
        Positive floor applied before the logarithm.

    Returns
    -------
    s0, adc, residual : ndarray, shape (n_vox,)
        ``exp(intercept)``, ``-slope`` and the RMS log-domain error.
    """
    bvalues = np.ascontiguousarray(bvalues, dtype=np.float64)
    signals = np.ascontiguousarray(signals, dtype=np.float64)
    if bvalues.ndim != 1 or signals.ndim != 2 or signals.shape[0] != bvalues.shape[0]:
        raise ValueError(f"shape mismatch: bvalues {bvalues.shape}, signals {signals.shape}")
    if np.unique(bvalues).size < 2:
        raise ValueError("log-linear fit needs at least 2 distinct b-values")
    if resolve_backend(backend) == "numba":
        return _loglinear_fit_jit(bvalues, signals, float(eps))
    return _loglinear_fit_numpy(bvalues, signals, float(eps))


# --------------------------------------------------------------------------
# weighted geometric mixing


def _log_mix_numpy(signals, weights, eps):
    return np.exp(np.dot(weights, np.log(np.maximum(signals, eps))))


@njit
def _log_mix_jit(signals, weights, eps):
    n_b, n_vox = signals.shape
    out = np.empty(n_vox)
    for v in range(n_vox):
        acc = 0.0
        for i in range(n_b):
            s = signals[i, v]
            if s < eps:
                s = eps
            acc += weights[i] * np.log(s)
        out[v] = np.exp(acc)
    return out


def log_mix(signals, weights, eps, backend=None):
    """Per-column ``prod_i max(S_i, eps) ** w_i`` evaluated in the log domain."""
    signals = np.ascontiguousarray(signals, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if signals.ndim != 2 or weights.shape != (signals.shape[0],):
        raise ValueError(f"shape mismatch: signals {signals.shape}, weights {weights.shape}")
    if resolve_backend(backend) == "numba":
        return _log_mix_jit(signals, weights, float(eps))
    return _log_mix_numpy(signals, weights, float(eps))


# --------------------------------------------------------------------------
# in-plane bilinear resampling


def source_coords(n_in, n_out):
    """Pixel-centre aligned source coordinates, clamped to the input grid."""
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(coords, 0.0, n_in - 1.0)


def _interp_matrix(n_in, n_out):
    coords = source_coords(n_in, n_out)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = coords - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def _resize_numpy(data, nx_out, ny_out):
    wx = _interp_matrix(data.shape[0], nx_out)
    wy = _interp_matrix(data.shape[1], ny_out)
    return np.einsum("ai,ijk,bj->abk", wx, data, wy, optimize=True)


@njit
def _resize_jit(data, cx, cy):
    nx, ny, nz = data.shape
    ox = cx.shape[0]
    oy = cy.shape[0]
    out = np.empty((ox, oy, nz))
    for a in range(ox):
        x0 = int(np.floor(cx[a]))
        x1 = min(x0 + 1, nx - 1)
        fx = cx[a] - x0
        for b in range(oy):
            y0 = int(np.floor(cy[b]))
            y1 = min(y0 + 1, ny - 1)
            fy = cy[b] - y0
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = (1.0 - fx) * fy
            w10 = fx * (1.0 - fy)
            w11 = fx * fy
            for k in range(nz):
                out[a, b, k] = (
                    w00 * data[x0, y0, k]
                    + w01 * data[x0, y1, k]
                    + w10 * data[x1, y0, k]
                    + w11 * data[x1, y1, k]
                )
    return out


def resize_inplane(data, nx_out, ny_out, backend=None):
    """Bilinearly resample every slice of ``data`` (nx, ny, nz) to (nx_out, ny_out)."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {data.shape}")
    if resolve_backend(backend) == "numba":
        cx = source_coords(data.shape[0], nx_out)
        cy = source_coords(data.shape[1], ny_out)
        return _resize_jit(data, cx, cy)
    return _resize_numpy(data, nx_out, ny_out)
