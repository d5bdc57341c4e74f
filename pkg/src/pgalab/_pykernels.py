"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""
import numpy as np

_ROW_CHUNK = 256


def lu_logabsdet(mats, tol):
    """Batched log|det| by partial-pivot LU; singular matrices give -inf."""
    a = np.array(mats, dtype=np.float64, copy=True)
    nb, n = a.shape[0], a.shape[1]
    rows = np.arange(nb)
    scale = np.abs(a).reshape(nb, -1).max(axis=1) if n else np.zeros(nb)
    singular = scale == 0.0
    acc = np.zeros(nb)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        _eliminate(a, rows, n, scale, tol, singular, acc)
    return np.where(singular, -np.inf, acc), singular


def _eliminate(a, rows, n, scale, tol, singular, acc):
    for k in range(n):
        piv = k + np.argmax(np.abs(a[:, k:, k]), axis=1)
        best = np.abs(a[rows, piv, k])
        singular |= best <= tol * scale
        swap = a[rows, piv].copy()
        a[rows, piv] = a[:, k]
        a[:, k] = swap
        pivot = a[:, k, k]
        acc += np.log(np.abs(pivot))
        l = a[:, k + 1:, k] / pivot[:, None]
        a[:, k + 1:, k + 1:] -= l[:, :, None] * a[:, k:k + 1, k + 1:]


def pairwise_sq_dists(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = np.empty((x.shape[0], y.shape[0]))
    for s in range(0, x.shape[0], _ROW_CHUNK):
        diff = x[s:s + _ROW_CHUNK, None, :] - y[None, :, :]
        out[s:s + _ROW_CHUNK] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def gaussian_kernel(x, y, bandwidths):
    d2 = pairwise_sq_dists(x, y)
    out = np.zeros_like(d2)
    for bw in np.asarray(bandwidths, dtype=np.float64):
        out += np.exp((-0.5 / (bw * bw)) * d2)
    return out


def momentum_update(p, v, g, lr, momentum):
    v *= momentum
    v += g
    p -= lr * v
