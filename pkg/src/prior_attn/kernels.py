"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

The backend is picked once at import time from the PRIOR_ATTN_BACKEND
environment variable ("numba" or "numpy"). Default is numba when the
package is importable, numpy otherwise. Both implementations of every
kernel are exported so benchmarks can compare them directly.

All kernels operate on 2-D float64 row blocks: softmax-style kernels
reduce over axis 1, elementwise kernels ignore shape. Row entries may
be -inf (masked); a fully masked row produces an all-zero output row.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


def _resolve_backend() -> str:
    choice = os.environ.get("PRIOR_ATTN_BACKEND", "").strip().lower()
    if choice not in ("", "numba", "numpy"):
        raise ValueError(
            f"PRIOR_ATTN_BACKEND must be 'numba' or 'numpy', got {choice!r}"
        )
    if choice == "numba" and not _HAVE_NUMBA:
        raise ValueError("PRIOR_ATTN_BACKEND=numba but numba is not installed")
    if choice == "":
        choice = "numba" if _HAVE_NUMBA else "numpy"
    return choice


BACKEND = _resolve_backend()


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------


def softmax_rows_numpy(z: np.ndarray) -> np.ndarray:
    """Row softmax with -inf masking; all-masked rows come back as zeros.

    The stabilizing max is taken over finite entries only.
    """
    m = np.max(z, axis=1, keepdims=True)  # -inf only when the whole row is
    safe_m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - safe_m)
    s = np.sum(e, axis=1, keepdims=True)
    return np.where(s > 0.0, e / np.where(s > 0.0, s, 1.0), 0.0)


def softmax_rows_grad_numpy(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """VJP of softmax_rows: dz = w * (g - sum(g * w)) per row."""
    dot = np.sum(g * w, axis=1, keepdims=True)
    return w * (g - dot)


def log_softmax_rows_numpy(z: np.ndarray) -> np.ndarray:
    """Row log-softmax for finite inputs."""
    m = np.max(z, axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def log_softmax_rows_grad_numpy(out: np.ndarray, g: np.ndarray) -> np.ndarray:
    """VJP of log_softmax_rows: dz = g - softmax * sum(g) per row."""
    gsum = np.sum(g, axis=1, keepdims=True)
    return g - np.exp(out) * gsum


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_forward_numpy(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact (erf-based) GELU; also returns the Gaussian CDF for backward."""
    from scipy.special import erf

    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf

def gelu_backward_numpy(x: np.ndarray, cdf: np.ndarray, g: np.ndarray) -> np.ndarray:
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# numba implementations (same semantics, explicit loops)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _softmax_rows_nb(z):
    n, c = z.shape
    out = np.zeros((n, c))
    for i in range(n):
        m = -np.inf
        for j in range(c):
            if z[i, j] > m:
                m = z[i, j]
        if m == -np.inf:
            continue  # fully masked row stays zero
        s = 0.0
        for j in range(c):
            e = np.exp(z[i, j] - m)
            out[i, j] = e
            s += e
        for j in range(c):
            out[i, j] /= s
    return out


@njit(cache=True)
def _softmax_rows_grad_nb(w, g):
    n, c = w.shape
    dz = np.empty((n, c))
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += g[i, j] * w[i, j]
        for j in range(c):
            dz[i, j] = w[i, j] * (g[i, j] - dot)
    return dz


@njit(cache=True)
def _log_softmax_rows_nb(z):
    n, c = z.shape
    out = np.empty((n, c))
    for i in range(n):
        m = z[i, 0]
        for j in range(1, c):
            if z[i, j] > m:
                m = z[i, j]
        s = 0.0
        for j in range(c):
            s += np.exp(z[i, j] - m)
        lse = np.log(s)
        for j in range(c):
            out[i, j] = z[i, j] - m - lse
    return out


@njit(cache=True)
def _log_softmax_rows_grad_nb(out, g):
    n, c = out.shape
    dz = np.empty((n, c))
    for i in range(n):
        gsum = 0.0
        for j in range(c):
            gsum += g[i, j]
        for j in range(c):
            dz[i, j] = g[i, j] - np.exp(out[i, j]) * gsum
    return dz


@njit(cache=True)
def _gelu_forward_nb(x):
    out = np.empty_like(x)
    cdf = np.empty_like(x)
    xf = x.ravel()
    of = out.ravel()
    cf = cdf.ravel()
    for i in range(xf.size):
        c = 0.5 * (1.0 + math.erf(xf[i] * _INV_SQRT2))
        cf[i] = c
        of[i] = xf[i] * c
    return out, cdf


@njit(cache=True)
def _gelu_backward_nb(x, cdf, g):
    out = np.empty_like(x)
    xf = x.ravel()
    cf = cdf.ravel()
    gf = g.ravel()
    of = out.ravel()
    for i in range(xf.size):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xf[i] * xf[i])
        of[i] = gf[i] * (cf[i] + xf[i] * pdf)
    return out


def softmax_rows_numba(z):
    return _softmax_rows_nb(np.ascontiguousarray(z))


def softmax_rows_grad_numba(w, g):
    return _softmax_rows_grad_nb(np.ascontiguousarray(w), np.ascontiguousarray(g))


def log_softmax_rows_numba(z):
    return _log_softmax_rows_nb(np.ascontiguousarray(z))


def log_softmax_rows_grad_numba(out, g):
    return _log_softmax_rows_grad_nb(
        np.ascontiguousarray(out), np.ascontiguousarray(g)
    )


def gelu_forward_numba(x):
    return _gelu_forward_nb(np.ascontiguousarray(x))


def gelu_backward_numba(x, cdf, g):
    return _gelu_backward_nb(
        np.ascontiguousarray(x), np.ascontiguousarray(cdf), np.ascontiguousarray(g)
    )


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if BACKEND == "numba":
    softmax_rows = softmax_rows_numba
    softmax_rows_grad = softmax_rows_grad_numba
    log_softmax_rows = log_softmax_rows_numba
    log_softmax_rows_grad = log_softmax_rows_grad_numba
    gelu_forward = gelu_forward_numba
    gelu_backward = gelu_backward_numba
else:
    softmax_rows = softmax_rows_numpy
    softmax_rows_grad = softmax_rows_grad_numpy
    log_softmax_rows = log_softmax_rows_numpy
    log_softmax_rows_grad = log_softmax_rows_grad_numpy
    gelu_forward = gelu_forward_numpy
    gelu_backward = gelu_backward_numpy
