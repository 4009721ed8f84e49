"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin (``*_numpy``) and a numba twin
(``*_numba``). The public names dispatch to the numba version unless the
environment variable ``FLUXDICT_NUMBA`` is set to ``0``/``false``/``off``, or
numba cannot be imported. Both twins follow the same selection and tie-break
rules, so they agree up to floating-point rounding.
"""

from __future__ import annotations

import os

import numpy as np

PURSUIT_TOL = 1e-10
# Above this many rows the vectorized numpy pursuit (BLAS matmuls) beats the
# per-row numba loop; see benchmarks/bench_kernels.py.
PURSUIT_NUMBA_MAX_ROWS = 64


def _numba_requested() -> bool:
    return os.environ.get("FLUXDICT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _numba_requested()


# ---------------------------------------------------------------- numpy path


def topk_numpy(pre: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row top-k by value.

    Returns (indices, values), each (batch, k), sorted by value descending
    with ties broken by lower index.
    """
    batch, d = pre.shape
    if k == d:
        idx = np.broadcast_to(np.arange(d), (batch, d))
    else:
        kth = np.partition(pre, d - k, axis=1)[:, d - k][:, None]
        above = pre > kth
        need = k - above.sum(axis=1, keepdims=True)
        ties = pre == kth
        mask = above | (ties & (np.cumsum(ties, axis=1) <= need))
        idx = np.nonzero(mask)[1].reshape(batch, k)
    vals = np.take_along_axis(pre, idx, axis=1)
    order = np.argsort(-vals, axis=1, kind="stable")
    idx = np.take_along_axis(idx, order, axis=1).astype(np.int64)
    vals = np.take_along_axis(vals, order, axis=1)
    return idx, vals


def sparse_decode_numpy(indices: np.ndarray, values: np.ndarray, atoms: np.ndarray, bias: np.ndarray) -> np.ndarray:
    out = np.empty((indices.shape[0], atoms.shape[1]), dtype=np.result_type(values, atoms))
    out[:] = bias
    for slot in range(indices.shape[1]):
        idx = indices[:, slot]
        live = idx >= 0
        if live.any():
            out[live] += values[live, slot, None] * atoms[idx[live]]
    return out


def pursuit_numpy(x: np.ndarray, atoms: np.ndarray, k: int, history: bool = False):
    """Gradient pursuit for a batch of rows, vectorized across rows.

    Returns (indices, coefs, recon, residual_history). ``residual_history`` has
    shape (batch, k + 1): the squared residual norm before each iteration and
    after the last one, NaN once a row has stopped. None unless requested.
    """
    batch, _ = x.shape
    n_atoms = atoms.shape[0]
    coef_dense = np.zeros((batch, n_atoms))
    in_support = np.zeros((batch, n_atoms), dtype=bool)
    indices = np.full((batch, k), -1, dtype=np.int64)
    stopped = np.zeros(batch, dtype=bool)
    stop_next = np.zeros(batch, dtype=bool)
    hist = np.full((batch, k + 1), np.nan) if history else None
    rows = np.arange(batch)
    for it in range(k + 1):
        resid = x - coef_dense @ atoms
        rn = np.einsum("ij,ij->i", resid, resid)
        if hist is not None:
            hist[~stopped, it] = rn[~stopped]
        if it == k:
            break
        stopped |= stop_next | (rn < PURSUIT_TOL)
        live = ~stopped
        if not live.any():
            break
        corr = resid @ atoms.T
        scores = np.abs(corr)
        scores[in_support] = -np.inf
        pick = np.argmax(scores, axis=1)
        in_support[rows[live], pick[live]] = True
        indices[rows[live], it] = pick[live]
        grad = np.where(in_support & live[:, None], corr, 0.0)
        direction = grad @ atoms
        denom = np.einsum("ij,ij->i", direction, direction)
        step_ok = live & (denom > 0)
        gamma = np.zeros(batch)
        gamma[step_ok] = np.einsum("ij,ij->i", resid[step_ok], direction[step_ok]) / denom[step_ok]
        coef_dense += gamma[:, None] * grad
        stop_next = live & (denom == 0)
    recon = coef_dense @ atoms
    safe = np.where(indices >= 0, indices, 0)
    coefs = np.where(indices >= 0, np.take_along_axis(coef_dense, safe, axis=1), 0.0)
    return indices, coefs, recon, hist


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _topk_numba_impl(pre, k):
        batch, d = pre.shape
        idx = np.empty((batch, k), dtype=np.int64)
        vals = np.empty((batch, k), dtype=pre.dtype)
        for b in range(batch):
            filled = 0
            for j in range(d):
                v = pre[b, j]
                if filled == k and not v > vals[b, k - 1]:
                    continue
                pos = filled if filled < k else k - 1
                # strict comparison keeps earlier indices ahead on ties
                while pos > 0 and v > vals[b, pos - 1]:
                    if pos < k:
                        vals[b, pos] = vals[b, pos - 1]
                        idx[b, pos] = idx[b, pos - 1]
                    pos -= 1
                vals[b, pos] = v
                idx[b, pos] = j
                if filled < k:
                    filled += 1
        return idx, vals

    @numba.njit(cache=True)
    def _sparse_decode_numba_impl(indices, values, atoms, bias, out):
        batch, width = indices.shape
        n = atoms.shape[1]
        for b in range(batch):
            for c in range(n):
                out[b, c] = bias[c]
            for s in range(width):
                j = indices[b, s]
                if j < 0:
                    continue
                v = values[b, s]
                if v == 0:
                    continue
                for c in range(n):
                    out[b, c] += v * atoms[j, c]
        return out

    @numba.njit(cache=True)
    def _pursuit_numba_impl(x, atoms, k, hist, tol):
        batch, n = x.shape
        n_atoms = atoms.shape[0]
        indices = np.full((batch, k), -1, dtype=np.int64)
        coefs = np.zeros((batch, k))
        recon = np.zeros((batch, n))
        in_support = np.zeros(n_atoms, dtype=np.bool_)
        corr = np.empty(n_atoms)
        resid = np.empty(n)
        direction = np.empty(n)
        for b in range(batch):
            in_support[:] = False
            size = 0
            stopped = False
            for it in range(k + 1):
                # residual recomputed from scratch: r = x - D_S^T c
                for c in range(n):
                    resid[c] = x[b, c]
                for s in range(size):
                    j = indices[b, s]
                    cf = coefs[b, s]
                    for c in range(n):
                        resid[c] -= cf * atoms[j, c]
                rn = 0.0
                for c in range(n):
                    rn += resid[c] * resid[c]
                if hist.shape[0] > 0:
                    hist[b, it] = rn
                if it == k or stopped or rn < tol:
                    break
                best = -1
                best_score = -1.0
                for j in range(n_atoms):
                    acc = 0.0
                    for c in range(n):
                        acc += atoms[j, c] * resid[c]
                    corr[j] = acc
                    if not in_support[j]:
                        a = abs(acc)
                        if a > best_score:
                            best_score = a
                            best = j
                if best < 0:
                    break
                in_support[best] = True
                indices[b, size] = best
                size += 1
                for c in range(n):
                    direction[c] = 0.0
                for s in range(size):
                    j = indices[b, s]
                    g = corr[j]
                    for c in range(n):
                        direction[c] += g * atoms[j, c]
                denom = 0.0
                num = 0.0
                for c in range(n):
                    denom += direction[c] * direction[c]
                    num += resid[c] * direction[c]
                if denom == 0.0:
                    stopped = True
                    continue
                gamma = num / denom
                for s in range(size):
                    coefs[b, s] += gamma * corr[indices[b, s]]
            for s in range(size):
                j = indices[b, s]
                cf = coefs[b, s]
                for c in range(n):
                    recon[b, c] += cf * atoms[j, c]
        return indices, coefs, recon


def topk_numba(pre: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    return _topk_numba_impl(np.ascontiguousarray(pre), k)


def sparse_decode_numba(indices, values, atoms, bias):
    out = np.empty((indices.shape[0], atoms.shape[1]), dtype=np.result_type(values, atoms))
    return _sparse_decode_numba_impl(
        np.ascontiguousarray(indices), np.ascontiguousarray(values).astype(out.dtype),
        np.ascontiguousarray(atoms).astype(out.dtype), np.asarray(bias, dtype=out.dtype), out,
    )


def pursuit_numba(x: np.ndarray, atoms: np.ndarray, k: int, history: bool = False):
    x = np.ascontiguousarray(x, dtype=np.float64)
    atoms = np.ascontiguousarray(atoms, dtype=np.float64)
    hist = np.full((x.shape[0], k + 1), np.nan) if history else np.empty((0, 0))
    indices, coefs, recon = _pursuit_numba_impl(x, atoms, k, hist, PURSUIT_TOL)
    return indices, coefs, recon, (hist if history else None)


# ---------------------------------------------------------------- dispatch


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


def topk(pre: np.ndarray, k: int):
    return topk_numba(pre, k) if USE_NUMBA else topk_numpy(pre, k)


def sparse_decode(indices, values, atoms, bias):
    if USE_NUMBA:
        return sparse_decode_numba(indices, values, atoms, bias)
    return sparse_decode_numpy(indices, values, atoms, bias)


def pursuit(x: np.ndarray, atoms: np.ndarray, k: int, history: bool = False):
    """Dispatching gradient pursuit; k larger than the atom count is clamped
    and the outputs padded back to width k."""
    k_eff = min(k, atoms.shape[0])
    if USE_NUMBA and np.shape(x)[0] <= PURSUIT_NUMBA_MAX_ROWS:
        indices, coefs, recon, hist = pursuit_numba(x, atoms, k_eff, history)
    else:
        indices, coefs, recon, hist = pursuit_numpy(
            np.asarray(x, dtype=np.float64), np.asarray(atoms, dtype=np.float64), k_eff, history
        )
    if k_eff < k:
        pad = k - k_eff
        indices = np.pad(indices, ((0, 0), (0, pad)), constant_values=-1)
        coefs = np.pad(coefs, ((0, 0), (0, pad)))
        if hist is not None:
            hist = np.pad(hist, ((0, 0), (0, pad)), constant_values=np.nan)
    return indices, coefs, recon, hist
