"""Hot numeric kernels: batched bidirectional max-mean token similarity.

The B_i x B_t pair grid is the inner loop of training (every step evaluates
it three times, forward and backward), so it gets a numba @njit kernel that
walks pairs without materializing the B_i*B_t*L_t*L_v token-similarity
tensor. A pure-numpy path (einsum + scatter) is kept as a fallback and as a
cross-check; select it with GRM_BACKEND=numpy. GRM_BACKEND=numba forces the
JIT path (import error if numba is unavailable); the default "auto" uses
numba when importable.

Both paths implement the same contract:

    sim[i, j] = mean over valid text tokens of max over valid image tokens
                of tn[j, t] . vn[i, v]
              + mean over valid image tokens of max over valid text tokens

with argmax ties broken by the lowest token index. Inputs are expected to
be row-normalized already; normalization is not this module's job.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_BACKEND = "GRM_BACKEND"
_ENV_THREADS = "GRM_THREADS"

_VALID_BACKENDS = ("numba", "numpy")

_numba_forward = None
_numba_backward = None


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


def default_backend() -> str:
    """Resolve the kernel backend from GRM_BACKEND (auto -> numba if importable)."""
    choice = os.environ.get(_ENV_BACKEND, "auto").strip().lower()
    if choice == "auto" or choice == "":
        return "numba" if _numba_available() else "numpy"
    if choice not in _VALID_BACKENDS:
        raise ValueError(f"{_ENV_BACKEND} must be one of {_VALID_BACKENDS} or 'auto', got {choice!r}")
    return choice


def configure_threads() -> int:
    """Cap numba worker threads at GRM_THREADS (default: available cores)."""
    cap = os.environ.get(_ENV_THREADS)
    n = os.cpu_count() or 1
    if cap:
        n = max(1, min(n, int(cap)))
        if _numba_available():
            import numba

            numba.set_num_threads(n)
    return n


# ---------------------------------------------------------------------------
# loop kernels (jitted lazily so GRM_BACKEND=numpy never imports numba)
# ---------------------------------------------------------------------------


def _maxmean_forward_loops(tn, tmask, vn, vmask, nt, nv, sim, t2i_idx, i2t_idx):
    b_i, l_v, dim = vn.shape
    b_t, l_t, _ = tn.shape
    # transposed image tokens once, so the per-pair cosine grid is one dgemm
    vt = np.empty((b_i, dim, l_v))
    for i in range(b_i):
        for v in range(l_v):
            for k in range(dim):
                vt[i, k, v] = vn[i, v, k]
    for i in range(b_i):
        for j in range(b_t):
            cos = np.dot(tn[j], vt[i])
            t2i = 0.0
            for t in range(l_t):
                if not tmask[j, t]:
                    t2i_idx[i, j, t] = 0
                    continue
                best = -np.inf
                best_v = 0
                for v in range(l_v):
                    if vmask[i, v] and cos[t, v] > best:
                        best = cos[t, v]
                        best_v = v
                t2i_idx[i, j, t] = best_v
                t2i += best
            i2t = 0.0
            for v in range(l_v):
                if not vmask[i, v]:
                    i2t_idx[i, j, v] = 0
                    continue
                best = -np.inf
                best_t = 0
                for t in range(l_t):
                    if tmask[j, t] and cos[t, v] > best:
                        best = cos[t, v]
                        best_t = t
                i2t_idx[i, j, v] = best_t
                i2t += best
            sim[i, j] = t2i / nt[j] + i2t / nv[i]


def _maxmean_backward_loops(g, tn, tmask, vn, vmask, nt, nv, t2i_idx, i2t_idx, dtn, dvn):
    b_i, l_v, dim = vn.shape
    b_t, l_t, _ = tn.shape
    for i in range(b_i):
        for j in range(b_t):
            gij = g[i, j]
            if gij == 0.0:
                continue
            ct = gij / nt[j]
            for t in range(l_t):
                if not tmask[j, t]:
                    continue
                v = t2i_idx[i, j, t]
                for k in range(dim):
                    dtn[j, t, k] += ct * vn[i, v, k]
                    dvn[i, v, k] += ct * tn[j, t, k]
            cv = gij / nv[i]
            for v in range(l_v):
                if not vmask[i, v]:
                    continue
                t = i2t_idx[i, j, v]
                for k in range(dim):
                    dvn[i, v, k] += cv * tn[j, t, k]
                    dtn[j, t, k] += cv * vn[i, v, k]


def _get_numba_kernels():
    global _numba_forward, _numba_backward
    if _numba_forward is None:
        from numba import njit

        _numba_forward = njit(cache=True)(_maxmean_forward_loops)
        _numba_backward = njit(cache=True)(_maxmean_backward_loops)
    return _numba_forward, _numba_backward


# ---------------------------------------------------------------------------
# numpy fallback (vectorized; materializes the full token-similarity tensor)
# ---------------------------------------------------------------------------


def _maxmean_forward_numpy(tn, tmask, vn, vmask, nt, nv):
    cos = np.einsum("jtd,ivd->ijtv", tn, vn)
    neg = -np.inf
    masked_v = np.where(vmask[:, None, None, :], cos, neg)
    t2i_idx = np.argmax(masked_v, axis=3)
    t2i_val = np.take_along_axis(masked_v, t2i_idx[..., None], axis=3)[..., 0]
    t2i = np.sum(t2i_val * tmask[None, :, :], axis=2) / nt[None, :]

    masked_t = np.where(tmask[None, :, :, None], cos, neg)
    i2t_idx = np.argmax(masked_t, axis=2)
    i2t_val = np.take_along_axis(masked_t, i2t_idx[:, :, None, :], axis=2)[:, :, 0, :]
    i2t = np.sum(i2t_val * vmask[:, None, :], axis=2) / nv[:, None]
    return t2i + i2t, t2i_idx, i2t_idx


def _maxmean_backward_numpy(g, tn, tmask, vn, vmask, nt, nv, t2i_idx, i2t_idx):
    b_i = vn.shape[0]
    b_t = tn.shape[0]
    dtn = np.zeros_like(tn)
    dvn = np.zeros_like(vn)
    ii = np.arange(b_i)[:, None, None]
    jj = np.arange(b_t)[None, :, None]

    coef_t = g[:, :, None] * tmask[None, :, :] / nt[None, :, None]
    gathered_v = vn[ii, t2i_idx]
    dtn += np.einsum("ijt,ijtd->jtd", coef_t, gathered_v)
    np.add.at(dvn, (ii, t2i_idx), coef_t[..., None] * tn[None, :, :, :])

    coef_v = g[:, :, None] * vmask[:, None, :] / nv[:, None, None]
    gathered_t = tn[jj, i2t_idx]
    dvn += np.einsum("ijv,ijvd->ivd", coef_v, gathered_t)
    np.add.at(dtn, (jj, i2t_idx), coef_v[..., None] * vn[:, None, :, :])
    return dtn, dvn


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------


def _counts(mask):
    return np.sum(mask, axis=1, dtype=np.float64)


def maxmean_forward(tn, tmask, vn, vmask, backend=None):
    """Batched bidirectional similarity grid.

    tn: (B_t, L_t, d) float64, vn: (B_i, L_v, d) float64, masks boolean.
    Returns (sim (B_i, B_t), t2i_idx (B_i, B_t, L_t), i2t_idx (B_i, B_t, L_v)).
    Every instance must have at least one valid token (caller's contract).
    """
    backend = backend or default_backend()
    nt = _counts(tmask)
    nv = _counts(vmask)
    if backend == "numpy":
        return _maxmean_forward_numpy(tn, tmask, vn, vmask, nt, nv)
    fwd, _ = _get_numba_kernels()
    b_i, b_t = vn.shape[0], tn.shape[0]
    sim = np.empty((b_i, b_t))
    t2i_idx = np.empty((b_i, b_t, tn.shape[1]), dtype=np.int64)
    i2t_idx = np.empty((b_i, b_t, vn.shape[1]), dtype=np.int64)
    fwd(tn, tmask, vn, vmask, nt, nv, sim, t2i_idx, i2t_idx)
    return sim, t2i_idx, i2t_idx


def maxmean_backward(g, tn, tmask, vn, vmask, t2i_idx, i2t_idx, backend=None):
    """Gradient of maxmean_forward w.r.t. tn and vn for upstream grad g (B_i, B_t)."""
    backend = backend or default_backend()
    nt = _counts(tmask)
    nv = _counts(vmask)
    if backend == "numpy":
        return _maxmean_backward_numpy(g, tn, tmask, vn, vmask, nt, nv, t2i_idx, i2t_idx)
    _, bwd = _get_numba_kernels()
    dtn = np.zeros_like(tn)
    dvn = np.zeros_like(vn)
    bwd(g, tn, tmask, vn, vmask, nt, nv, t2i_idx, i2t_idx, dtn, dvn)
    return dtn, dvn
