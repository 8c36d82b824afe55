"""Pure numpy implementations of the hot kernels.

These are the reference fallback for :mod:`multist._ckernels`; both expose the
same functions with the same argument conventions.
"""
import numpy as np

NEG_INF = -np.inf


def _extended(target, blank):
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext, blank):
    skip = np.zeros(len(ext), dtype=bool)
    if len(ext) > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return skip


def ctc_alpha(logp, target, blank):
    """Forward lattice in log space, shape (T, 2U+1); emission at t included."""
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T = logp.shape[0]
    ext = _extended(target, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, blank]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + logp[t, ext]
    return alpha


def ctc_beta(logp, target, blank):
    """Backward lattice in log space; emission at t excluded."""
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T = logp.shape[0]
    ext = _extended(target, blank)
    S = len(ext)
    skip = _skip_allowed(ext, blank)
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, ext]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc
    return beta


def ctc_loss_grad(logp, target, blank):
    """Return ``(-log P, d(-log P)/d logp)``; ``inf`` loss if no alignment exists."""
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    target = np.asarray(target, dtype=np.int64)
    T, V = logp.shape
    ext = _extended(target, blank)
    S = len(ext)
    alpha = ctc_alpha(logp, target, blank)
    tail = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    grad = np.zeros((T, V))
    if not np.isfinite(tail):
        return np.inf, grad
    beta = ctc_beta(logp, target, blank)
    occ = np.exp(alpha + beta - tail)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return -float(tail), grad


def ctc_prefix_extend(logp, r_prev, last, cands, blank, empty_prefix):
    """Extend one prefix by each candidate token.

    ``r_prev`` holds, per frame, the log probability of the current prefix
    ending in a non-blank (column 0) or blank (column 1). Returns the lattices
    of the extended prefixes, shape (K, T, 2), and their prefix scores (K,).
    """
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    cands = np.asarray(cands, dtype=np.int64)
    T = logp.shape[0]
    K = len(cands)
    r = np.full((K, T, 2), NEG_INF)
    xs = logp[:, cands].T  # (K, T)
    r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
    phi = np.tile(r_sum, (K, 1))
    same = cands == last
    if not empty_prefix:
        phi[same] = r_prev[:, 1]
    if empty_prefix:
        r[:, 0, 0] = xs[:, 0]
    psi = r[:, 0, 0].copy()
    xb = logp[:, blank]
    for t in range(1, T):
        r[:, t, 0] = np.logaddexp(r[:, t - 1, 0], phi[:, t - 1]) + xs[:, t]
        r[:, t, 1] = np.logaddexp(r[:, t - 1, 0], r[:, t - 1, 1]) + xb[t]
        psi = np.logaddexp(psi, phi[:, t - 1] + xs[:, t])
    return r, psi


def edit_distance(a, b):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    prev = np.arange(len(b) + 1, dtype=np.int64)
    for i in range(1, len(a) + 1):
        cur = np.empty_like(prev)
        cur[0] = i
        sub = prev[:-1] + (b != a[i - 1])
        dele = prev[1:] + 1
        best = np.minimum(sub, dele)
        # insertions chain left to right
        for j in range(1, len(b) + 1):
            v = best[j - 1]
            ins = cur[j - 1] + 1
            cur[j] = v if v < ins else ins
        prev = cur
    return int(prev[-1])
