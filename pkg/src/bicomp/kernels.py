"""Hot numeric kernels shared by every execution path.

All functions here are backend-polymorphic (see :mod:`bicomp.backend`):
compiled with numba by default, plain NumPy with ``BICOMP_NUMBA=0``.  The
simulation engine, the per-round reference implementations and the public
compressor API all call the same kernels, so trajectories are bit-identical
across entry points and across worker-pool sizes.

Randomness is counter-based: every draw is keyed by
``(run_seed, role, endpoint, round)`` through a splitmix64 mix, so a draw
can be replayed in isolation and never depends on execution order.
"""

import numpy as np

from .backend import maybe_njit

# compressor kind codes (wire order matches config names)
K_IDENTITY = 0
K_TOPK = 1
K_RANDK = 2
K_SCALE = 3
K_SCALED_RANDK = 4

# problem kind codes
P_QUAD = 0
P_LOGREG = 1

# stream roles
R_DUAL = 1
R_PRIMAL = 2
R_BATCH = 3

# run_chunk status codes
S_RAN = 0
S_STOPPED = 1
S_DIVERGED = 2

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_UMAX = np.uint64(0xFFFFFFFFFFFFFFFF)
_SALT_ROLE = np.uint64(0xD6E8FEB86659FD93)
_SALT_ENDPOINT = np.uint64(0xA0761D6478BD642F)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


@maybe_njit()
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@maybe_njit()
def stream_state(seed, role, endpoint, t):
    """Initial splitmix64 state for the (seed, role, endpoint, round) stream."""
    s = _mix64(np.uint64(seed) ^ _GOLD)
    s = _mix64(s ^ (np.uint64(role) + np.uint64(1)) * _SALT_ROLE)
    s = _mix64(s ^ (np.uint64(endpoint) + np.uint64(1)) * _SALT_ENDPOINT)
    return _mix64(s ^ (np.uint64(t) + np.uint64(1)) * _GOLD)


@maybe_njit()
def _next_u64(state):
    state = state + _GOLD
    return state, _mix64(state)


@maybe_njit()
def _next_below(state, bound):
    """Unbiased draw in [0, bound) by rejection; bound is a positive int."""
    b = np.uint64(bound)
    rem = (_UMAX % b + np.uint64(1)) % b
    thresh = _UMAX - rem
    while True:
        state, v = _next_u64(state)
        if v <= thresh:
            return state, np.int64(v % b)


@maybe_njit()
def _next_normal_pair(state):
    state, v1 = _next_u64(state)
    state, v2 = _next_u64(state)
    u1 = (np.float64(v1 >> np.uint64(11)) + 1.0) * _INV53  # (0, 1]
    u2 = np.float64(v2 >> np.uint64(11)) * _INV53  # [0, 1)
    r = np.sqrt(-2.0 * np.log(u1))
    a = 2.0 * np.pi * u2
    return state, r * np.cos(a), r * np.sin(a)


@maybe_njit()
def sample_subset(seed, role, endpoint, t, d, k, pool, out_idx):
    """Uniform k-subset of [0, d) via partial Fisher-Yates; selection order
    is written to out_idx[:k]."""
    state = stream_state(seed, role, endpoint, t)
    for j in range(d):
        pool[j] = j
    for j in range(k):
        state, r = _next_below(state, d - j)
        pos = j + r
        tmp = pool[j]
        pool[j] = pool[pos]
        pool[pos] = tmp
        out_idx[j] = pool[j]


@maybe_njit()
def topk_select(v, k, out_idx):
    """Indices of the k largest-magnitude entries, lowest index first on ties."""
    order = np.argsort(-np.abs(v), kind="mergesort")
    for j in range(k):
        out_idx[j] = order[j]


@maybe_njit()
def compress_into(v, kind, k, cfac, seed, role, endpoint, t, out, idx, pool):
    """Apply a compressor to v, writing the result to out (same length).

    idx[:count] receives the stored coordinates (selection order); the
    return value is the stored-coordinate count.  RandK keeps zeros
    literally, so its count is always k.
    """
    d = v.shape[0]
    if kind == K_IDENTITY:
        for j in range(d):
            out[j] = v[j]
            idx[j] = j
        return d
    if kind == K_SCALE:
        for j in range(d):
            out[j] = cfac * v[j]
            idx[j] = j
        return d
    if kind == K_TOPK:
        topk_select(v, k, idx)
        for j in range(d):
            out[j] = 0.0
        for j in range(k):
            out[idx[j]] = v[idx[j]]
        return k
    # RandK and its rescaled contractive variant
    sample_subset(seed, role, endpoint, t, d, k, pool, idx)
    scale = np.float64(d) / np.float64(k)
    for j in range(d):
        out[j] = 0.0
    if kind == K_RANDK:
        for j in range(k):
            out[idx[j]] = v[idx[j]] * scale
    else:  # K_SCALED_RANDK: unbiased output divided by (omega + 1) = d/k
        for j in range(k):
            out[idx[j]] = (v[idx[j]] * scale) / scale
    return k


# ---------------------------------------------------------------------------
# per-worker oracles
# ---------------------------------------------------------------------------


@maybe_njit()
def quad_value_grad(Ai, bi, x, out):
    """out = A_i x - b_i; returns 0.5 x'A_i x - b_i'x."""
    ax = np.dot(Ai, x)
    val = 0.5 * np.dot(x, ax) - np.dot(bi, x)
    for j in range(x.shape[0]):
        out[j] = ax[j] - bi[j]
    return val


@maybe_njit()
def reg_value_grad_add(xf, lam, out):
    """Add the gradient of the smooth nonconvex penalty lam*sum t^2/(1+t^2)."""
    val = 0.0
    for j in range(xf.shape[0]):
        tj = xf[j]
        denom = 1.0 + tj * tj
        val += tj * tj / denom
        out[j] += lam * 2.0 * tj / (denom * denom)
    return lam * val


@maybe_njit()
def logreg_value_grad(X, y, s0, s1, ncls, dfeat, lam, xf, out, logits):
    """Softmax cross-entropy value and gradient over samples [s0, s1).

    xf is the flattened (ncls, dfeat) weight block, class-major.  Uses
    max-subtracted log-sum-exp.  The penalty term (lam > 0) is added exactly.
    """
    m = s1 - s0
    val = 0.0
    for j in range(xf.shape[0]):
        out[j] = 0.0
    for s in range(s0, s1):
        row = X[s]
        mx = -np.inf
        for c in range(ncls):
            lc = np.dot(row, xf[c * dfeat : (c + 1) * dfeat])
            logits[c] = lc
            if lc > mx:
                mx = lc
        se = 0.0
        for c in range(ncls):
            se += np.exp(logits[c] - mx)
        val += mx + np.log(se) - logits[y[s]]
        for c in range(ncls):
            coef = np.exp(logits[c] - mx) / se
            if c == y[s]:
                coef -= 1.0
            base = c * dfeat
            for j in range(dfeat):
                out[base + j] += coef * row[j]
    inv = 1.0 / np.float64(m)
    val *= inv
    for j in range(xf.shape[0]):
        out[j] *= inv
    if lam > 0.0:
        val += reg_value_grad_add(xf, lam, out)
    return val


@maybe_njit()
def logreg_grad_batch(X, y, s0, s1, ncls, dfeat, lam, xf, out, logits, seed, worker, t, batch):
    """Minibatch gradient: `batch` samples drawn uniformly with replacement."""
    m = s1 - s0
    state = stream_state(seed, R_BATCH, worker, t)
    for j in range(xf.shape[0]):
        out[j] = 0.0
    for _ in range(batch):
        state, r = _next_below(state, m)
        row = X[s0 + r]
        mx = -np.inf
        for c in range(ncls):
            lc = np.dot(row, xf[c * dfeat : (c + 1) * dfeat])
            logits[c] = lc
            if lc > mx:
                mx = lc
        se = 0.0
        for c in range(ncls):
            se += np.exp(logits[c] - mx)
        for c in range(ncls):
            coef = np.exp(logits[c] - mx) / se
            if c == y[s0 + r]:
                coef -= 1.0
            base = c * dfeat
            for j in range(dfeat):
                out[base + j] += coef * row[j]
    inv = 1.0 / np.float64(batch)
    for j in range(xf.shape[0]):
        out[j] *= inv
    if lam > 0.0:
        reg_value_grad_add(xf, lam, out)


@maybe_njit()
def quad_grad_noisy(Ai, bi, x, out, seed, worker, t, batch, sigma):
    """Quadratic gradient plus isotropic Gaussian noise with E||noise||^2 =
    sigma^2 / batch (the bounded-variance stochastic-oracle model)."""
    quad_value_grad(Ai, bi, x, out)
    d = x.shape[0]
    scale = sigma / np.sqrt(np.float64(batch) * np.float64(d))
    state = stream_state(seed, R_BATCH, worker, t)
    j = 0
    while j + 1 < d:
        state, z0, z1 = _next_normal_pair(state)
        out[j] += scale * z0
        out[j + 1] += scale * z1
        j += 2
    if j < d:
        state, z0, z1 = _next_normal_pair(state)
        out[j] += scale * z0


@maybe_njit()
def worker_grad(
    pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
    i, w_eval, out, logits, seed, t, batch, sigma,
):
    """Gradient of f_i at w_eval into out; stochastic when batch > 0."""
    if pkind == P_QUAD:
        if batch > 0 and sigma > 0.0:
            quad_grad_noisy(qA[i], qB[i], w_eval, out, seed, i, t, batch, sigma)
        else:
            quad_value_grad(qA[i], qB[i], w_eval, out)
    else:
        if batch > 0:
            logreg_grad_batch(
                X, y, wptr[i], wptr[i + 1], ncls, dfeat, lam, w_eval, out, logits,
                seed, i, t, batch,
            )
        else:
            logreg_value_grad(X, y, wptr[i], wptr[i + 1], ncls, dfeat, lam, w_eval, out, logits)


@maybe_njit()
def eval_mean_value_grad(pkind, qA, qB, X, y, wptr, ncls, dfeat, lam, x, gbar, gtmp, logits):
    """Exact f(x) = (1/n) sum f_i(x) and mean gradient, fixed worker order."""
    n = wptr.shape[0] - 1 if pkind == P_LOGREG else qA.shape[0]
    val = 0.0
    for j in range(x.shape[0]):
        gbar[j] = 0.0
    for i in range(n):
        if pkind == P_QUAD:
            val += quad_value_grad(qA[i], qB[i], x, gtmp)
        else:
            val += logreg_value_grad(
                X, y, wptr[i], wptr[i + 1], ncls, dfeat, lam, x, gtmp, logits
            )
        for j in range(x.shape[0]):
            gbar[j] += gtmp[j]
    inv = 1.0 / np.float64(n)
    for j in range(x.shape[0]):
        gbar[j] *= inv
    return val * inv


@maybe_njit()
def sq_norm(v):
    return np.dot(v, v)


@maybe_njit()
def sq_dist(a, b):
    s = 0.0
    for j in range(a.shape[0]):
        diff = a[j] - b[j]
        s += diff * diff
    return s


@maybe_njit()
def shift_error_sq_sum(h, gstar):
    """sum_i ||h_i - grad f_i(x*)||^2 in worker order."""
    s = 0.0
    for i in range(h.shape[0]):
        s += sq_dist(h[i], gstar[i])
    return s


# ---------------------------------------------------------------------------
# one synchronous round, split into the worker part (parallelizable across
# workers; slot i is owned by worker i) and the server part (fixed order)
# ---------------------------------------------------------------------------


@maybe_njit(nogil=True)
def worker_one(
    pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
    i, w_eval, h, use_shifts, beta,
    dual_kind, k_dual, c_dual,
    seed, t, batch, sigma,
    grads, msgs, vtmp, widx, wpool, logits,
):
    worker_grad(
        pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
        i, w_eval, grads[i], logits[i], seed, t, batch, sigma,
    )
    if use_shifts:
        for j in range(w_eval.shape[0]):
            vtmp[i, j] = grads[i, j] - h[i, j]
        compress_into(
            vtmp[i], dual_kind, k_dual, c_dual, seed, R_DUAL, i, t,
            msgs[i], widx[i], wpool[i],
        )
        for j in range(w_eval.shape[0]):
            h[i, j] += beta * msgs[i, j]
    else:
        compress_into(
            grads[i], dual_kind, k_dual, c_dual, seed, R_DUAL, i, t,
            msgs[i], widx[i], wpool[i],
        )


@maybe_njit()
def worker_phase(
    pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
    n, w_eval, h, use_shifts, beta,
    dual_kind, k_dual, c_dual,
    seed, t, batch, sigma,
    grads, msgs, vtmp, widx, wpool, logits,
):
    for i in range(n):
        worker_one(
            pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
            i, w_eval, h, use_shifts, beta,
            dual_kind, k_dual, c_dual,
            seed, t, batch, sigma,
            grads, msgs, vtmp, widx, wpool, logits,
        )


@maybe_njit()
def server_phase(
    n, grads, msgs, h_srv, x, w, gamma, beta,
    use_shifts, dual_kind,
    primal_kind, k_primal, c_primal,
    seed, t,
    gtmp, mtmp, dtmp, ptmp, sidx, spool,
):
    dim = x.shape[0]
    if dual_kind == K_IDENTITY:
        # identity uplink: the compression correction cancels algebraically,
        # so the estimator is the plain gradient average
        for j in range(dim):
            gtmp[j] = 0.0
        for i in range(n):
            for j in range(dim):
                gtmp[j] += grads[i, j]
        for j in range(dim):
            gtmp[j] /= np.float64(n)
        if use_shifts:
            for j in range(dim):
                mtmp[j] = 0.0
            for i in range(n):
                for j in range(dim):
                    mtmp[j] += msgs[i, j]
            for j in range(dim):
                h_srv[j] += beta * (mtmp[j] / np.float64(n))
    elif use_shifts:
        for j in range(dim):
            mtmp[j] = 0.0
        for i in range(n):
            for j in range(dim):
                mtmp[j] += msgs[i, j]
        for j in range(dim):
            mtmp[j] /= np.float64(n)
        for j in range(dim):
            gtmp[j] = h_srv[j] + mtmp[j]
        for j in range(dim):
            h_srv[j] += beta * mtmp[j]
    else:
        for j in range(dim):
            gtmp[j] = 0.0
        for i in range(n):
            for j in range(dim):
                gtmp[j] += msgs[i, j]
        for j in range(dim):
            gtmp[j] /= np.float64(n)

    for j in range(dim):
        x[j] -= gamma * gtmp[j]

    if primal_kind == K_IDENTITY:
        # identity downlink: w + (x - w) == x exactly, take the shortcut
        for j in range(dim):
            w[j] = x[j]
            ptmp[j] = x[j] - w[j]
    else:
        for j in range(dim):
            dtmp[j] = x[j] - w[j]
        compress_into(
            dtmp, primal_kind, k_primal, c_primal, seed, R_PRIMAL, 0, t,
            ptmp, sidx, spool,
        )
        for j in range(dim):
            w[j] += ptmp[j]


@maybe_njit()
def run_chunk(
    pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
    n, x, w, h, h_srv,
    use_shifts, beta, gamma,
    dual_kind, k_dual, c_dual,
    primal_kind, k_primal, c_primal,
    seed, t0, nrounds, batch, sigma,
    stop_mode, stop_eps, f_guard, f_star,
    grads, msgs, vtmp, widx, wpool, logits,
    gtmp, mtmp, dtmp, ptmp, gbar, sidx, spool,
):
    """Run up to nrounds rounds starting at round t0.

    Returns (t_end, status, min_grad_norm_sq).  With a stop rule active the
    exact full gradient at x^t is evaluated before every round (diagnostic
    only; the algorithm itself never sees it).
    """
    min_gnsq = np.inf
    t = t0
    for _ in range(nrounds):
        if stop_mode > 0:
            fx = eval_mean_value_grad(
                pkind, qA, qB, X, y, wptr, ncls, dfeat, lam, x, gbar, gtmp, logits[0]
            )
            gnsq = sq_norm(gbar)
            if not np.isfinite(fx) or fx > f_guard:
                return t, S_DIVERGED, min_gnsq
            if gnsq < min_gnsq:
                min_gnsq = gnsq
            if stop_mode == 1 and gnsq <= stop_eps:
                return t, S_STOPPED, min_gnsq
            if stop_mode == 2 and fx - f_star <= stop_eps:
                return t, S_STOPPED, min_gnsq
        worker_phase(
            pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
            n, w, h, use_shifts, beta,
            dual_kind, k_dual, c_dual,
            seed, t, batch, sigma,
            grads, msgs, vtmp, widx, wpool, logits,
        )
        server_phase(
            n, grads, msgs, h_srv, x, w, gamma, beta,
            use_shifts, dual_kind,
            primal_kind, k_primal, c_primal,
            seed, t,
            gtmp, mtmp, dtmp, ptmp, sidx, spool,
        )
        t += 1
    return t, S_RAN, min_gnsq


@maybe_njit()
def gd_to_stationarity(
    pkind, qA, qB, X, y, wptr, ncls, dfeat, lam,
    x, gamma, tol_sq, max_iters, gbar, gtmp, logits,
):
    """Plain full-gradient descent until ||grad f|| <= tol; reference solver."""
    for it in range(max_iters):
        eval_mean_value_grad(pkind, qA, qB, X, y, wptr, ncls, dfeat, lam, x, gbar, gtmp, logits)
        if sq_norm(gbar) <= tol_sq:
            return it, True
        for j in range(x.shape[0]):
            x[j] -= gamma * gbar[j]
    return max_iters, False
