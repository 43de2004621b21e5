"""Hot numeric kernels for the bag transformer: forward pass and fused
forward/backward. Written once in numba-compatible numpy; compiled with
@njit unless MELTRIAGE_BACKEND=numpy selects the identical source as plain
Python. See meltriage.backend.

Conventions shared by both kernels:

- Parameters and gradients are flat vectors; ``offs`` holds each tensor's
  start offset in definition order plus an end sentinel (see ParamLayout).
- The sequence is the classification token at row 0 followed by the tiles.
  The token is excluded from attention keys: every query attends over tiles
  only. That keeps the token's output a pure tile average, so duplicating
  every tile leaves the prediction unchanged, and bags stay comparable
  across wildly different tile counts.
- Numeric scalars (eps, softmax scale, dropout rescale, small constants)
  arrive in the ``consts`` array, pre-cast to the parameter dtype. Mixing
  python float literals into float32 arrays would silently promote every
  intermediate to float64 under numba, diverging from the numpy backend.
- ``drop_mask`` is a (n_layers, n_heads, S, S) keep-mask applied to the
  post-softmax attention matrix with surviving entries rescaled by
  1/(1-p). When ``use_dropout`` is false the array is never touched and
  may be empty. The same mask drives forward and backward.
- ``flags`` reports finiteness per stage: [0] embedding, [1+l] block l,
  [-1] final norm and head. The wrapper turns a zero into a numeric error
  naming the layer.

consts layout:
    0 ln_eps   1 attn_scale (1/sqrt(head_dim))   2 inv_keep (1/(1-p))
    3 one      4 half      5 gelu_c1 (sqrt(2/pi))   6 gelu_c2 (0.044715)
    7 inv_model_dim   8 gelu_c3 (3*gelu_c2)   9 inv_n_heads
"""

from __future__ import annotations

import math

import numpy as np

from ..backend import jit_compile


@jit_compile
def _ln_rows(x, gain, bias, eps, one, inv_d):
    """Row-wise layer norm; returns (y, xhat, inv_std) for the backward."""
    S = x.shape[0]
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(S, dtype=x.dtype)
    for i in range(S):
        mu = x[i].sum() * inv_d
        cen = x[i] - mu
        var = (cen * cen).sum() * inv_d
        istd = one / np.sqrt(var + eps)
        xh = cen * istd
        xhat[i] = xh
        inv_std[i] = istd
        y[i] = gain * xh + bias
    return y, xhat, inv_std


@jit_compile
def _ln_rows_backward(dy, xhat, inv_std, gain, inv_d):
    """Gradient through row-wise layer norm w.r.t. its input."""
    S = dy.shape[0]
    dx = np.empty_like(dy)
    for i in range(S):
        dxh = dy[i] * gain
        mn1 = dxh.sum() * inv_d
        mn2 = (dxh * xhat[i]).sum() * inv_d
        dx[i] = inv_std[i] * (dxh - mn1 - xhat[i] * mn2)
    return dx


@jit_compile
def _gelu_fwd(h, one, half, c1, c2):
    u = c1 * (h + c2 * h * h * h)
    return half * h * (one + np.tanh(u))


@jit_compile
def _gelu_bwd(h, one, half, c1, c2, c3):
    u = c1 * (h + c2 * h * h * h)
    t = np.tanh(u)
    du = c1 * (one + c3 * h * h)
    return half * (one + t) + half * h * (one - t * t) * du


@jit_compile
def _masked_softmax(scores):
    """Row softmax over columns 1.. only; column 0 (the class token as a
    key) is excluded exactly rather than via a large negative fill."""
    S = scores.shape[0]
    out = np.empty_like(scores)
    for i in range(S):
        m = scores[i, 1:].max()
        e = np.exp(scores[i, 1:] - m)
        out[i, 0] = 0.0
        out[i, 1:] = e / e.sum()
    return out


@jit_compile
def _forward_impl(
    params,
    offs,
    feats,
    n_layers,
    n_heads,
    model_dim,
    hidden_dim,
    n_classes,
    consts,
    drop_mask,
    use_dropout,
):
    T = feats.shape[0]
    F = feats.shape[1]
    S = T + 1
    D = model_dim
    hd = D // n_heads
    eps = consts[0]
    scale = consts[1]
    inv_keep = consts[2]
    one = consts[3]
    half = consts[4]
    c1 = consts[5]
    c2 = consts[6]
    inv_d = consts[7]
    inv_heads = consts[9]

    flags = np.ones(n_layers + 2, dtype=np.int64)

    we = params[offs[0] : offs[1]].reshape(F, D)
    be = params[offs[1] : offs[2]]
    cls = params[offs[2] : offs[3]]
    x = np.empty((S, D), dtype=params.dtype)
    x[0] = cls
    x[1:] = feats @ we + be
    if not np.isfinite(x).all():
        flags[0] = 0

    attn_avg = np.zeros(T, dtype=params.dtype)
    for l in range(n_layers):
        base = 3 + 16 * l
        g1 = params[offs[base] : offs[base + 1]]
        b1 = params[offs[base + 1] : offs[base + 2]]
        wq = params[offs[base + 2] : offs[base + 3]].reshape(D, D)
        bq = params[offs[base + 3] : offs[base + 4]]
        wk = params[offs[base + 4] : offs[base + 5]].reshape(D, D)
        bk = params[offs[base + 5] : offs[base + 6]]
        wv = params[offs[base + 6] : offs[base + 7]].reshape(D, D)
        bv = params[offs[base + 7] : offs[base + 8]]
        wo = params[offs[base + 8] : offs[base + 9]].reshape(D, D)
        bo = params[offs[base + 9] : offs[base + 10]]
        g2 = params[offs[base + 10] : offs[base + 11]]
        b2 = params[offs[base + 11] : offs[base + 12]]
        w1 = params[offs[base + 12] : offs[base + 13]].reshape(D, hidden_dim)
        b1m = params[offs[base + 13] : offs[base + 14]]
        w2 = params[offs[base + 14] : offs[base + 15]].reshape(hidden_dim, D)
        b2m = params[offs[base + 15] : offs[base + 16]]

        y1, _, _ = _ln_rows(x, g1, b1, eps, one, inv_d)
        q = y1 @ wq + bq
        k = y1 @ wk + bk
        v = y1 @ wv + bv
        ctx = np.empty((S, D), dtype=params.dtype)
        for h in range(n_heads):
            lo = h * hd
            qh = np.ascontiguousarray(q[:, lo : lo + hd])
            kh = np.ascontiguousarray(k[:, lo : lo + hd])
            vh = np.ascontiguousarray(v[:, lo : lo + hd])
            scores = (qh @ np.ascontiguousarray(kh.T)) * scale
            pr = _masked_softmax(scores)
            if l == n_layers - 1:
                attn_avg += pr[0, 1:] * inv_heads
            if use_dropout:
                pd = pr * drop_mask[l, h] * inv_keep
            else:
                pd = pr
            ctx[:, lo : lo + hd] = pd @ vh
        x = x + ctx @ wo + bo
        y2, _, _ = _ln_rows(x, g2, b2, eps, one, inv_d)
        hpre = y2 @ w1 + b1m
        act = _gelu_fwd(hpre, one, half, c1, c2)
        x = x + act @ w2 + b2m
        if not np.isfinite(x).all():
            flags[1 + l] = 0

    nbase = 3 + 16 * n_layers
    gf = params[offs[nbase] : offs[nbase + 1]]
    bf = params[offs[nbase + 1] : offs[nbase + 2]]
    wh = params[offs[nbase + 2] : offs[nbase + 3]].reshape(D, n_classes)
    bh = params[offs[nbase + 3] : offs[nbase + 4]]
    # only the class-token row feeds the head, so normalize just that row
    row = x[0]
    mu = row.sum() * inv_d
    cen = row - mu
    var = (cen * cen).sum() * inv_d
    istd = one / np.sqrt(var + eps)
    pooled = gf * (cen * istd) + bf
    logits = (pooled.reshape(1, D) @ wh)[0] + bh
    if not (np.isfinite(logits).all() and np.isfinite(attn_avg).all()):
        flags[n_layers + 1] = 0
    return logits, attn_avg, pooled, flags


@jit_compile
def _loss_grad_impl(
    params,
    offs,
    feats,
    label_idx,
    n_layers,
    n_heads,
    model_dim,
    hidden_dim,
    n_classes,
    consts,
    drop_mask,
    use_dropout,
    grad_out,
):
    T = feats.shape[0]
    F = feats.shape[1]
    S = T + 1
    D = model_dim
    H = hidden_dim
    hd = D // n_heads
    L = n_layers
    dt = params.dtype
    eps = consts[0]
    scale = consts[1]
    inv_keep = consts[2]
    one = consts[3]
    half = consts[4]
    c1 = consts[5]
    c2 = consts[6]
    inv_d = consts[7]
    c3 = consts[8]

    flags = np.ones(L + 2, dtype=np.int64)

    # ---- forward, keeping what the backward needs ----
    we = params[offs[0] : offs[1]].reshape(F, D)
    be = params[offs[1] : offs[2]]
    cls = params[offs[2] : offs[3]]
    xs = np.empty((L + 1, S, D), dtype=dt)
    xs[0, 0] = cls
    xs[0, 1:] = feats @ we + be
    if not np.isfinite(xs[0]).all():
        flags[0] = 0

    y1s = np.empty((L, S, D), dtype=dt)
    xhat1s = np.empty((L, S, D), dtype=dt)
    istd1s = np.empty((L, S), dtype=dt)
    qs = np.empty((L, S, D), dtype=dt)
    ks = np.empty((L, S, D), dtype=dt)
    vs = np.empty((L, S, D), dtype=dt)
    prs = np.empty((L, n_heads, S, S), dtype=dt)  # pre-dropout attention
    ctxs = np.empty((L, S, D), dtype=dt)
    xmids = np.empty((L, S, D), dtype=dt)
    y2s = np.empty((L, S, D), dtype=dt)
    xhat2s = np.empty((L, S, D), dtype=dt)
    istd2s = np.empty((L, S), dtype=dt)
    hpres = np.empty((L, S, H), dtype=dt)
    acts = np.empty((L, S, H), dtype=dt)

    for l in range(L):
        base = 3 + 16 * l
        g1 = params[offs[base] : offs[base + 1]]
        b1 = params[offs[base + 1] : offs[base + 2]]
        wq = params[offs[base + 2] : offs[base + 3]].reshape(D, D)
        bq = params[offs[base + 3] : offs[base + 4]]
        wk = params[offs[base + 4] : offs[base + 5]].reshape(D, D)
        bk = params[offs[base + 5] : offs[base + 6]]
        wv = params[offs[base + 6] : offs[base + 7]].reshape(D, D)
        bv = params[offs[base + 7] : offs[base + 8]]
        wo = params[offs[base + 8] : offs[base + 9]].reshape(D, D)
        bo = params[offs[base + 9] : offs[base + 10]]
        g2 = params[offs[base + 10] : offs[base + 11]]
        b2 = params[offs[base + 11] : offs[base + 12]]
        w1 = params[offs[base + 12] : offs[base + 13]].reshape(D, H)
        b1m = params[offs[base + 13] : offs[base + 14]]
        w2 = params[offs[base + 14] : offs[base + 15]].reshape(H, D)
        b2m = params[offs[base + 15] : offs[base + 16]]

        y1, xh1, is1 = _ln_rows(xs[l], g1, b1, eps, one, inv_d)
        y1s[l] = y1
        xhat1s[l] = xh1
        istd1s[l] = is1
        q = y1 @ wq + bq
        k = y1 @ wk + bk
        v = y1 @ wv + bv
        qs[l] = q
        ks[l] = k
        vs[l] = v
        ctx = np.empty((S, D), dtype=dt)
        for h in range(n_heads):
            lo = h * hd
            qh = np.ascontiguousarray(q[:, lo : lo + hd])
            kh = np.ascontiguousarray(k[:, lo : lo + hd])
            vh = np.ascontiguousarray(v[:, lo : lo + hd])
            scores = (qh @ np.ascontiguousarray(kh.T)) * scale
            pr = _masked_softmax(scores)
            prs[l, h] = pr
            if use_dropout:
                pd = pr * drop_mask[l, h] * inv_keep
            else:
                pd = pr
            ctx[:, lo : lo + hd] = pd @ vh
        ctxs[l] = ctx
        xmid = xs[l] + ctx @ wo + bo
        xmids[l] = xmid
        y2, xh2, is2 = _ln_rows(xmid, g2, b2, eps, one, inv_d)
        y2s[l] = y2
        xhat2s[l] = xh2
        istd2s[l] = is2
        hpre = y2 @ w1 + b1m
        hpres[l] = hpre
        act = _gelu_fwd(hpre, one, half, c1, c2)
        acts[l] = act
        xs[l + 1] = xmid + act @ w2 + b2m
        if not np.isfinite(xs[l + 1]).all():
            flags[1 + l] = 0

    nbase = 3 + 16 * L
    gf = params[offs[nbase] : offs[nbase + 1]]
    bf = params[offs[nbase + 1] : offs[nbase + 2]]
    wh = params[offs[nbase + 2] : offs[nbase + 3]].reshape(D, n_classes)
    bh = params[offs[nbase + 3] : offs[nbase + 4]]
    row = xs[L, 0]
    mu = row.sum() * inv_d
    cen = row - mu
    var = (cen * cen).sum() * inv_d
    istd_f = one / np.sqrt(var + eps)
    xhat_f = cen * istd_f
    pooled = gf * xhat_f + bf
    logits = (pooled.reshape(1, D) @ wh)[0] + bh
    if not np.isfinite(logits).all():
        flags[L + 1] = 0

    # ---- loss and logit gradient, in 64-bit regardless of storage ----
    m = float(logits[0])
    for c in range(1, n_classes):
        zc = float(logits[c])
        if zc > m:
            m = zc
    esum = 0.0
    for c in range(n_classes):
        esum += math.exp(float(logits[c]) - m)
    lse = m + math.log(esum)
    loss = lse - float(logits[label_idx])
    dz = np.empty(n_classes, dtype=dt)
    for c in range(n_classes):
        p = math.exp(float(logits[c]) - lse)
        if c == label_idx:
            dz[c] = p - 1.0
        else:
            dz[c] = p

    # ---- backward ----
    g_wh = grad_out[offs[nbase + 2] : offs[nbase + 3]].reshape(D, n_classes)
    g_wh[:, :] = np.outer(pooled, dz)
    g_bh = grad_out[offs[nbase + 3] : offs[nbase + 4]]
    g_bh[:] = dz
    dy0 = (wh @ dz.reshape(n_classes, 1)).reshape(D)
    g_gf = grad_out[offs[nbase] : offs[nbase + 1]]
    g_gf[:] = dy0 * xhat_f
    g_bf = grad_out[offs[nbase + 1] : offs[nbase + 2]]
    g_bf[:] = dy0
    dxh = dy0 * gf
    mn1 = dxh.sum() * inv_d
    mn2 = (dxh * xhat_f).sum() * inv_d
    dx = np.zeros((S, D), dtype=dt)
    dx[0] = istd_f * (dxh - mn1 - xhat_f * mn2)

    for l in range(L - 1, -1, -1):
        base = 3 + 16 * l
        g1 = params[offs[base] : offs[base + 1]]
        wq = params[offs[base + 2] : offs[base + 3]].reshape(D, D)
        wk = params[offs[base + 4] : offs[base + 5]].reshape(D, D)
        wv = params[offs[base + 6] : offs[base + 7]].reshape(D, D)
        wo = params[offs[base + 8] : offs[base + 9]].reshape(D, D)
        g2 = params[offs[base + 10] : offs[base + 11]]
        w1 = params[offs[base + 12] : offs[base + 13]].reshape(D, H)
        w2 = params[offs[base + 14] : offs[base + 15]].reshape(H, D)

        # MLP half of the block
        dact = dx @ np.ascontiguousarray(w2.T)
        g = grad_out[offs[base + 14] : offs[base + 15]].reshape(H, D)
        g[:, :] = np.ascontiguousarray(acts[l].T) @ dx
        g = grad_out[offs[base + 15] : offs[base + 16]]
        g[:] = dx.sum(axis=0)
        dhpre = dact * _gelu_bwd(hpres[l], one, half, c1, c2, c3)
        g = grad_out[offs[base + 12] : offs[base + 13]].reshape(D, H)
        g[:, :] = np.ascontiguousarray(y2s[l].T) @ dhpre
        g = grad_out[offs[base + 13] : offs[base + 14]]
        g[:] = dhpre.sum(axis=0)
        dy2 = dhpre @ np.ascontiguousarray(w1.T)
        g = grad_out[offs[base + 10] : offs[base + 11]]
        g[:] = (dy2 * xhat2s[l]).sum(axis=0)
        g = grad_out[offs[base + 11] : offs[base + 12]]
        g[:] = dy2.sum(axis=0)
        dxmid = _ln_rows_backward(dy2, xhat2s[l], istd2s[l], g2, inv_d)
        dxmid += dx  # residual path around the MLP

        # attention half
        g = grad_out[offs[base + 8] : offs[base + 9]].reshape(D, D)
        g[:, :] = np.ascontiguousarray(ctxs[l].T) @ dxmid
        g = grad_out[offs[base + 9] : offs[base + 10]]
        g[:] = dxmid.sum(axis=0)
        dctx = dxmid @ np.ascontiguousarray(wo.T)
        dq = np.empty((S, D), dtype=dt)
        dk = np.empty((S, D), dtype=dt)
        dv = np.empty((S, D), dtype=dt)
        for h in range(n_heads):
            lo = h * hd
            qh = np.ascontiguousarray(qs[l][:, lo : lo + hd])
            kh = np.ascontiguousarray(ks[l][:, lo : lo + hd])
            vh = np.ascontiguousarray(vs[l][:, lo : lo + hd])
            pr = prs[l, h]
            dctx_h = np.ascontiguousarray(dctx[:, lo : lo + hd])
            if use_dropout:
                pd = pr * drop_mask[l, h] * inv_keep
            else:
                pd = pr
            dpd = dctx_h @ np.ascontiguousarray(vh.T)
            dv[:, lo : lo + hd] = np.ascontiguousarray(pd.T) @ dctx_h
            if use_dropout:
                dpr = dpd * drop_mask[l, h] * inv_keep
            else:
                dpr = dpd
            ds = np.empty((S, S), dtype=dt)
            for i in range(S):
                pri = pr[i, 1:]
                dpri = dpr[i, 1:]
                tot = (pri * dpri).sum()
                ds[i, 0] = 0.0
                ds[i, 1:] = pri * (dpri - tot)
            ds = ds * scale
            dq[:, lo : lo + hd] = ds @ kh
            dk[:, lo : lo + hd] = np.ascontiguousarray(ds.T) @ qh
        g = grad_out[offs[base + 2] : offs[base + 3]].reshape(D, D)
        g[:, :] = np.ascontiguousarray(y1s[l].T) @ dq
        g = grad_out[offs[base + 3] : offs[base + 4]]
        g[:] = dq.sum(axis=0)
        g = grad_out[offs[base + 4] : offs[base + 5]].reshape(D, D)
        g[:, :] = np.ascontiguousarray(y1s[l].T) @ dk
        g = grad_out[offs[base + 5] : offs[base + 6]]
        g[:] = dk.sum(axis=0)
        g = grad_out[offs[base + 6] : offs[base + 7]].reshape(D, D)
        g[:, :] = np.ascontiguousarray(y1s[l].T) @ dv
        g = grad_out[offs[base + 7] : offs[base + 8]]
        g[:] = dv.sum(axis=0)
        dy1 = (
            dq @ np.ascontiguousarray(wq.T)
            + dk @ np.ascontiguousarray(wk.T)
            + dv @ np.ascontiguousarray(wv.T)
        )
        g = grad_out[offs[base] : offs[base + 1]]
        g[:] = (dy1 * xhat1s[l]).sum(axis=0)
        g = grad_out[offs[base + 1] : offs[base + 2]]
        g[:] = dy1.sum(axis=0)
        dxin = _ln_rows_backward(dy1, xhat1s[l], istd1s[l], g1, inv_d)
        dx = dxin + dxmid  # residual path around attention

    g = grad_out[offs[2] : offs[3]]
    g[:] = dx[0]
    g = grad_out[offs[0] : offs[1]].reshape(F, D)
    g[:, :] = np.ascontiguousarray(feats.T) @ dx[1:]
    g = grad_out[offs[1] : offs[2]]
    g[:] = dx[1:].sum(axis=0)
    return loss, flags


forward_kernel = _forward_impl
loss_grad_kernel = _loss_grad_impl
