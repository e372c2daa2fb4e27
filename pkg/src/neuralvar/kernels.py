"""Hot elementwise kernels with numba-jitted and pure-numpy implementations.

Matrix products go through BLAS and are not reimplemented here; everything
else that touches every weight once per step (ReLU, fused softmax
cross-entropy, SGD/Adam updates) lives in this module.

Set NV_NO_NUMBA=1 to force the pure-numpy path (also the automatic fallback
when numba is unavailable). Both paths implement the same arithmetic; see
benchmarks/bench_kernels.py for a speed comparison.
"""

import os

import numpy as np

__all__ = [
    "USE_NUMBA",
    "relu_fwd",
    "relu_bwd",
    "softmax_xent_fwd",
    "softmax_xent_bwd",
    "sgd_delta",
    "adam_delta",
    "ewc_penalty",
    "gaussian_fill",
    "nvrm_sgd_apply",
    "nvrm_adam_apply",
    "sgd_apply",
    "adam_apply",
]


# ---------------------------------------------------------------------------
# pure-numpy reference implementations


def _relu_fwd_np(x):
    return np.maximum(x, 0.0)


def _relu_bwd_np(x, gout):
    return np.where(x > 0.0, gout, 0.0)


def _softmax_xent_fwd_np(logits, labels):
    """Mean cross-entropy over rows, max-subtracted for stability.

    Returns (mean_loss, probs); probs is reused by the backward pass.
    """
    m = np.max(logits, axis=1)
    z = logits - m[:, None]
    ez = np.exp(z)
    sez = np.sum(ez, axis=1)
    probs = ez / sez[:, None]
    n = logits.shape[0]
    rows = np.arange(n)
    losses = np.log(sez) - z[rows, labels]
    return losses.sum() / n, probs


def _softmax_xent_bwd_np(probs, labels, gout):
    n = probs.shape[0]
    g = probs * (gout / n)
    g[np.arange(n), labels] -= gout / n
    return g


def _ewc_penalty_np(theta, a, b, c):
    """Quadratic penalty 0.5*sum(a*theta^2 - 2*b*theta + c) and its gradient
    a*theta - b, evaluated in one shot (see continual.EwcPenalty)."""
    g = a * theta - b
    val = 0.5 * float(np.sum(theta * g - b * theta + c, dtype=np.float64))
    return val, g


def _sgd_delta_np(param, grad, vel, lr, mom, wd):
    """v <- mom*v + g + wd*p (in place); returns -lr*v."""
    vel *= mom
    vel += grad
    if wd != 0.0:
        vel += wd * param
    return -lr * vel


def _adam_delta_np(param, grad, m, v, lr, b1, b2, omb1, omb2, c1, c2, eps, wd):
    """Adam with coupled L2 decay; moments updated in place, returns the step.

    Callers pass omb1 = 1-b1, omb2 = 1-b2 and the bias corrections
    c1 = 1-b1^t, c2 = 1-b2^t pre-cast to the parameter dtype so f32 training
    never round-trips through f64 (see optim._adam_deltas).
    """
    if wd != 0.0:
        grad = grad + wd * param
    m *= b1
    m += omb1 * grad
    v *= b2
    v += omb2 * grad * grad
    mhat = m / c1
    vhat = v / c2
    return -lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# gaussian sampling
#
# Per-step weight perturbation draws one gaussian per trainable scalar, which
# makes the sampler as hot as the gemms. The jitted path is a 256-layer
# ziggurat over a xoshiro256++ stream (~4x numpy's rate on one core); the
# numpy path seeds a fresh SFC64 from the same 4-word state. The two paths
# produce different (equally valid) streams; each is deterministic in the
# state, which callers derive from their seeded generator.

_ZIG_R = 3.6541528853610088  # rightmost layer edge for 256 layers
_ZIG_V = 0.00492867323399  # per-layer area


def _zig_tables():
    x = np.empty(257)
    x[256] = _ZIG_V * np.exp(0.5 * _ZIG_R * _ZIG_R)
    x[255] = _ZIG_R
    for i in range(254, 0, -1):
        x[i] = np.sqrt(-2.0 * np.log(_ZIG_V / x[i + 1] + np.exp(-0.5 * x[i + 1] ** 2)))
    x[0] = 0.0
    return x, np.exp(-0.5 * x[:256] ** 2)


_ZIG_X, _ZIG_F = _zig_tables()


def _gaussian_fill_np(out, state, scale):
    g = np.random.Generator(np.random.SFC64(state.tolist()))
    g.standard_normal(out=out, dtype=out.dtype)
    out *= out.dtype.type(scale)
    state[:] = g.bit_generator.random_raw(4)  # advance so repeat calls differ


def _sgd_apply_np(param, grad, vel, lr, mom, wd):
    param += _sgd_delta_np(param, grad, vel, lr, mom, wd)


def _adam_apply_np(param, grad, m, v, lr, b1, b2, omb1, omb2, c1, c2, eps, wd):
    param += _adam_delta_np(param, grad, m, v, lr, b1, b2, omb1, omb2, c1, c2, eps, wd)


def _nvrm_sgd_np(stored, clean, eps, grad, vel, state, lr, mom, wd, scale):
    """Inner SGD delta (at the stored, i.e. perturbed, weights) applied to the
    clean weights, then stored = clean + fresh noise — all state in place."""
    clean += _sgd_delta_np(stored, grad, vel, lr, mom, wd)
    _gaussian_fill_np(eps, state, scale)
    np.add(clean, eps, out=stored)


def _nvrm_adam_np(stored, clean, eps, grad, m, v, state,
                  lr, b1, b2, omb1, omb2, c1, c2, aeps, wd, scale):
    clean += _adam_delta_np(stored, grad, m, v, lr, b1, b2, omb1, omb2, c1, c2, aeps, wd)
    _gaussian_fill_np(eps, state, scale)
    np.add(clean, eps, out=stored)


# ---------------------------------------------------------------------------
# numba implementations (explicit loops; same arithmetic per element)

USE_NUMBA = os.environ.get("NV_NO_NUMBA", "").strip() not in ("1", "true", "yes")
if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if USE_NUMBA:
    _jit = numba.njit(cache=True)
    # optimizer/penalty updates tolerate reassociation; softmax does not
    _jit_fast = numba.njit(cache=True, fastmath=True)

    @_jit
    def _relu_fwd_nb(x):
        out = np.empty_like(x)
        xf = x.ravel()
        of = out.ravel()
        for i in range(xf.size):
            of[i] = xf[i] if xf[i] > 0.0 else 0.0
        return out

    @_jit
    def _relu_bwd_nb(x, gout):
        out = np.empty_like(gout)
        xf = x.ravel()
        gf = gout.ravel()
        of = out.ravel()
        for i in range(xf.size):
            of[i] = gf[i] if xf[i] > 0.0 else 0.0
        return out

    @_jit
    def _softmax_xent_fwd_nb(logits, labels):
        n, c = logits.shape
        probs = np.empty_like(logits)
        total = 0.0
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, c):
                if logits[i, j] > m:
                    m = logits[i, j]
            sez = 0.0
            for j in range(c):
                e = np.exp(logits[i, j] - m)
                probs[i, j] = e
                sez += e
            for j in range(c):
                probs[i, j] /= sez
            total += np.log(sez) - (logits[i, labels[i]] - m)
        return total / n, probs

    @_jit
    def _softmax_xent_bwd_nb(probs, labels, gout):
        n, c = probs.shape
        g = np.empty_like(probs)
        s = gout / n
        for i in range(n):
            for j in range(c):
                g[i, j] = probs[i, j] * s
            g[i, labels[i]] -= s
        return g

    @_jit_fast
    def _gaussian_fill_nb(out, state, scale, xtab, ftab):
        s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
        n = out.size
        i = 0
        while i < n:
            # xoshiro256++ next()
            r = s0 + s3
            u64 = ((r << np.uint64(23)) | (r >> np.uint64(41))) + s0
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
            idx = np.int64(u64 & np.uint64(255))
            sign = 1.0 if (u64 & np.uint64(256)) else -1.0
            u = np.float64(np.int64(u64 >> np.uint64(12)) >> 1) * 4.440892098500626e-16
            xv = u * xtab[idx + 1]
            if xv < xtab[idx]:  # fully inside the layer: accept
                out[i] = sign * xv * scale
                i += 1
                continue
            if idx == 255:  # base layer: sample the tail x > R by rejection
                while True:
                    r = s0 + s3
                    a64 = ((r << np.uint64(23)) | (r >> np.uint64(41))) + s0
                    t = s1 << np.uint64(17)
                    s2 ^= s0
                    s3 ^= s1
                    s1 ^= s2
                    s0 ^= s3
                    s2 ^= t
                    s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
                    u1 = (np.float64(a64 >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
                    r = s0 + s3
                    b64 = ((r << np.uint64(23)) | (r >> np.uint64(41))) + s0
                    t = s1 << np.uint64(17)
                    s2 ^= s0
                    s3 ^= s1
                    s1 ^= s2
                    s0 ^= s3
                    s2 ^= t
                    s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
                    u2 = (np.float64(b64 >> np.uint64(11)) + 0.5) * 1.1102230246251565e-16
                    xx = -np.log(u1) / xtab[255]
                    if -2.0 * np.log(u2) > xx * xx:
                        out[i] = sign * (xtab[255] + xx) * scale
                        i += 1
                        break
                continue
            # wedge between the layer rectangle and the density curve
            r = s0 + s3
            c64 = ((r << np.uint64(23)) | (r >> np.uint64(41))) + s0
            t = s1 << np.uint64(17)
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = (s3 << np.uint64(45)) | (s3 >> np.uint64(19))
            uu = np.float64(c64 >> np.uint64(11)) * 1.1102230246251565e-16
            if ftab[idx + 1] + uu * (ftab[idx] - ftab[idx + 1]) < np.exp(-0.5 * xv * xv):
                out[i] = sign * xv * scale
                i += 1
        state[0], state[1], state[2], state[3] = s0, s1, s2, s3

    def _gaussian_fill_jit(out, state, scale):
        _gaussian_fill_nb(out, state, float(scale), _ZIG_X, _ZIG_F)

    @_jit_fast
    def _sgd_apply_nb(param, grad, vel, lr, mom, wd):
        pf = param.ravel()
        gf = grad.ravel()
        vf = vel.ravel()
        for i in range(pf.size):
            vf[i] = mom * vf[i] + gf[i] + wd * pf[i]
            d = -lr * vf[i]
            pf[i] = pf[i] + d

    @_jit_fast
    def _adam_apply_nb(param, grad, m, v, lr, b1, b2, omb1, omb2, c1, c2, eps, wd):
        pf = param.ravel()
        gf = grad.ravel()
        mf = m.ravel()
        vf = v.ravel()
        for i in range(pf.size):
            g = gf[i] + wd * pf[i]
            mf[i] = b1 * mf[i] + omb1 * g
            vf[i] = b2 * vf[i] + omb2 * g * g
            d = -lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + eps)
            pf[i] = pf[i] + d

    @_jit_fast
    def _nvrm_sgd_core(stored, clean, eps, grad, vel, lr, mom, wd):
        sf = stored.ravel()
        cf = clean.ravel()
        ef = eps.ravel()
        gf = grad.ravel()
        vf = vel.ravel()
        for i in range(sf.size):
            vf[i] = mom * vf[i] + gf[i] + wd * sf[i]
            c = cf[i] - lr * vf[i]
            cf[i] = c
            sf[i] = c + ef[i]

    @_jit_fast
    def _nvrm_adam_core(stored, clean, eps, grad, m, v,
                        lr, b1, b2, omb1, omb2, c1, c2, aeps, wd):
        sf = stored.ravel()
        cf = clean.ravel()
        ef = eps.ravel()
        gf = grad.ravel()
        mf = m.ravel()
        vf = v.ravel()
        for i in range(sf.size):
            g = gf[i] + wd * sf[i]
            mf[i] = b1 * mf[i] + omb1 * g
            vf[i] = b2 * vf[i] + omb2 * g * g
            c = cf[i] - lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + aeps)
            cf[i] = c
            sf[i] = c + ef[i]

    def _nvrm_sgd_jit(stored, clean, eps, grad, vel, state, lr, mom, wd, scale):
        _gaussian_fill_nb(eps.ravel(), state, float(scale), _ZIG_X, _ZIG_F)
        _nvrm_sgd_core(stored, clean, eps, grad, vel, lr, mom, wd)

    def _nvrm_adam_jit(stored, clean, eps, grad, m, v, state,
                       lr, b1, b2, omb1, omb2, c1, c2, aeps, wd, scale):
        _gaussian_fill_nb(eps.ravel(), state, float(scale), _ZIG_X, _ZIG_F)
        _nvrm_adam_core(stored, clean, eps, grad, m, v,
                        lr, b1, b2, omb1, omb2, c1, c2, aeps, wd)

    # no fastmath here: FMA contraction of a*theta - b would break the exact
    # cancellation that makes the penalty bitwise zero at the anchor
    @_jit
    def _ewc_penalty_nb(theta, a, b, c):
        g = np.empty_like(theta)
        tf = theta.ravel()
        af = a.ravel()
        bf = b.ravel()
        cf = c.ravel()
        gf = g.ravel()
        val = 0.0
        for i in range(tf.size):
            gi = af[i] * tf[i] - bf[i]
            gf[i] = gi
            val += tf[i] * gi - bf[i] * tf[i] + cf[i]
        return 0.5 * val, g

    @_jit_fast
    def _sgd_delta_nb(param, grad, vel, lr, mom, wd):
        delta = np.empty_like(param)
        pf = param.ravel()
        gf = grad.ravel()
        vf = vel.ravel()
        df = delta.ravel()
        for i in range(pf.size):
            vf[i] = mom * vf[i] + gf[i] + wd * pf[i]
            df[i] = -lr * vf[i]
        return delta

    @_jit_fast
    def _adam_delta_nb(param, grad, m, v, lr, b1, b2, omb1, omb2, c1, c2, eps, wd):
        delta = np.empty_like(param)
        pf = param.ravel()
        gf = grad.ravel()
        mf = m.ravel()
        vf = v.ravel()
        df = delta.ravel()
        for i in range(pf.size):
            g = gf[i] + wd * pf[i]
            mf[i] = b1 * mf[i] + omb1 * g
            vf[i] = b2 * vf[i] + omb2 * g * g
            df[i] = -lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + eps)
        return delta


# ---------------------------------------------------------------------------
# dispatch

if USE_NUMBA:
    relu_fwd = _relu_fwd_nb
    relu_bwd = _relu_bwd_nb
    softmax_xent_fwd = _softmax_xent_fwd_nb
    softmax_xent_bwd = _softmax_xent_bwd_nb
    sgd_delta = _sgd_delta_nb
    adam_delta = _adam_delta_nb
    ewc_penalty = _ewc_penalty_nb
    gaussian_fill = _gaussian_fill_jit
    nvrm_sgd_apply = _nvrm_sgd_jit
    nvrm_adam_apply = _nvrm_adam_jit
    sgd_apply = _sgd_apply_nb
    adam_apply = _adam_apply_nb
else:
    relu_fwd = _relu_fwd_np
    relu_bwd = _relu_bwd_np
    softmax_xent_fwd = _softmax_xent_fwd_np
    softmax_xent_bwd = _softmax_xent_bwd_np
    sgd_delta = _sgd_delta_np
    adam_delta = _adam_delta_np
    ewc_penalty = _ewc_penalty_np
    gaussian_fill = _gaussian_fill_np
    nvrm_sgd_apply = _nvrm_sgd_np
    nvrm_adam_apply = _nvrm_adam_np
    sgd_apply = _sgd_apply_np
    adam_apply = _adam_apply_np
