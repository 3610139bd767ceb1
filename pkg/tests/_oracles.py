"""Independent reference implementations used as test oracles."""

import numpy as np

from fadsr import tensor as T


def naive_conv2d(x, w, b=None):
    """Direct six-loop zero-padded cross-correlation."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, co, h, wd), dtype=np.float64)
    for i in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(wd):
                    out[i, o, y, xx] = np.sum(xp[i, :, y:y + k, xx:xx + k] * w[o])
            if b is not None:
                out[i, o] += b[o]
    return out


def naive_dct_1d_matrix(n):
    m = np.zeros((n, n))
    for u in range(n):
        a = np.sqrt(1.0 / n) if u == 0 else np.sqrt(2.0 / n)
        for x in range(n):
            m[u, x] = a * np.cos((2 * x + 1) * u * np.pi / (2 * n))
    return m


def naive_dct2(x):
    """O(N^4) orthonormal 2-D DCT-II straight from the definition."""
    h, w = x.shape
    out = np.zeros((h, w))
    for u in range(h):
        au = np.sqrt(1.0 / h) if u == 0 else np.sqrt(2.0 / h)
        for v in range(w):
            av = np.sqrt(1.0 / w) if v == 0 else np.sqrt(2.0 / w)
            s = 0.0
            for i in range(h):
                for j in range(w):
                    s += x[i, j] * np.cos((2 * i + 1) * u * np.pi / (2 * h)) * np.cos((2 * j + 1) * v * np.pi / (2 * w))
            out[u, v] = au * av * s
    return out


def numeric_grad(f, arrays, index, eps=1e-5):
    """Central finite difference of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(*arrays)
        x[idx] = orig - eps
        fm = f(*arrays)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_op_gradient(op, arrays, eps=1e-5, weights=None, seed=0):
    """Max relative error between tape gradients and finite differences.

    The op output is projected to a scalar with fixed random weights so every
    output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    out_shape = op(*[T.Tensor(a) for a in arrays]).shape
    r = rng.standard_normal(out_shape) if weights is None else weights

    def scalar(*arrs):
        return float(np.sum(op(*[T.Tensor(a) for a in arrs]).data * r))

    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        y = op(*tensors)
        loss = T.sum_all(T.mul(y, T.Tensor(r))) if y.data.ndim else T.scale(y, float(r))
    grads = T.backward(tape, loss, tensors)
    errs = []
    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, eps)
        errs.append(rel_error(grads[t], num))
    return max(errs)


def shape_walk_flops(model, x, masks):
    """Count FLOPs by walking the executed layers with explicit per-position branch choices.

    Models without channel attention only.
    """
    cfg = model.config
    n, _, h, w = x.shape
    px = n * h * w
    flops = 0

    def conv(wt, pixels):
        co, ci, k, _ = wt.shape
        return 2 * (k * k * ci * co + co) * pixels

    flops += conv(model.head[0].data, px)
    dynamic = 0
    for b, m in enumerate(masks):
        for k, layers in enumerate(model.blocks[b].branches):
            sel = int(np.sum(m.labels == k))
            for wt, _ in layers:
                dynamic += conv(wt.data, sel)
        flops += cfg.channels * px  # block residual add
    flops += cfg.channels * px  # global residual
    pixels = px
    for wt, _ in model.tail:
        flops += conv(wt.data, pixels)
        pixels *= wt.shape[0] // cfg.channels  # pixel shuffle trades channels for positions
    flops += conv(model.final[0].data, pixels)
    # predictor convention: 2 per multiply-add, one add per bias
    predictors = sum((2 * p[0].data.size + p[0].data.shape[0]) * px for p in model.predictors)
    return dynamic, flops, predictors
