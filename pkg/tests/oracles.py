"""Independent reference implementations used as test oracles.

Everything here is written as plain nested loops over scalars, on
purpose: these must not share code paths with the library.
"""

import math

import numpy as np


def conv2d_loops(x, w, stride):
    h, wd, c = x.shape
    k = w.shape[0]
    out_c = w.shape[3]
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    out = np.zeros((oh, ow, out_c))
    for i in range(oh):
        for j in range(ow):
            for o in range(out_c):
                acc = 0.0
                for a in range(k):
                    for b in range(k):
                        for ch in range(c):
                            acc += x[i * stride + a, j * stride + b, ch] * w[a, b, ch, o]
                out[i, j, o] = acc
    return out


def maxpool_loops(x, window, stride):
    h, w, c = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            for ch in range(c):
                best = -math.inf
                for a in range(window):
                    for b in range(window):
                        best = max(best, x[i * stride + a, j * stride + b, ch])
                out[i, j, ch] = best
    return out


def dense_loops(x_flat, w, b):
    n_in, n_out = w.shape
    out = np.zeros(n_out)
    for j in range(n_out):
        acc = b[j]
        for i in range(n_in):
            acc += x_flat[i] * w[i, j]
        out[j] = acc
    return out


def softmax_loops(v):
    m = max(float(t) for t in v)
    exps = [math.exp(float(t) - m) for t in v]
    total = sum(exps)
    return np.array([e / total for e in exps])


def forward_loops(spec, params, image):
    """All layer outputs for one image, mirroring the layer semantics with
    scalar loops."""
    from rsrl.net import Conv, Dense, MaxPool, Relu, Softmax

    outputs = []
    cur = np.asarray(image, dtype=np.float64)
    for layer, p in zip(spec.layers, params):
        if isinstance(layer, Conv):
            cur = conv2d_loops(cur, p[0], layer.stride) + p[1]
        elif isinstance(layer, Relu):
            cur = np.where(cur > 0, cur, 0.0)
        elif isinstance(layer, MaxPool):
            cur = maxpool_loops(cur, layer.window, layer.stride)
        elif isinstance(layer, Dense):
            cur = dense_loops(cur.reshape(-1), p[0], p[1])
        elif isinstance(layer, Softmax):
            cur = softmax_loops(cur)
        outputs.append(cur)
    return outputs


def numeric_gradients(ckpt, images, labels, h=1e-5):
    """Central finite differences of the mean cross-entropy, one array
    pair per parameterized layer."""
    from rsrl.net import batch_loss

    grads = []
    for p in ckpt.params:
        if p is None:
            grads.append(None)
            continue
        pair = []
        for arr in p:
            g = np.zeros_like(arr)
            flat_p = arr.ravel()
            flat_g = g.ravel()
            for idx in range(flat_p.size):
                orig = flat_p[idx]
                flat_p[idx] = orig + h
                up = batch_loss(ckpt, images, labels)
                flat_p[idx] = orig - h
                down = batch_loss(ckpt, images, labels)
                flat_p[idx] = orig
                flat_g[idx] = (up - down) / (2.0 * h)
            pair.append(g)
        grads.append(tuple(pair))
    return tuple(grads)


def gradients_close(analytic, numeric, rtol=1e-6, atol=1e-10):
    """Relative error below ``rtol`` entrywise, with an absolute floor for
    entries where the finite-difference noise dominates."""
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        if ga is None:
            continue
        for a, n in zip(ga, gn):
            diff = np.abs(a - n)
            scale = np.maximum(np.abs(a), np.abs(n))
            bad = diff > np.maximum(rtol * scale, atol)
            if bad.any():
                worst = max(worst, float((diff / np.maximum(scale, atol)).max()))
                return False, worst
            with np.errstate(invalid="ignore", divide="ignore"):
                rel = np.where(scale > 0, diff / np.maximum(scale, atol), 0.0)
            worst = max(worst, float(rel.max()) if rel.size else 0.0)
    return True, worst
