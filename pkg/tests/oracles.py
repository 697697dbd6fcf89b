"""Independent reference implementations the tests compare against.

Nothing here imports the code under test except for plain data types.
"""

import numpy as np

MASK = (1 << 64) - 1


def splitmix64(seed, n):
    """Pure-Python SplitMix64 with unbounded ints, masked by hand."""
    state, out = seed & MASK, []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        out.append(z ^ (z >> 31))
    return out


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, np.float32(0))
    if kind == "softmax":
        e = np.exp(z - z.max())
        return e / e.sum()
    return z


def ref_forward(layers, x):
    """``layers``: list of (W, b, kind). Returns output and per-layer pre-activations."""
    a, pre = np.asarray(x, dtype=np.float32), []
    for W, b, kind in layers:
        z = W @ a + b
        pre.append(z)
        a = _act(z, kind)
    return a, pre


def ref_loss(layers, x, t):
    out, _ = ref_forward(layers, x)
    if layers[-1][2] == "softmax":
        return -float(np.sum(t * np.log(out)))
    return 0.5 * float(np.sum((out - t) ** 2))


def _relu_pattern(layers, x):
    _, pre = ref_forward(layers, x)
    return tuple(tuple((z > 0).tolist()) for z, (_, _, kind) in zip(pre, layers) if kind == "relu")


def fd_gradients(layers, x, t, h=1e-2):
    """Central differences in float32.

    Returns ``(grads, valid)``: per layer ``(dW, db)`` and boolean masks of the
    entries whose +-h probes keep every hidden ReLU on the same side of zero
    (elsewhere the loss is not differentiable across the probe interval).
    """
    layers = [(W.astype(np.float32).copy(), b.astype(np.float32).copy(), k) for W, b, k in layers]
    base = _relu_pattern(layers, x)
    grads, valid = [], []
    h32 = np.float32(h)
    for li, (W, b, _) in enumerate(layers):
        pair_g, pair_v = [], []
        for arr in (W, b):
            g = np.zeros(arr.shape, np.float64)
            ok = np.ones(arr.shape, bool)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h32
                lp, pp = ref_loss(layers, x, t), _relu_pattern(layers, x)
                arr[idx] = orig - h32
                lm, pm = ref_loss(layers, x, t), _relu_pattern(layers, x)
                arr[idx] = orig
                g[idx] = (lp - lm) / (2 * h)
                ok[idx] = pp == base and pm == base
            pair_g.append(g)
            pair_v.append(ok)
        grads.append(tuple(pair_g))
        valid.append(tuple(pair_v))
    return grads, valid


def max_relative_error(analytic, numeric, valid):
    """max |a - n| over valid entries, relative to the larger inf-norm of the two."""
    diffs, scale = [0.0], 1e-12
    for (aw, ab), (nw, nb), (vw, vb) in zip(analytic, numeric, valid):
        for a, n, v in ((aw, nw, vw), (ab, nb, vb)):
            a = np.asarray(a, np.float64)
            scale = max(scale, np.abs(a).max(), np.abs(n).max())
            if v.any():
                diffs.append(float(np.abs(a - n)[v].max()))
    return max(diffs) / scale


def nearest_prototype(X, protos):
    d = ((X[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


def box_average(img, side):
    """Integer-ratio block mean (only valid when side divides the image size)."""
    h, w = img.shape
    return img.reshape(side, h // side, side, w // side).mean(axis=(1, 3))
