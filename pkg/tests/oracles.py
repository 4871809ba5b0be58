"""Independent reference implementations used as test oracles.

Nothing here calls into the package's model code: the forward pass is a
plain loop over layers and derivatives come from finite-difference stencils.
"""

import numpy as np


def unpack(dims, params):
    out, off = [], 0
    for i in range(len(dims) - 1):
        rows, cols = dims[i + 1], dims[i] + 1
        out.append(np.asarray(params[off : off + rows * cols]).reshape(rows, cols))
        off += rows * cols
    assert off == len(params)
    return out


def ref_forward(dims, params, x):
    """Outputs and every hidden pre-activation for one input vector."""
    a = np.asarray(x, dtype=np.float64)
    pres = []
    ws = unpack(dims, params)
    for i, w in enumerate(ws):
        s = w[:, :-1] @ a + w[:, -1]
        if i < len(ws) - 1:
            pres.append(s)
            a = np.where(s > 0, s, 0.0)
        else:
            return s, pres


def stencil5(f, params, h):
    """Five-point central derivative along every coordinate.

    Exact (up to roundoff) for polynomials of degree <= 4 in each direction,
    which covers a ReLU network's outputs while no activation flips sign.
    """
    params = np.asarray(params, dtype=np.float64)
    cols = []
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        d = (-f(params + 2 * e) + 8 * f(params + e) - 8 * f(params - e) + f(params - 2 * e)) / (12 * h)
        cols.append(np.atleast_1d(d))
    return np.stack(cols, axis=-1)


def pattern_margin(dims, params, xs):
    return min(np.min(np.abs(np.concatenate(ref_forward(dims, params, x)[1]))) for x in xs)


def ref_jacobian(dims, params, x, h=1e-4):
    """Output Jacobian, shape (outputs, D).

    The step shrinks with the input's smallest |pre-activation| so the
    stencil never crosses a ReLU kink.
    """
    pres = ref_forward(dims, params, x)[1]
    if pres:
        scale = 1.0 + np.abs(x).sum() + sum(np.abs(p).sum() for p in pres)
        h = min(h, np.min(np.abs(np.concatenate(pres))) / (20.0 * scale))
    return stencil5(lambda p: ref_forward(dims, p, x)[0], params, h)


def ref_softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def ref_ggn(dims, params, xs, classification=False, h=1e-4):
    """Dense ``(1/n) Σ Jᵀ H J`` from stencil Jacobians."""
    d = len(params)
    g = np.zeros((d, d))
    for x in xs:
        j = ref_jacobian(dims, params, x, h)
        if classification:
            out, _ = ref_forward(dims, params, x)
            p = ref_softmax(out)
            hz = np.diag(p) - np.outer(p, p)
        else:
            hz = np.eye(j.shape[0])
        g += j.T @ hz @ j
    return g / len(xs)


def ref_loss(dims, params, x, t, classification=False):
    out, _ = ref_forward(dims, params, x)
    if classification:
        z = out - out.max()
        return -(z[t] - np.log(np.exp(z).sum()))
    return 0.5 * (out[0] - t) ** 2


def ref_measurement(dims, params, x, t, classification=False):
    out, _ = ref_forward(dims, params, x)
    if classification:
        others = np.delete(out, t)
        m = others.max()
        return m + np.log(np.exp(others - m).sum()) - out[t]
    return abs(out[0] - t)


def fd_grad(fun, params, h=1e-5):
    """Plain central differences, for smooth scalar functions."""
    params = np.asarray(params, dtype=np.float64)
    g = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = h
        g[i] = (fun(params + e) - fun(params - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(np.asarray(b)))


def spearman_ref(x, y):
    """Spearman via explicit average ranks, no scipy."""

    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="mergesort")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i : j + 1]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)))
