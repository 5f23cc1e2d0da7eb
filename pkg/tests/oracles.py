"""Independent reference implementations used to verify the fast paths.

Everything here is deliberately naive (explicit loops, direct formulas)
and never shares code with the package implementations it checks.
"""
from __future__ import annotations

import numpy as np

from veinseg.autodiff import Node, Tape, backward, mul, reduce_sum
from veinseg.tensor import Tensor4


def naive_conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                 stride=(1, 1), padding=(0, 0), dilation=1, groups=1) -> np.ndarray:
    """Quadruple-loop dilated, strided, grouped cross-correlation."""
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    cog = cout // groups
    oh = (h + 2 * ph - dilation * (kh - 1) - 1) // sh + 1
    ow = (wd + 2 * pw - dilation * (kw - 1) - 1) // sw + 1
    xp = np.zeros((n, cin, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, ph: ph + h, pw: pw + wd] = x
    out = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for ni in range(n):
        for co in range(cout):
            gi = co // cog
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cig):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (xp[ni, gi * cig + ci,
                                           i * sh + ki * dilation,
                                           j * sw + kj * dilation]
                                        * w[co, ci, ki, kj])
                    out[ni, co, i, j] = acc
            if b is not None:
                out[ni, co] += b.reshape(-1)[co]
    return out.astype(x.dtype)


def naive_separable_conv2d(x: np.ndarray, dw: np.ndarray, dwb: np.ndarray | None,
                           pw: np.ndarray, pwb: np.ndarray | None,
                           k: int, dilation: int) -> np.ndarray:
    """Grouped conv then 1x1 conv, both via the naive loop."""
    pad = (k - 1) * dilation // 2
    cin = x.shape[1]
    mid = naive_conv2d(x, dw, dwb, padding=(pad, pad), dilation=dilation, groups=cin)
    return naive_conv2d(mid, pw, pwb)


def dilate_kernel(w: np.ndarray, d: int) -> np.ndarray:
    """Insert d-1 zero rows/columns between kernel taps."""
    cout, cig, kh, kw = w.shape
    out = np.zeros((cout, cig, (kh - 1) * d + 1, (kw - 1) * d + 1), dtype=w.dtype)
    out[:, :, ::d, ::d] = w
    return out


def naive_maxpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[ni, ci, i, j] = max(x[ni, ci, 2 * i, 2 * j],
                                            x[ni, ci, 2 * i, 2 * j + 1],
                                            x[ni, ci, 2 * i + 1, 2 * j],
                                            x[ni, ci, 2 * i + 1, 2 * j + 1])
    return out


def naive_upsample2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    for i in range(2 * h):
        for j in range(2 * w):
            out[:, :, i, j] = x[:, :, i // 2, j // 2]
    return out


def naive_batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                          eps: float) -> np.ndarray:
    """Direct per-channel formula with biased batch variance."""
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c]
        mean = vals.mean()
        var = ((vals - mean) ** 2).mean()
        out[:, c] = gamma.reshape(-1)[c] * (vals - mean) / np.sqrt(var + eps) \
            + beta.reshape(-1)[c]
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(1.0, float(np.abs(a).max(initial=0.0)), float(np.abs(b).max(initial=0.0)))
    return float(np.abs(a - b).max(initial=0.0)) / scale


def fd_gradients(make_loss, arrays: dict[str, np.ndarray], step: float = 1e-5):
    """Analytic and central-finite-difference gradients of a scalar loss.

    `make_loss(tape, nodes)` builds the loss from leaf nodes created for
    each named float64 array. Returns (analytic, numeric) dicts.
    """
    tape = Tape()
    nodes = {name: tape.leaf(Tensor4(arr)) for name, arr in arrays.items()}
    loss = make_loss(tape, nodes)
    gm = backward(tape, loss)
    analytic = {name: gm.get(node).data.copy() for name, node in nodes.items()}

    def eval_loss(current: dict[str, np.ndarray]) -> float:
        t = Tape()
        ns = {name: t.leaf(Tensor4(arr)) for name, arr in current.items()}
        return make_loss(t, ns).value.item()

    numeric = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss(arrays)
            flat[i] = orig - step
            down = eval_loss(arrays)
            flat[i] = orig
            g.ravel()[i] = (up - down) / (2 * step)
        numeric[name] = g
    return analytic, numeric


def max_grad_rel_error(make_loss, arrays: dict[str, np.ndarray],
                       step: float = 1e-5) -> float:
    analytic, numeric = fd_gradients(make_loss, arrays, step=step)
    return max(relative_error(analytic[k], numeric[k]) for k in arrays)


def weighted_sum_loss(rng: np.random.Generator):
    """Loss factory: dot the op output with fixed random coefficients so
    every output element influences the scalar differently."""
    coeffs = {}

    def attach(tape: Tape, out: Node) -> Node:
        key = out.dims
        if key not in coeffs:
            coeffs[key] = rng.uniform(-1.0, 1.0, size=key)
        c = tape.constant(Tensor4(coeffs[key]))
        return reduce_sum(mul(out, c))

    return attach
