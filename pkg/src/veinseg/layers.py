"""Layer primitives with tape-recorded backward rules.

Convolution is evaluated one sample at a time so that optional batch
parallelism (`set_num_threads`) reproduces serial results exactly: each
sample's arithmetic is identical no matter which thread runs it, and
cross-sample reductions are accumulated in fixed sample order.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Node
from .errors import ConfigError, ShapeError
from .tensor import F32, Tensor4

_num_threads = 1
_pool: ThreadPoolExecutor | None = None


def set_num_threads(n: int) -> None:
    """Worker count for batch-parallel convolution (1 = serial)."""
    global _num_threads, _pool
    if n < 1:
        raise ConfigError(f"thread count must be >= 1, got {n}")
    _num_threads = n
    if n > 1 and (_pool is None or _pool._max_workers != n):
        if _pool is not None:
            _pool.shutdown(wait=False)
        _pool = ThreadPoolExecutor(max_workers=n)


def get_num_threads() -> int:
    return _num_threads


def _map_samples(fn, count: int) -> None:
    if _num_threads > 1 and count > 1:
        list(_pool.map(fn, range(count)))
    else:
        for i in range(count):
            fn(i)


def _out_extent(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    keff = (k - 1) * dilation + 1
    padded = size + 2 * pad
    if keff > padded:
        raise ShapeError(
            f"effective kernel {keff} exceeds padded input extent {padded}")
    return (padded - keff) // stride + 1


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1
    groups: int = 1
    has_bias: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.dilation < 1 or self.groups < 1:
            raise ConfigError("dilation and groups must be >= 1")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in={self.in_channels} "
                f"and out={self.out_channels}")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ConfigError("kernel and stride extents must be >= 1")
        if any(p < 0 for p in self.padding):
            raise ConfigError("padding must be >= 0")

    @property
    def weight_dims(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups,
                self.kernel[0], self.kernel[1])

    @property
    def bias_dims(self) -> tuple[int, int, int, int]:
        return (1, self.out_channels, 1, 1)

    def out_dims(self, x_dims: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
        n, c, h, w = x_dims
        if c != self.in_channels:
            raise ShapeError(f"input has {c} channels, spec expects {self.in_channels}")
        oh = _out_extent(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation)
        ow = _out_extent(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation)
        return (n, self.out_channels, oh, ow)

    def param_count(self) -> int:
        n = self.out_channels * (self.in_channels // self.groups) * self.kernel[0] * self.kernel[1]
        if self.has_bias:
            n += self.out_channels
        return n


def same_padding(k: int, dilation: int = 1) -> int:
    """Symmetric zero-padding preserving extent at stride 1."""
    total = (k - 1) * dilation
    if total % 2:
        raise ConfigError(f"kernel {k} at dilation {dilation} has no symmetric 'same' padding")
    return total // 2


def _pad_input(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, :, ph: ph + h, pw: pw + w] = x
    return xp


def _tap_slices(kh: int, kw: int, d: int, sh: int, sw: int, oh: int, ow: int):
    for ki in range(kh):
        top = ki * d
        for kj in range(kw):
            left = kj * d
            yield ki, kj, (slice(top, top + (oh - 1) * sh + 1, sh),
                           slice(left, left + (ow - 1) * sw + 1, sw))


def _gather_batch(xp: np.ndarray, kh: int, kw: int, d: int, sh: int, sw: int,
                  oh: int, ow: int) -> np.ndarray:
    """(n, c, hp, wp) -> (n, c, kh, kw, oh, ow) patch tensor."""
    n, c = xp.shape[0], xp.shape[1]
    patches = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for ki, kj, (hs, ws) in _tap_slices(kh, kw, d, sh, sw, oh, ow):
        patches[:, :, ki, kj] = xp[:, :, hs, ws]
    return patches


def _is_depthwise(spec: Conv2dSpec) -> bool:
    return spec.groups == spec.in_channels == spec.out_channels and spec.groups > 1


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                    spec: Conv2dSpec) -> np.ndarray:
    n = x.shape[0]
    _, cout, oh, ow = spec.out_dims(x.shape)
    (kh, kw), (sh, sw), (ph, pw), d, g = (spec.kernel, spec.stride,
                                          spec.padding, spec.dilation, spec.groups)
    out = np.empty((n, cout, oh, ow), dtype=x.dtype)

    cin = spec.in_channels

    if _is_depthwise(spec):
        xp = _pad_input(x, ph, pw)
        out.fill(0)
        for ki, kj, (hs, ws) in _tap_slices(kh, kw, d, sh, sw, oh, ow):
            out += w[:, 0, ki, kj][None, :, None, None] * xp[:, :, hs, ws]
    elif spec.kernel == (1, 1) and spec.stride == (1, 1) and spec.padding == (0, 0) and g == 1:
        w2 = w.reshape(cout, cin)
        x2 = x.reshape(n, cin, oh * ow)

        def run_pointwise(i):
            np.matmul(w2, x2[i], out=out[i].reshape(cout, oh * ow))

        _map_samples(run_pointwise, n)
    elif spec.stride == (1, 1) and g == 1:
        # Plane tap-GEMM: one GEMM per kernel tap on contiguous views of the
        # flattened padded plane; no patch matrix is ever materialized. The
        # columns that would wrap across rows land in the horizontal padding
        # band and are cropped afterwards.
        xp = _pad_input(x, ph, pw)
        hp, wp = xp.shape[2], xp.shape[3]
        span = (oh - 1) * wp + ow
        xpf = xp.reshape(n, cin, hp * wp)
        w_taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # (kh, kw, cout, cin)
        acc = np.empty((n, cout, span), dtype=x.dtype)

        def run_plane(i):
            xi = xpf[i]
            ai = acc[i]
            np.matmul(w_taps[0, 0], xi[:, : span], out=ai)
            tmp = np.empty((cout, span), dtype=x.dtype)
            first = True
            for ki in range(kh):
                for kj in range(kw):
                    if first:
                        first = False
                        continue
                    off = ki * d * wp + kj * d
                    np.matmul(w_taps[ki, kj], xi[:, off: off + span], out=tmp)
                    ai += tmp

        _map_samples(run_plane, n)
        cropped = np.lib.stride_tricks.as_strided(
            acc, shape=(n, cout, oh, ow),
            strides=(acc.strides[0], acc.strides[1], wp * acc.strides[2], acc.strides[2]))
        out[:] = cropped
    else:
        xp = _pad_input(x, ph, pw)
        cig = cin // g
        cog = cout // g
        wg = w.reshape(g, cog, cig * kh * kw)
        patches = _gather_batch(xp, kh, kw, d, sh, sw, oh, ow).reshape(
            n, g, cig * kh * kw, oh * ow)

        def run_sample(i):
            oi = out[i].reshape(g, cog, oh * ow)
            pi = patches[i]
            for gi in range(g):
                np.matmul(wg[gi], pi[gi], out=oi[gi])

        _map_samples(run_sample, n)

    if b is not None:
        out += b
    return out


def _conv2d_backward(x: np.ndarray, w: np.ndarray, gout: np.ndarray,
                     spec: Conv2dSpec, need_bias: bool,
                     need_dx: bool = True, need_dw: bool = True):
    n, cin, h, wd = x.shape
    _, cout, oh, ow = gout.shape
    (kh, kw), (sh, sw), (ph, pw), d, g = (spec.kernel, spec.stride,
                                          spec.padding, spec.dilation, spec.groups)
    db = np.einsum("nchw->c", gout).reshape(1, cout, 1, 1) if need_bias else None

    if spec.kernel == (1, 1) and spec.stride == (1, 1) and spec.padding == (0, 0) and g == 1:
        w2 = w.reshape(cout, cin)
        x2 = x.reshape(n, cin, oh * ow)
        dx = np.empty_like(x) if need_dx else None
        dw_samples: list = [None] * n

        def run_pointwise(i):
            go = gout[i].reshape(cout, oh * ow)
            if need_dw:
                dw_samples[i] = go @ x2[i].transpose()
            if need_dx:
                np.matmul(w2.transpose(), go, out=dx.reshape(n, cin, oh * ow)[i])

        _map_samples(run_pointwise, n)
        dw = None
        if need_dw:
            dw = dw_samples[0]
            for i in range(1, n):
                dw += dw_samples[i]
            dw = dw.reshape(w.shape)
        return dx, dw, db

    xp = _pad_input(x, ph, pw)

    if _is_depthwise(spec):
        dw = np.empty_like(w) if need_dw else None
        dxp = np.zeros_like(xp) if need_dx else None
        for ki, kj, (hs, ws) in _tap_slices(kh, kw, d, sh, sw, oh, ow):
            if need_dw:
                dw[:, 0, ki, kj] = np.einsum("nchw,nchw->c", gout, xp[:, :, hs, ws])
            if need_dx:
                dxp[:, :, hs, ws] += gout * w[:, 0, ki, kj][None, :, None, None]
        dx = None
        if need_dx:
            dx = dxp if (ph == 0 and pw == 0) else dxp[:, :, ph: ph + h, pw: pw + wd]
        return dx, dw, db

    cig = cin // g
    cog = cout // g

    dw = None
    if need_dw and sh == 1 and sw == 1 and g == 1:
        # Plane tap-GEMM over the flattened padded plane, one sample at a
        # time; per-sample pieces are summed in sample order so serial and
        # threaded runs agree bitwise. Horizontal-pad columns of the output
        # plane carry zero gradient and contribute nothing.
        hp, wp = xp.shape[2], xp.shape[3]
        span = (oh - 1) * wp + ow
        if ow == wp:
            gpf = gout.reshape(n, cout, oh * ow)
        else:
            gpad = np.zeros((n, cout, oh, wp), dtype=gout.dtype)
            gpad[..., :ow] = gout
            gpf = gpad.reshape(n, cout, oh * wp)
        xpf = xp.reshape(n, cin, hp * wp)
        dw_samples: list = [None] * n

        def run_dw(i):
            gi = gpf[i][:, :span]
            xi = xpf[i]
            dwi = np.empty((kh, kw, cout, cin), dtype=w.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    off = ki * d * wp + kj * d
                    np.matmul(gi, xi[:, off: off + span].transpose(), out=dwi[ki, kj])
            dw_samples[i] = dwi

        _map_samples(run_dw, n)
        acc = dw_samples[0]
        for i in range(1, n):
            acc += dw_samples[i]
        dw = np.ascontiguousarray(acc.transpose(2, 3, 0, 1))
    elif need_dw:
        # General strided/grouped case: one GEMM per tap over the pooled
        # (sample, position) axis; identical code in serial and threaded
        # modes.
        gt = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(cout, n * oh * ow)
        dw = np.empty_like(w)
        for ki, kj, (hs, ws) in _tap_slices(kh, kw, d, sh, sw, oh, ow):
            xs = np.ascontiguousarray(xp[:, :, hs, ws].transpose(1, 0, 2, 3)).reshape(
                cin, n * oh * ow)
            if g == 1:
                dw[:, :, ki, kj] = gt @ xs.transpose()
            else:
                for gi in range(g):
                    dw[gi * cog: (gi + 1) * cog, :, ki, kj] = (
                        gt[gi * cog: (gi + 1) * cog]
                        @ xs[gi * cig: (gi + 1) * cig].transpose())

    if not need_dx:
        return None, dw, db

    if sh == 1 and sw == 1 and ph <= d * (kh - 1) and pw <= d * (kw - 1):
        # Input gradient as a convolution of gout with the spatially
        # flipped, channel-swapped kernel (valid whenever stride is 1).
        wt = np.ascontiguousarray(
            w.reshape(g, cog, cig, kh, kw).transpose(0, 2, 1, 3, 4)[:, :, :, ::-1, ::-1]
        ).reshape(cin, cog, kh, kw)
        spec_t = Conv2dSpec(cout, cin, (kh, kw), stride=(1, 1),
                            padding=(d * (kh - 1) - ph, d * (kw - 1) - pw),
                            dilation=d, groups=g, has_bias=False)
        dx = _conv2d_forward(gout, wt, None, spec_t)
    else:
        # Strided/overpadded case: scatter col gradients back per sample.
        dxp = np.zeros_like(xp)
        wg = w.reshape(g, cog, cig * kh * kw)
        dpatch = np.empty((n, g, cig * kh * kw, oh * ow), dtype=x.dtype)

        def run_sample(i):
            go = gout[i].reshape(g, cog, oh * ow)
            for gi in range(g):
                np.matmul(wg[gi].transpose(), go[gi], out=dpatch[i, gi])

        _map_samples(run_sample, n)
        dpv = dpatch.reshape(n, cin, kh, kw, oh, ow)
        for ki, kj, (hs, ws) in _tap_slices(kh, kw, d, sh, sw, oh, ow):
            dxp[:, :, hs, ws] += dpv[:, :, ki, kj]
        dx = dxp if (ph == 0 and pw == 0) else dxp[:, :, ph: ph + h, pw: pw + wd]
    return dx, dw, db


def conv2d(x: Node, spec: Conv2dSpec, weight: Node, bias: Node | None = None) -> Node:
    """Dilated, strided, grouped 2-D cross-correlation."""
    if weight.dims != spec.weight_dims:
        raise ShapeError(f"weight dims {weight.dims} do not match spec {spec.weight_dims}")
    if x.value.dtype != weight.value.dtype:
        raise ShapeError("input and weight dtypes differ")
    if (bias is None) == spec.has_bias:
        raise ShapeError("bias presence does not match spec.has_bias")
    if bias is not None and bias.dims != spec.bias_dims:
        raise ShapeError(f"bias dims {bias.dims} do not match spec {spec.bias_dims}")

    xv, wv = x.data, weight.data
    bv = bias.data if bias is not None else None
    out = _conv2d_forward(xv, wv, bv, spec)
    need_dx = not x.tape.is_constant(x)
    need_dw = not x.tape.is_constant(weight)

    def bwd(g):
        return _conv2d_backward(xv, wv, g, spec, bv is not None,
                                need_dx=need_dx, need_dw=need_dw)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return x.tape.record("conv2d", inputs, Tensor4(out), bwd)


def separable_conv2d(x: Node, depthwise_weight: Node, depthwise_bias: Node | None,
                     pointwise_weight: Node, pointwise_bias: Node | None,
                     k: int, dilation: int = 1) -> Node:
    """Per-channel k x k spatial conv at 'same' padding, then 1x1 fusion."""
    cin = x.dims[1]
    cout = pointwise_weight.dims[0]
    pad = same_padding(k, dilation)
    dw_spec = Conv2dSpec(cin, cin, (k, k), padding=(pad, pad), dilation=dilation,
                         groups=cin, has_bias=depthwise_bias is not None)
    pw_spec = Conv2dSpec(cin, cout, (1, 1), has_bias=pointwise_bias is not None)
    mid = conv2d(x, dw_spec, depthwise_weight, depthwise_bias)
    return conv2d(mid, pw_spec, pointwise_weight, pointwise_bias)


class BnState:
    """Running statistics and hyperparameters for one batch-norm layer."""

    def __init__(self, channels: int, dtype=F32, momentum: float = 0.99,
                 eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)


def batchnorm(x: Node, gamma: Node, beta: Node, state: BnState) -> Node:
    """Per-channel normalization over (n, h, w); batch statistics in train
    mode (with running-average update), stored statistics in infer mode."""
    n, c, h, w = x.dims
    if c != state.channels:
        raise ShapeError(f"input has {c} channels, BnState has {state.channels}")
    if gamma.dims != (1, c, 1, 1) or beta.dims != (1, c, 1, 1):
        raise ShapeError("gamma/beta must have dims (1, c, 1, 1)")
    xv = x.data
    gv = gamma.data
    train = state.mode == "train"

    if train:
        count = n * h * w
        mean = np.einsum("nchw->c", xv) / count
        sq = np.einsum("nchw,nchw->c", xv, xv) / count
        var = np.maximum(sq - mean * mean, 0)  # biased, clamped against rounding
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1.0 - m) * mean).astype(
            state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1.0 - m) * var).astype(
            state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xv.dtype)
        var = state.running_var.astype(xv.dtype)

    inv = 1.0 / np.sqrt(var + np.asarray(state.eps, dtype=xv.dtype))
    scale = (gv.reshape(c) * inv).reshape(1, c, 1, 1)
    shift = beta.data - (mean * inv * gv.reshape(c)).reshape(1, c, 1, 1)
    out = xv * scale
    out += shift

    mean_b = mean.reshape(1, c, 1, 1)
    inv_b = inv.reshape(1, c, 1, 1)

    def bwd(g):
        xhat = (xv - mean_b) * inv_b
        dgamma = np.einsum("nchw,nchw->c", g, xhat).reshape(1, c, 1, 1)
        dbeta = np.einsum("nchw->c", g).reshape(1, c, 1, 1)
        if train:
            count = n * h * w
            dx = (gv * inv_b) * (g - dbeta / count - xhat * (dgamma / count))
        else:
            dx = g * (gv * inv_b)
        return dx.astype(xv.dtype, copy=False), dgamma.astype(xv.dtype), dbeta.astype(xv.dtype)

    return x.tape.record("batchnorm", (x, gamma, beta), Tensor4(out), bwd)


def relu(x: Node) -> Node:
    xv = x.data
    out = np.maximum(xv, 0)

    def bwd(g):
        return (np.where(xv > 0, g, xv.dtype.type(0)),)

    return x.tape.record("relu", (x,), Tensor4(out), bwd)


def sigmoid(x: Node) -> Node:
    xv = x.data
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return x.tape.record("sigmoid", (x,), Tensor4(out), bwd)


def maxpool2(x: Node) -> Node:
    """2x2 max pooling, stride 2; gradient goes to the first row-major
    maximum of each window."""
    n, c, h, w = x.dims
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even extents, got h={h}, w={w}")
    oh, ow = h // 2, w // 2
    xv = x.data
    flat = np.ascontiguousarray(
        xv.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)).reshape(n, c, oh, ow, 4)
    idx = flat.argmax(axis=-1)  # first max in window row-major order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        scat = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
        dx = scat.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return x.tape.record("maxpool2", (x,), Tensor4(out), bwd)


def upsample_nearest2(x: Node) -> Node:
    """Each element replicated into a 2x2 block; no parameters."""
    n, c, h, w = x.dims
    out = np.broadcast_to(x.data[:, :, :, None, :, None],
                          (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def bwd(g):
        g6 = g.reshape(n, c, h, 2, w, 2)
        return (g6[:, :, :, 0, :, 0] + g6[:, :, :, 0, :, 1]
                + g6[:, :, :, 1, :, 0] + g6[:, :, :, 1, :, 1],)

    return x.tape.record("upsample_nearest2", (x,), Tensor4(out), bwd)


def concat_channels(a: Node, b: Node) -> Node:
    na, ca, ha, wa = a.dims
    nb, cb, hb, wb = b.dims
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat: batch/spatial mismatch {a.dims} vs {b.dims}")
    if a.value.dtype != b.value.dtype:
        raise ShapeError("concat: dtype mismatch")
    out = np.concatenate((a.data, b.data), axis=1)

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return a.tape.record("concat_channels", (a, b), Tensor4(out), bwd)


def slice_channels(x: Node, start: int, stop: int) -> Node:
    n, c, h, w = x.dims
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {c} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    def bwd(g):
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        dx[:, start:stop] = g
        return (dx,)

    return x.tape.record("slice_channels", (x,), Tensor4(out), bwd)


def depth_to_space2(x: Node) -> Node:
    """(n, 4c, h, w) -> (n, c, 2h, 2w); channel block (di*2+dj) fills output
    offset (di, dj) of each 2x2 cell."""
    n, c4, h, w = x.dims
    if c4 % 4:
        raise ShapeError(f"depth_to_space2 requires channels divisible by 4, got {c4}")
    c = c4 // 4
    out = x.data.reshape(n, c, 2, 2, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(
        n, c, 2 * h, 2 * w)

    def bwd(g):
        dx = g.reshape(n, c, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, c4, h, w)
        return (np.ascontiguousarray(dx),)

    return x.tape.record("depth_to_space2", (x,), Tensor4(np.ascontiguousarray(out)), bwd)


def channel_bias(x: Node, bias: Node) -> Node:
    n, c, h, w = x.dims
    if bias.dims != (1, c, 1, 1):
        raise ShapeError(f"bias dims {bias.dims} must be (1, {c}, 1, 1)")
    out = x.data + bias.data

    def bwd(g):
        return g, g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)

    return x.tape.record("channel_bias", (x, bias), Tensor4(out), bwd)


def upconv2x2(x: Node, weight: Node, bias: Node | None = None) -> Node:
    """Learned 2x upsampling: each input pixel maps to a 2x2 output block
    through its own (cin -> cout) weight slice. Weight dims (4*cout, cin, 1, 1).
    Parameter count matches a 2x2 stride-2 transposed convolution."""
    cin = x.dims[1]
    c4 = weight.dims[0]
    if c4 % 4:
        raise ShapeError("upconv2x2 weight leading extent must be divisible by 4")
    spec = Conv2dSpec(cin, c4, (1, 1), has_bias=False)
    expanded = conv2d(x, spec, weight)
    out = depth_to_space2(expanded)
    if bias is not None:
        out = channel_bias(out, bias)
    return out
