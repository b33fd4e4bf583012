"""Convolution, normalisation and mask/embedding building blocks.

Feature maps are rank-4 ``[B, C, T, F]`` tensors.  Every convolution goes
through the same im2col + grouped matmul contraction, which is what lets a
deformable convolution with zero offsets reproduce a plain convolution
bit for bit.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import sparse

from . import tensor as tn
from .tensor import Module, Parameter, ShapeError, Tensor, default_dtype, make

BCTF = ("B", "C", "T", "F")


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _pad4(padding, kernel, dilation):
    """Normalise padding to ((top, bottom), (left, right))."""
    if padding == "same":
        return tuple(((d * (k - 1)) // 2, d * (k - 1) - (d * (k - 1)) // 2) for k, d in zip(kernel, dilation))
    p = _pair(padding)
    return tuple((q, q) if isinstance(q, int) else tuple(q) for q in p)


def _out_extent(n, pad, k, s, d):
    return (n + pad[0] + pad[1] - d * (k - 1) - 1) // s + 1


def _im2col(x, kernel, stride, pad, dilation, out_hw):
    b, c, _, _ = x.shape
    kt, kf = kernel
    st, sf = stride
    dt, df = dilation
    to, fo = out_hw
    xp = np.pad(x, ((0, 0), (0, 0), pad[0], pad[1])) if any(pad[0] + pad[1]) else x
    cols = np.empty((b, c, kt * kf, to, fo), dtype=x.dtype)
    for i in range(kt):
        for j in range(kf):
            cols[:, :, i * kf + j] = xp[:, :, i * dt:i * dt + st * (to - 1) + 1:st,
                                        j * df:j * df + sf * (fo - 1) + 1:sf]
    return cols


def _col2im(cols, x_shape, kernel, stride, pad, dilation):
    b, c, t, f = x_shape
    kt, kf = kernel
    st, sf = stride
    dt, df = dilation
    to, fo = cols.shape[-2:]
    xp = np.zeros((b, c, t + pad[0][0] + pad[0][1], f + pad[1][0] + pad[1][1]), dtype=cols.dtype)
    for i in range(kt):
        for j in range(kf):
            xp[:, :, i * dt:i * dt + st * (to - 1) + 1:st, j * df:j * df + sf * (fo - 1) + 1:sf] += cols[:, :, i * kf + j]
    return xp[:, :, pad[0][0]:pad[0][0] + t, pad[1][0]:pad[1][0] + f]


def _contract(cols, w, groups):
    """cols [B, Cin, K, To, Fo] x w [Cout, Cin/G, kT, kF] -> [B, Cout, To, Fo]."""
    b, cin, k, to, fo = cols.shape
    cout = w.shape[0]
    wg = w.reshape(groups, cout // groups, -1)
    out = np.matmul(wg[None], cols.reshape(b, groups, (cin // groups) * k, to * fo))
    return out.reshape(b, cout, to, fo)


def _contract_t(go, w, groups, cols_shape):
    """Adjoint of :func:`_contract` with respect to the columns."""
    b, _, _, to, fo = cols_shape
    cout = w.shape[0]
    wg = w.reshape(groups, cout // groups, -1)
    go = go.reshape(b, groups, cout // groups, to * fo)
    return np.matmul(np.swapaxes(wg, -1, -2)[None], go).reshape(cols_shape)


def _contract_grads(go, cols, w, groups):
    b, cin, k, to, fo = cols.shape
    cout = w.shape[0]
    gg = go.reshape(b, groups, cout // groups, to * fo)
    cg = cols.reshape(b, groups, (cin // groups) * k, to * fo)
    gw = np.matmul(gg, np.swapaxes(cg, -1, -2)).sum(axis=0).reshape(w.shape)
    return _contract_t(go, w, groups, cols.shape), gw


def _check_conv(x, w, groups, transposed=False):
    if x.ndim != 4:
        raise ShapeError(f"expected a [B, C, T, F] map, got {x.shape}")
    cin = x.shape[1]
    expect = w.shape[0] if transposed else w.shape[1] * groups
    if cin != expect:
        raise ShapeError(f"channel mismatch: input has {cin}, weights expect {expect}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, dilation=1, groups=1) -> Tensor:
    _check_conv(x, w, groups)
    kernel = w.shape[2:]
    stride, dilation = _pair(stride), _pair(dilation)
    pad = _pad4(padding, kernel, dilation)
    to = _out_extent(x.shape[2], pad[0], kernel[0], stride[0], dilation[0])
    fo = _out_extent(x.shape[3], pad[1], kernel[1], stride[1], dilation[1])
    if to <= 0 or fo <= 0:
        raise ShapeError(f"conv2d output extent ({to}, {fo}) is not positive")
    cols = _im2col(x.data, kernel, stride, pad, dilation, (to, fo))
    out = _contract(cols, w.data, groups)
    if b is not None:
        out += b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)
    x_shape = x.shape

    def bw(g):
        gcols, gw = _contract_grads(g, cols, w.data, groups)
        gx = _col2im(gcols, x_shape, kernel, stride, pad, dilation) if x.requires_grad else None
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))
    return make(out, parents, bw, "conv2d", axes=BCTF)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0,
                     output_padding=0, dilation=1, groups=1) -> Tensor:
    """Adjoint of :func:`conv2d`; ``w`` is laid out [Cin, Cout/G, kT, kF]."""
    _check_conv(x, w, groups, transposed=True)
    kernel = w.shape[2:]
    stride, dilation, op = _pair(stride), _pair(dilation), _pair(output_padding)
    pad = _pad4(padding, kernel, dilation)
    bsz, _, t, f = x.shape
    cout = w.shape[1] * groups
    ho = (t - 1) * stride[0] - pad[0][0] - pad[0][1] + dilation[0] * (kernel[0] - 1) + op[0] + 1
    wo = (f - 1) * stride[1] - pad[1][0] - pad[1][1] + dilation[1] * (kernel[1] - 1) + op[1] + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv_transpose2d output extent ({ho}, {wo}) is not positive")
    y_shape = (bsz, cout, ho, wo)
    wd = w.data
    # the equivalent forward conv maps Cout -> Cin with weights wd
    cols_shape = (bsz, cout, kernel[0] * kernel[1], t, f)
    out = _col2im(_contract_t(x.data, wd, groups, cols_shape), y_shape, kernel, stride, pad, dilation)
    if b is not None:
        out += b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        cols = _im2col(g, kernel, stride, pad, dilation, (t, f))
        gx = _contract(cols, wd, groups)
        _, gw = _contract_grads(x.data, cols, wd, groups)
        return (gx, gw) if b is None else (gx, gw, g.sum(axis=(0, 2, 3)))
    return make(out, parents, bw, "conv_transpose2d", axes=BCTF)


def _bilinear_taps(offsets: np.ndarray, kernel, pad, t, f):
    """Corner indices/weights for every (tap, output position) of one batch item."""
    kt, kf = kernel
    k = kt * kf
    to, fo = offsets.shape[-2:]
    off = offsets.reshape(k, 2, to, fo)
    ki, kj = np.divmod(np.arange(k), kf)
    pt = np.arange(to)[None, :, None] - pad[0][0] + ki[:, None, None] + off[:, 0]
    pf = np.arange(fo)[None, None, :] - pad[1][0] + kj[:, None, None] + off[:, 1]
    t0, f0 = np.floor(pt), np.floor(pf)
    at, af = pt - t0, pf - f0
    t0, f0 = t0.astype(np.int64), f0.astype(np.int64)
    corners = []
    for dt in (0, 1):
        for df in (0, 1):
            tc, fc = t0 + dt, f0 + df
            wt = at if dt else 1 - at
            wf = af if df else 1 - af
            valid = (tc >= 0) & (tc < t) & (fc >= 0) & (fc < f)
            idx = np.where(valid, tc * f + fc, 0)
            corners.append((dt, df, idx.reshape(-1), valid.reshape(-1), wt.reshape(-1), wf.reshape(-1)))
    return corners


def deform_conv2d(x: Tensor, offsets: Tensor, w: Tensor, b: Tensor | None = None, groups=1) -> Tensor:
    """Stride-1 'same' deformable convolution with bilinear sampling.

    ``offsets`` is [B, 2*kT*kF, T, F] with (dT, dF) interleaved per tap; samples
    that fall outside the map read as zero.
    """
    _check_conv(x, w, groups)
    kernel = w.shape[2:]
    k = kernel[0] * kernel[1]
    if offsets.shape != (x.shape[0], 2 * k, x.shape[2], x.shape[3]):
        raise ShapeError(f"offsets must be {(x.shape[0], 2 * k, x.shape[2], x.shape[3])}, got {offsets.shape}")
    pad = _pad4("same", kernel, (1, 1))
    bsz, c, t, f = x.shape
    p = t * f
    xd = x.data
    cols = np.empty((bsz, c, k, t, f), dtype=xd.dtype)
    taps, mats = [], []
    for bi in range(bsz):
        corners = _bilinear_taps(offsets.data[bi], kernel, pad, t, f)
        rows, cidx, vals = [], [], []
        for _, _, idx, valid, wt, wf in corners:
            wgt = wt * wf
            keep = valid & (wgt != 0)
            rows.append(np.nonzero(keep)[0])
            cidx.append(idx[keep])
            vals.append(wgt[keep])
        mat = sparse.csr_matrix((np.concatenate(vals).astype(xd.dtype),
                                 (np.concatenate(rows), np.concatenate(cidx))), shape=(k * p, p))
        cols[bi] = (mat @ xd[bi].reshape(c, p).T).T.reshape(c, k, t, f)
        taps.append(corners)
        mats.append(mat)
    out = _contract(cols, w.data, groups)
    if b is not None:
        out += b.data[:, None, None]
    parents = (x, offsets, w) if b is None else (x, offsets, w, b)

    def bw(g):
        gcols, gw = _contract_grads(g, cols, w.data, groups)
        gx = np.empty_like(xd)
        goff = np.zeros(offsets.shape, dtype=xd.dtype)
        for bi in range(bsz):
            gc = gcols[bi].reshape(c, k * p)
            gx[bi] = (mats[bi].T @ gc.T).T.reshape(c, t, f)
            if offsets.requires_grad:
                xb = xd[bi].reshape(c, p)
                d_t = np.zeros(k * p, dtype=np.float64)
                d_f = np.zeros(k * p, dtype=np.float64)
                for dt, df, idx, valid, wt, wf in taps[bi]:
                    proj = (gc * xb[:, idx]).sum(axis=0) * valid
                    d_t += proj * (1 if dt else -1) * wf
                    d_f += proj * (1 if df else -1) * wt
                goff[bi, 0::2] = d_t.reshape(k, t, f)
                goff[bi, 1::2] = d_f.reshape(k, t, f)
        out_g = (gx, goff, gw)
        return out_g if b is None else (*out_g, g.sum(axis=(0, 2, 3)))
    return make(out, parents, bw, "deform_conv2d", axes=BCTF)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xh = xc * rstd
    gd = gamma.data[:, None, None]
    out = xh * gd + beta.data[:, None, None]

    def bw(g):
        gxh = g * gd
        gx = rstd * (gxh - gxh.mean(axis=(2, 3), keepdims=True)
                     - xh * (gxh * xh).mean(axis=(2, 3), keepdims=True))
        return gx, (g * xh).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return make(out, (x, gamma, beta), bw, "instance_norm", axes=x.axes)


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """Per-channel PReLU on axis 1."""
    xd = x.data
    ad = a.data.reshape((1, -1) + (1,) * (xd.ndim - 2))
    neg = xd < 0
    out = np.where(neg, ad * xd, xd)

    def bw(g):
        gx = np.where(neg, g * ad, g)
        ga = np.where(neg, g * xd, 0).sum(axis=tuple(i for i in range(xd.ndim) if i != 1))
        return gx, ga
    return make(out, (x, a), bw, "prelu", axes=x.axes)


def shuffle_freq(x: Tensor, r: int) -> Tensor:
    """[B, r*C, T, F] -> [B, C, T, r*F]; output bin f*r + j takes channel j*C + c."""
    bsz, rc, t, f = x.shape
    if rc % r:
        raise ShapeError(f"{rc} channels are not divisible by upscale factor {r}")
    c = rc // r
    y = x.reshape((bsz, r, c, t, f)).transpose((0, 2, 3, 4, 1))
    return y.reshape((bsz, c, t, f * r), axes=BCTF)


def unshuffle_freq(x: Tensor, r: int) -> Tensor:
    bsz, c, t, rf = x.shape
    if rf % r:
        raise ShapeError(f"frequency extent {rf} is not divisible by {r}")
    y = x.reshape((bsz, c, t, rf // r, r)).transpose((0, 4, 1, 2, 3))
    return y.reshape((bsz, r * c, t, rf // r), axes=BCTF)


# --------------------------------------------------------------------------
# modules


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding="same", dilation=1, groups=1, bias=True):
        super().__init__()
        kernel = _pair(kernel)
        if in_ch % groups or out_ch % groups:
            raise ShapeError(f"channels ({in_ch}, {out_ch}) not divisible by groups={groups}")
        if padding == "same" and _pair(stride) != (1, 1):
            raise ValueError("'same' padding needs stride 1")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.dilation, self.groups = _pair(stride), padding, _pair(dilation), groups
        bound = 1 / math.sqrt(in_ch // groups * kernel[0] * kernel[1])
        self.weight = Parameter(_uniform(rng, (out_ch, in_ch // groups, *kernel), bound))
        if bias:
            self.bias = Parameter(_uniform(rng, (out_ch,), bound))
        else:
            self.bias = None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)

    def out_shape(self, shape):
        b, _, t, f = shape
        pad = _pad4(self.padding, self.kernel, self.dilation)
        return (b, self.out_ch, _out_extent(t, pad[0], self.kernel[0], self.stride[0], self.dilation[0]),
                _out_extent(f, pad[1], self.kernel[1], self.stride[1], self.dilation[1]))

    def flops(self, shape, report, name):
        out = self.out_shape(shape)
        macs = int(np.prod(out)) * (self.in_ch // self.groups) * self.kernel[0] * self.kernel[1]
        report.add(name, "conv", 2 * macs)
        return out


class ConvTranspose2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, output_padding=0, groups=1, bias=True):
        super().__init__()
        kernel = _pair(kernel)
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.output_padding, self.groups = _pair(stride), padding, _pair(output_padding), groups
        bound = 1 / math.sqrt(out_ch // groups * kernel[0] * kernel[1])
        self.weight = Parameter(_uniform(rng, (in_ch, out_ch // groups, *kernel), bound))
        self.bias = Parameter(_uniform(rng, (out_ch,), bound)) if bias else None

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding,
                                groups=self.groups)

    def out_shape(self, shape):
        b, _, t, f = shape
        pad = _pad4(self.padding, self.kernel, (1, 1))
        ext = [(n - 1) * s - p[0] - p[1] + k + op for n, s, p, k, op in
               zip((t, f), self.stride, pad, self.kernel, self.output_padding)]
        return (b, self.out_ch, *ext)

    def flops(self, shape, report, name):
        macs = int(np.prod(shape)) * (self.out_ch // self.groups) * self.kernel[0] * self.kernel[1]
        report.add(name, "conv", 2 * macs)
        return self.out_shape(shape)


class NormAct(Module):
    """Instance norm with affine, then per-channel PReLU."""

    def __init__(self, ch, slope=0.2, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(ch))
        self.beta = Parameter(np.zeros(ch))
        self.slope = Parameter(np.full(ch, slope))

    def forward(self, x):
        return prelu(instance_norm(x, self.gamma, self.beta, self.eps), self.slope)

    def flops(self, shape, report, name):
        n = int(np.prod(shape))
        report.add(name, "norm", 5 * n)
        report.add(name, "activation", n)
        return shape


class ConvBlock(Module):
    def __init__(self, conv: Module, ch: int):
        super().__init__()
        self.conv = conv
        self.norm = NormAct(ch)

    def forward(self, x):
        return self.norm(self.conv(x))

    def flops(self, shape, report, name):
        shape = self.conv.flops(shape, report, name + ".conv")
        return self.norm.flops(shape, report, name + ".norm")


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._n = 0
        for m in modules:
            self.append(m)

    def append(self, m):
        setattr(self, str(self._n), m)
        self._n += 1

    def __getitem__(self, i):
        return getattr(self, str(range(self._n)[i]))

    def __len__(self):
        return self._n

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))


class DilatedDenseNet(Module):
    """Densely connected (3, 3) convs with time dilation 1, 2, 4, ..."""

    def __init__(self, ch, rng, depth=4):
        super().__init__()
        self.ch, self.depth = ch, depth
        self.stages = ModuleList(
            ConvBlock(Conv2d(ch * (i + 1), ch, (3, 3), rng, dilation=(2 ** i, 1)), ch) for i in range(depth))

    def forward(self, x):
        if x.shape[1] != self.ch:
            raise ShapeError(f"DenseNet expects {self.ch} channels, got {x.shape[1]}")
        skip = x
        for stage in self.stages:
            x = stage(skip)
            skip = tn.concat([x, skip], axis=1)
        return x

    @staticmethod
    def analytic_params(ch, depth=4):
        return sum((i * ch + ch) * ch * 9 + ch + 3 * ch for i in range(depth))

    def flops(self, shape, report, name):
        b, _, t, f = shape
        for i, stage in enumerate(self.stages):
            stage.flops((b, self.ch * (i + 1), t, f), report, f"{name}.stages.{i}")
        return shape


class SubPixelConv(Module):
    """Conv to r*out channels, then shuffle the extra channels into the frequency axis."""

    def __init__(self, in_ch, out_ch, rng, r=2, kernel=(1, 3)):
        super().__init__()
        self.r = r
        self.conv = Conv2d(in_ch, out_ch * r, kernel, rng)

    def forward(self, x):
        return shuffle_freq(self.conv(x), self.r)

    def flops(self, shape, report, name):
        b, c, t, f = self.conv.flops(shape, report, name + ".conv")
        return (b, c // self.r, t, f * self.r)


class LearnableSigmoid(Module):
    """beta / (1 + exp(-alpha[f] * x)) with a learnable slope per frequency bin."""

    def __init__(self, n_freq, beta=2.0):
        super().__init__()
        self.beta = beta
        self.alpha = Parameter(np.ones(n_freq))

    def forward(self, x):
        if x.shape[-1] != self.alpha.shape[0]:
            raise ShapeError(f"slope covers {self.alpha.shape[0]} bins, input has {x.shape[-1]}")
        return tn.sigmoid(x * self.alpha) * self.beta

    def flops(self, shape, report, name):
        report.add(name, "activation", 3 * int(np.prod(shape)))
        return shape


class DeformConv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, groups=1, bias=True):
        super().__init__()
        kernel = _pair(kernel)
        self.in_ch, self.out_ch, self.kernel, self.groups = in_ch, out_ch, kernel, groups
        bound = 1 / math.sqrt(in_ch // groups * kernel[0] * kernel[1])
        self.weight = Parameter(_uniform(rng, (out_ch, in_ch // groups, *kernel), bound))
        self.bias = Parameter(_uniform(rng, (out_ch,), bound)) if bias else None

    def forward(self, x, offsets):
        return deform_conv2d(x, offsets, self.weight, self.bias, self.groups)

    def flops(self, shape, report, name):
        b, _, t, f = shape
        k = self.kernel[0] * self.kernel[1]
        report.add(name, "conv", 2 * b * self.out_ch * t * f * (self.in_ch // self.groups) * k)
        report.add(name, "sampling", 2 * 4 * b * self.in_ch * k * t * f)
        return (b, self.out_ch, t, f)


class PatchEmbed(Module):
    """Depthwise-separable conv followed by a depthwise deformable 3x3 conv.

    Offsets come from a 3x3 conv on the block input, zero-initialised so the
    block starts out as a plain convolutional stack.  T and F are preserved.
    """

    def __init__(self, in_ch, out_ch, rng):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.depthwise = Conv2d(in_ch, in_ch, 3, rng, groups=in_ch)
        self.pointwise = Conv2d(in_ch, out_ch, 1, rng)
        self.offset = Conv2d(in_ch, 18, 3, rng)
        self.offset.weight.data[...] = 0
        self.offset.bias.data[...] = 0
        self.deform = DeformConv2d(out_ch, out_ch, 3, rng, groups=out_ch)

    def forward(self, x):
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"patch embedding expects {self.in_ch} channels, got {x.shape[1]}")
        y = self.pointwise(self.depthwise(x))
        return self.deform(y, self.offset(x))

    def flops(self, shape, report, name):
        s = self.depthwise.flops(shape, report, name + ".depthwise")
        s = self.pointwise.flops(s, report, name + ".pointwise")
        self.offset.flops(shape, report, name + ".offset")
        return self.deform.flops(s, report, name + ".deform")


class Linear(Module):
    """x @ W + b with W stored as [in, out]."""

    def __init__(self, in_f, out_f, rng, bias=True):
        super().__init__()
        self.in_f, self.out_f = in_f, out_f
        bound = 1 / math.sqrt(in_f)
        self.weight = Parameter(_uniform(rng, (in_f, out_f), bound))
        self.bias = Parameter(_uniform(rng, (out_f,), bound)) if bias else None

    def forward(self, x):
        y = tn.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def flops(self, rows, report, name, kind="matmul"):
        report.add(name, kind, 2 * rows * self.in_f * self.out_f)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        return tn.layer_norm(x, self.gamma, self.beta, self.eps)
