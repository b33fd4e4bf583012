"""Selective state-space scan, bidirectional Mamba, attention, and the two block types.

A MambAttention block runs, on a ``[B, C, T, F]`` map::

    x_time = reshape(x, [B*F, T, C])
    x1 = x_time + attn(x_time)          # attn = MHA(LayerNorm(.)), one unit
    x2 = x1 + t_mamba(x1)
    x_freq = reshape(x2, [B*T, F, C])
    x3 = x_freq + attn(x_freq)          # the same unit again
    x4 = x3 + f_mamba(x3)
    y = reshape(x4, [B, C, T, F])

The scan is sequential in its length axis; attention over time batches over
frequency and vice versa, so neither mixes the two axes at once.
"""
from __future__ import annotations

import math

import numpy as np

from . import _scan_kernels as _kernels
from . import tensor as tn
from .nn import BCTF, LayerNorm, Linear, _uniform
from .tensor import Module, Parameter, ShapeError, Tensor, default_dtype, grad_enabled, make


class AxisError(ShapeError):
    pass


# --------------------------------------------------------------------------
# reshapes between the feature map and the two sequence views


def _expect_axes(x: Tensor, axes: tuple, where: str):
    if x.axes != axes:
        raise AxisError(f"{where}: expected axes {axes}, got {x.axes}")


def map_to_time(x: Tensor) -> Tensor:
    """[B, C, T, F] -> [B*F, T, C]."""
    _expect_axes(x, BCTF, "map_to_time")
    b, c, t, f = x.shape
    y = x.transpose((0, 3, 2, 1), axes=("B", "F", "T", "C"))
    return y.reshape((b * f, t, c), axes=("B*F", "T", "C"))


def time_to_freq(x: Tensor, batch: int) -> Tensor:
    """[B*F, T, C] -> [B*T, F, C]."""
    _expect_axes(x, ("B*F", "T", "C"), "time_to_freq")
    bf, t, c = x.shape
    f = bf // batch
    y = x.reshape((batch, f, t, c), axes=("B", "F", "T", "C")).transpose((0, 2, 1, 3))
    return y.reshape((batch * t, f, c), axes=("B*T", "F", "C"))


def freq_to_map(x: Tensor, batch: int) -> Tensor:
    """[B*T, F, C] -> [B, C, T, F]."""
    _expect_axes(x, ("B*T", "F", "C"), "freq_to_map")
    bt, f, c = x.shape
    t = bt // batch
    y = x.reshape((batch, t, f, c), axes=("B", "T", "F", "C"))
    return y.transpose((0, 3, 1, 2), axes=BCTF)


# --------------------------------------------------------------------------
# selective scan


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """y_t = C_t . h_t + D * u_t with h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t.

    Shapes: u, delta [batch, L, d]; A [d, n]; B, C [batch, L, n]; D [d].
    ``A`` is discretised by zero-order hold, ``B`` by the Euler rule.
    """
    ud, dd, ad, bd, cd, skip = u.data, delta.data, A.data, B.data, C.data, D.data
    if np.any(dd <= 0):
        raise ValueError("selective_scan needs strictly positive step sizes")
    nb, length, d = ud.shape
    n = ad.shape[1]
    if dd.shape != ud.shape or ad.shape[0] != d or bd.shape != (nb, length, n) or cd.shape != bd.shape:
        raise ShapeError(f"selective_scan shapes u{ud.shape} delta{dd.shape} A{ad.shape} B{bd.shape} C{cd.shape}")
    track = grad_enabled() and any(p.requires_grad for p in (u, delta, A, B, C, D))
    parents = (u, delta, A, B, C, D)
    if _SCAN_BACKEND[0] == "compiled":
        ud, dd, bd, cd = (np.ascontiguousarray(a) for a in (ud, dd, bd, cd))
        dA = np.exp(dd[..., None] * ad)
        hs = np.empty(dA.shape if track else (1, 1, 1, 1), dtype=ud.dtype)
        y = _kernels.forward(ud, dd, dA, bd, cd, skip, hs, track)
        if not track:
            return make(y, parents, None, "selective_scan")
        return make(y, parents, lambda g: _kernels.backward(np.ascontiguousarray(g), ud, dd, ad, dA, bd, cd, skip, hs),
                    "selective_scan")
    y, bw = _scan_numpy(ud, dd, ad, bd, cd, skip, track)
    return make(y, parents, bw, "selective_scan")


_SCAN_BACKEND = ["compiled" if _kernels.forward is not None else "numpy"]


def set_scan_backend(name: str) -> str:
    """Select "compiled" or "numpy" scan loops; returns the previous choice."""
    if name not in ("compiled", "numpy") or (name == "compiled" and _kernels.forward is None):
        raise ValueError(f"scan backend {name!r} is unavailable")
    prev, _SCAN_BACKEND[0] = _SCAN_BACKEND[0], name
    return prev


def _scan_numpy(ud, dd, ad, bd, cd, skip, track):
    """Vectorised over batch and channels, time-major; reverse-time loop for the adjoint."""
    nb, length, d = ud.shape
    n = ad.shape[1]
    u_t = np.ascontiguousarray(ud.transpose(1, 0, 2))
    d_t = np.ascontiguousarray(dd.transpose(1, 0, 2))
    b_t = np.ascontiguousarray(bd.transpose(1, 0, 2))
    c_t = np.ascontiguousarray(cd.transpose(1, 0, 2))

    if not track:
        y_t = np.empty_like(u_t)
        h = np.zeros((nb, d, n), dtype=ud.dtype)
        for t in range(length):
            h *= np.exp(d_t[t][..., None] * ad)
            h += (d_t[t] * u_t[t])[..., None] * b_t[t][:, None, :]
            y_t[t] = (h @ c_t[t][..., None])[..., 0]
        return y_t.transpose(1, 0, 2) + ud * skip, None

    dA = np.exp(d_t[..., None] * ad)
    du = d_t * u_t
    hs = du[..., None] * b_t[:, :, None, :]
    for t in range(1, length):
        hs[t] += dA[t] * hs[t - 1]
    y_t = (hs @ c_t[..., None])[..., 0]
    y = y_t.transpose(1, 0, 2) + ud * skip

    def bw(g):
        g_t = np.ascontiguousarray(g.transpose(1, 0, 2))
        gC = (g_t[:, :, None, :] @ hs)[:, :, 0, :]
        gH = g_t[..., None] * c_t[:, :, None, :]
        for t in range(length - 2, -1, -1):
            gH[t] += dA[t + 1] * gH[t + 1]
        gdA = np.zeros_like(gH)
        gdA[1:] = gH[1:] * hs[:-1]
        gdA *= dA
        gHB = (gH @ b_t[..., None])[..., 0]
        g_delta = (gdA * ad).sum(-1) + gHB * u_t
        g_u = gHB * d_t + g_t * skip
        gA = np.einsum("lbdn,lbd->dn", gdA, d_t, optimize=True)
        gB = (du[:, :, None, :] @ gH)[:, :, 0, :]
        gD = (g * ud).sum(axis=(0, 1))
        tr = lambda a: np.ascontiguousarray(a.transpose(1, 0, 2))  # noqa: E731
        return tr(g_u), tr(g_delta), gA, tr(gB), tr(gC), gD
    return y, bw


def causal_depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x [batch, L, d]; w [d, k]; y_t = b + sum_j w[:, j] * x_{t-k+1+j} (zero history)."""
    xd, wd = x.data, w.data
    k = wd.shape[1]
    nb, length, d = xd.shape
    xp = np.concatenate([np.zeros((nb, k - 1, d), dtype=xd.dtype), xd], axis=1)
    out = np.broadcast_to(b.data, xd.shape).copy()
    for j in range(k):
        out += xp[:, j:j + length] * wd[:, j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        for j in range(k):
            gxp[:, j:j + length] += g * wd[:, j]
            gw[:, j] = (g * xp[:, j:j + length]).sum(axis=(0, 1))
        return gxp[:, k - 1:], gw, g.sum(axis=(0, 1))
    return make(out, (x, w, b), bw, "causal_conv1d")


class Mamba(Module):
    """Selective SSM mixer: gated, input-dependent (delta, B, C), causal depthwise conv front."""

    def __init__(self, d_model, rng, d_state=16, d_conv=4, expand=3, dt_min=1e-3, dt_max=0.1):
        super().__init__()
        self.d_model, self.d_state, self.d_conv = d_model, d_state, d_conv
        self.d_inner = expand * d_model
        self.dt_rank = math.ceil(d_model / 16)
        di, r = self.d_inner, self.dt_rank
        self.in_proj = Linear(d_model, 2 * di, rng, bias=False)
        bound = 1 / math.sqrt(d_conv)
        self.conv_weight = Parameter(_uniform(rng, (di, d_conv), bound))
        self.conv_bias = Parameter(_uniform(rng, (di,), bound))
        self.x_proj = Linear(di, r + 2 * d_state, rng, bias=False)
        self.dt_proj = Linear(r, di, rng)
        self.dt_proj.weight.data[...] = _uniform(rng, (r, di), r ** -0.5)
        dt = np.exp(rng.uniform(size=di) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.dt_proj.bias.data[...] = dt + np.log(-np.expm1(-dt))  # inverse softplus
        self.A_log = Parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (di, 1))))
        self.D = Parameter(np.ones(di))
        self.out_proj = Linear(di, d_model, rng, bias=False)

    def forward(self, x):
        di, r, n = self.d_inner, self.dt_rank, self.d_state
        xz = self.in_proj(x)
        xs, z = tn.split(xz, [di, di], axis=-1)
        xs = tn.silu(causal_depthwise_conv1d(xs, self.conv_weight, self.conv_bias))
        dt, bm, cm = tn.split(self.x_proj(xs), [r, n, n], axis=-1)
        delta = tn.softplus(self.dt_proj(dt))
        A = -tn.exp(self.A_log)
        y = selective_scan(xs, delta, A, bm, cm, self.D)
        return self.out_proj(y * tn.silu(z))

    def flops(self, rows, report, name):
        di, n, r = self.d_inner, self.d_state, self.dt_rank
        self.in_proj.flops(rows, report, name + ".in_proj")
        report.add(name + ".conv", "conv", 2 * rows * di * self.d_conv)
        self.x_proj.flops(rows, report, name + ".x_proj")
        self.dt_proj.flops(rows, report, name + ".dt_proj")
        report.add(name + ".scan", "scan", 5 * rows * di * n + 2 * rows * di)
        report.add(name + ".scan", "activation", rows * di * n)
        report.add(name, "activation", 3 * rows * di)
        report.add(name, "elementwise", rows * di)
        self.out_proj.flops(rows, report, name + ".out_proj")


class BiMamba(Module):
    """Forward Mamba and a Mamba over the reversed sequence, fused by a kernel-1 transposed conv."""

    def __init__(self, d_model, rng, **mamba_kw):
        super().__init__()
        self.forward_mamba = Mamba(d_model, rng, **mamba_kw)
        self.backward_mamba = Mamba(d_model, rng, **mamba_kw)
        # ConvTranspose1d(2d, d, kernel=1): weight [2d, d]
        self.fuse = Linear(2 * d_model, d_model, rng)

    def branches(self, x):
        fwd = self.forward_mamba(x)
        bwd = tn.flip(self.backward_mamba(tn.flip(x, 1)), 1)
        return tn.concat([fwd, bwd], axis=-1)

    def forward(self, x):
        if x.shape[-1] != self.fuse.out_f:
            raise ShapeError(f"BiMamba expects {self.fuse.out_f} channels, got {x.shape[-1]}")
        return self.fuse(self.branches(x))

    def flops(self, rows, report, name):
        self.forward_mamba.flops(rows, report, name + ".forward_mamba")
        self.backward_mamba.flops(rows, report, name + ".backward_mamba")
        self.fuse.flops(rows, report, name + ".fuse")


class MultiHeadAttention(Module):
    """Scaled dot-product attention with a packed QKV projection."""

    def __init__(self, d_model, heads, rng):
        super().__init__()
        if d_model % heads:
            raise ShapeError(f"model width {d_model} is not divisible by {heads} heads")
        self.d_model, self.heads = d_model, heads
        self.in_proj = Linear(d_model, 3 * d_model, rng)
        self.out_proj = Linear(d_model, d_model, rng)

    def forward(self, x, return_weights=False):
        nb, s, c = x.shape
        if c != self.d_model:
            raise ShapeError(f"attention width {self.d_model}, input has {c}")
        h, dh = self.heads, c // self.heads
        qkv = self.in_proj(x).reshape((nb, s, 3, h, dh)).transpose((2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = tn.matmul(q, k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = tn.softmax(scores, axis=-1)
        o = tn.matmul(attn, v).transpose((0, 2, 1, 3)).reshape((nb, s, c))
        out = self.out_proj(o)
        return (out, attn) if return_weights else out

    def flops(self, nb, s, report, name, axis):
        c = self.d_model
        self.in_proj.flops(nb * s, report, name + ".in_proj")
        report.add(name, f"{axis}_attention_scores", 2 * 2 * nb * s * s * c)
        report.add(name, "softmax", 5 * nb * self.heads * s * s)
        self.out_proj.flops(nb * s, report, name + ".out_proj")

    @staticmethod
    def param_count(d):
        return 4 * d * d + 4 * d


class SharedAttention(Module):
    """LayerNorm followed by MHA; used for both the time and the frequency pass."""

    def __init__(self, d_model, heads, rng):
        super().__init__()
        self.norm = LayerNorm(d_model)
        self.mha = MultiHeadAttention(d_model, heads, rng)

    def forward(self, x):
        return self.mha(self.norm(x))

    def flops(self, nb, s, report, name, axis):
        report.add(name + ".norm", "norm", 5 * nb * s * self.mha.d_model)
        self.mha.flops(nb, s, report, name + ".mha", axis)

    @staticmethod
    def param_count(d):
        return MultiHeadAttention.param_count(d) + 2 * d


class TFMambaBlock(Module):
    """Residual bidirectional Mamba over time, then over frequency."""

    def __init__(self, d_model, rng, **mamba_kw):
        super().__init__()
        self.t_mamba = BiMamba(d_model, rng, **mamba_kw)
        self.f_mamba = BiMamba(d_model, rng, **mamba_kw)

    def forward(self, x):
        b = x.shape[0]
        xt = map_to_time(x)
        xt = xt + self.t_mamba(xt)
        xf = time_to_freq(xt, b)
        xf = xf + self.f_mamba(xf)
        return freq_to_map(xf, b)

    def flops(self, shape, report, name):
        b, _, t, f = shape
        self.t_mamba.flops(b * f * t, report, name + ".t_mamba")
        self.f_mamba.flops(b * t * f, report, name + ".f_mamba")
        return shape


class MambAttentionBlock(Module):
    """Time attention + T-Mamba, then frequency attention + F-Mamba, all residual.

    With ``share_tf`` (the default) one attention unit serves both axes;
    otherwise the frequency stage gets its own ``f_attn``.
    """

    def __init__(self, d_model, heads, rng, attention=True, share_tf=True, **mamba_kw):
        super().__init__()
        if attention:
            self.attn = SharedAttention(d_model, heads, rng)
        else:
            self.attn = None
        self.t_mamba = BiMamba(d_model, rng, **mamba_kw)
        self.f_mamba = BiMamba(d_model, rng, **mamba_kw)
        if attention and not share_tf:
            self.f_attn = SharedAttention(d_model, heads, rng)
        else:
            object.__setattr__(self, "f_attn", self.attn)  # alias, not a second child

    def forward(self, x, trace=None):
        b = x.shape[0]
        x_time = map_to_time(x)
        x1 = x_time + self.attn(x_time) if self.attn is not None else x_time
        x2 = x1 + self.t_mamba(x1)
        x_freq = time_to_freq(x2, b)
        x3 = x_freq + self.f_attn(x_freq) if self.f_attn is not None else x_freq
        x4 = x3 + self.f_mamba(x3)
        if trace is not None:
            trace.update(x_time=x_time, x1=x1, x2=x2, x_freq=x_freq, x3=x3, x4=x4)
        return freq_to_map(x4, b)

    def flops(self, shape, report, name):
        b, _, t, f = shape
        if self.attn is not None:
            self.attn.flops(b * f, t, report, name + ".attn", "t")
            self.f_attn.flops(b * t, f, report, name + (".attn" if self.f_attn is self.attn else ".f_attn"), "f")
        self.t_mamba.flops(b * f * t, report, name + ".t_mamba")
        self.f_mamba.flops(b * t * f, report, name + ".f_mamba")
        return shape


def mamba_param_count(d, d_state=16, d_conv=4, expand=3):
    di, r = expand * d, math.ceil(d / 16)
    return d * 2 * di + di * d_conv + di + di * (r + 2 * d_state) + r * di + di + di * d_state + di + di * d


def bimamba_param_count(d, **kw):
    return 2 * mamba_param_count(d, **kw) + 2 * d * d + d


__all__ = [
    "AxisError", "BiMamba", "Mamba", "MambAttentionBlock", "MultiHeadAttention", "SharedAttention",
    "TFMambaBlock", "causal_depthwise_conv1d", "freq_to_map", "map_to_time", "selective_scan", "time_to_freq",
    "mamba_param_count", "bimamba_param_count", "default_dtype",
]
