"""Invariant suite run by ``rwsaunet verify``.

Each check returns a :class:`Check`; a check that does not apply to the given
configuration (tie integrity without sharing) reports ``skip``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as tn
from .dsp import StftConfig, _istft_array, _stft_array
from .model import ModelConfig, build_model
from .objectives import Adam, LossWeights, train_step
from .sequence import MambAttentionBlock, MultiHeadAttention, freq_to_map, map_to_time, selective_scan, time_to_freq
from .tensor import Parameter, Tensor, no_grad, numerical_grad, precision, rel_error


@dataclass
class Check:
    name: str
    status: str   # pass | fail | skip
    detail: str = ""

    @property
    def ok(self):
        return self.status != "fail"


def naive_scan(u, delta, A, B, C, D):
    """Direct per-step recurrence, one channel and state at a time."""
    nb, length, d = u.shape
    n = A.shape[1]
    y = np.zeros((nb, length, d))
    for b in range(nb):
        for c in range(d):
            h = np.zeros(n)
            for t in range(length):
                for k in range(n):
                    h[k] = math.exp(delta[b, t, c] * A[c, k]) * h[k] + delta[b, t, c] * B[b, t, k] * u[b, t, c]
                y[b, t, c] = sum(C[b, t, k] * h[k] for k in range(n)) + D[c] * u[b, t, c]
    return y


def dense_attention(x, mha: MultiHeadAttention):
    """softmax(Q K^T / sqrt(d_head)) V per head, written out with explicit loops over heads."""
    w_in, b_in = mha.in_proj.weight.data, mha.in_proj.bias.data
    w_out, b_out = mha.out_proj.weight.data, mha.out_proj.bias.data
    c, h = mha.d_model, mha.heads
    dh = c // h
    qkv = x @ w_in + b_in
    q, k, v = qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:]
    heads = []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / math.sqrt(dh)
        s = np.exp(s - s.max(-1, keepdims=True))
        s /= s.sum(-1, keepdims=True)
        heads.append(s @ v[..., sl])
    return np.concatenate(heads, -1) @ w_out + b_out


def random_scan_instance(rng, nb=2, length=7, d=3, n=2):
    return (rng.normal(size=(nb, length, d)), rng.uniform(0.05, 1.5, size=(nb, length, d)),
            -rng.uniform(0.1, 2.0, size=(d, n)), rng.normal(size=(nb, length, n)),
            rng.normal(size=(nb, length, n)), rng.normal(size=d))


def check_scan_oracle(instances=10, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    worst = 0.0
    with precision(np.float64):
        for _ in range(instances):
            arrs = random_scan_instance(rng, length=int(rng.integers(1, 17)), n=int(rng.integers(1, 5)))
            with no_grad():
                y = selective_scan(*(Tensor(a) for a in arrs)).data
            worst = max(worst, float(np.max(np.abs(y - naive_scan(*arrs)))))
    return Check("scan_vs_loop_oracle", "pass" if worst < 1e-12 else "fail", f"max abs err {worst:.2e}")


def check_mha_oracle(instances=10, seed=0) -> Check:
    rng = np.random.default_rng(seed)
    worst, row_err = 0.0, 0.0
    with precision(np.float64):
        for _ in range(instances):
            h = int(rng.choice([1, 2, 4]))
            mha = MultiHeadAttention(4 * h, h, rng)
            x = rng.normal(size=(2, int(rng.integers(1, 9)), 4 * h))
            with no_grad():
                out, attn = mha(Tensor(x), return_weights=True)
            worst = max(worst, float(np.max(np.abs(out.data - dense_attention(x, mha)))))
            row_err = max(row_err, float(np.max(np.abs(attn.data.sum(-1) - 1))))
    ok = worst < 1e-12 and row_err < 1e-6
    return Check("mha_vs_dense_oracle", "pass" if ok else "fail", f"max abs err {worst:.2e}, row-sum err {row_err:.1e}")


def check_reshape_roundtrip(seed=0) -> Check:
    x = Tensor(np.random.default_rng(seed).normal(size=(2, 5, 3, 4)), axes=nn.BCTF)
    y = freq_to_map(time_to_freq(map_to_time(x), 2), 2)
    ok = np.array_equal(x.data, y.data) and y.axes == nn.BCTF
    return Check("reshape_roundtrip", "pass" if ok else "fail")


def grad_check(fn, params, seed=0, eps=1e-6):
    """Worst relative error between analytic and central-difference gradients of sum(W * fn())."""
    out = fn()
    weights = np.random.default_rng(seed).normal(size=out.shape)
    for p in params:
        p.grad = None
    tn.backward((fn() * Tensor(weights)).sum())
    worst = 0.0
    for p in params:
        num = numerical_grad(lambda: float((fn().data * weights).sum()), p.data, eps)
        worst = max(worst, rel_error(p.grad, num))
    return worst


def check_primitive_grads(seed=0) -> Check:
    rng = np.random.default_rng(seed)
    errs = {}
    with precision(np.float64):
        x = Parameter(rng.normal(size=(1, 2, 4, 5)))
        w = Parameter(rng.normal(size=(4, 1, 3, 3)))
        b = Parameter(rng.normal(size=4))
        errs["conv2d"] = grad_check(lambda: nn.conv2d(x, w, b, padding=1, groups=2), [x, w, b])
        wt = Parameter(rng.normal(size=(2, 3, 3, 3)))
        errs["conv_transpose2d"] = grad_check(
            lambda: nn.conv_transpose2d(x, wt, None, stride=2, padding=1, output_padding=1), [x, wt])
        wd = Parameter(rng.normal(size=(2, 1, 3, 3)))
        off = Parameter(rng.normal(size=(1, 18, 4, 5)) * 0.6)
        errs["deform_conv2d"] = grad_check(lambda: nn.deform_conv2d(x, off, wd, None, groups=2), [x, off, wd])
        scan = [Parameter(a) for a in random_scan_instance(rng, nb=1, length=5, d=2, n=3)]
        errs["selective_scan"] = grad_check(lambda: selective_scan(*scan), scan)
    worst = max(errs.values())
    return Check("primitive_gradients", "pass" if worst < 1e-5 else "fail",
                 ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


def check_block_grad(seed=0) -> Check:
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        blk = MambAttentionBlock(4, 2, rng, d_state=2)
        x = Parameter(rng.normal(size=(1, 4, 4, 4)))
        x.axes = nn.BCTF
        params = [x] + [p for _, p in blk.named_parameters()]
        err = grad_check(lambda: blk(x), params, seed, eps=1e-4)
    return Check("block_gradient", "pass" if err < 1e-4 else "fail", f"max rel err {err:.1e}")


def check_dsp_roundtrip(seed=0) -> Check:
    cfg = StftConfig()
    x = np.random.default_rng(seed).normal(size=16000)
    y = _istft_array(_stft_array(x, cfg), len(x), cfg)
    err = float(np.max(np.abs(x - y)))
    return Check("stft_roundtrip", "pass" if err < 1e-5 else "fail", f"max abs err {err:.1e}")


def check_ties(cfg: ModelConfig, seed=0) -> Check:
    if not (cfg.rwsa and cfg.mha):
        return Check("tie_integrity", "skip", "sharing disabled")
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    length = model.padded_length(4 * cfg.stft.hop)
    noisy = rng.normal(size=(1, length)) * 0.3
    clean = noisy * 0.5
    train_step(model, Adam(model.parameters(), lr=1e-3), noisy, clean, LossWeights())
    bad = []
    for alias, canon in model.ties.items():
        a, c = model.resolve(alias), model.resolve(canon)
        if a is not c or not np.array_equal(a.data, c.data):
            bad.append(alias)
    return Check("tie_integrity", "fail" if bad else "pass",
                 f"{len(model.ties)} aliases" + (f"; broken: {bad[:3]}" if bad else ""))


def check_shape_ladder(cfg: ModelConfig, seed=0, length=30600) -> Check:
    model = build_model(cfg, seed)
    trace = {}
    with no_grad():
        model.spectral_forward(np.random.default_rng(seed).normal(size=length) * 0.1, trace)
    t = cfg.stft.n_frames(model.padded_length(length))
    f = cfg.stft.n_freq // 2
    expected = {"encoder": (1, cfg.C, t, f), "mask": (1, t, cfg.stft.n_freq), "phase": (1, t, cfg.stft.n_freq)}
    for lvl in range(cfg.levels - 1):
        s = 2 ** lvl
        expected[f"down{lvl}"] = (1, cfg.C * s, t // s, f // s)
        expected[f"downsample{lvl}"] = (1, cfg.C * 2 * s, t // (2 * s), f // (2 * s))
        expected[f"upsample{lvl}"] = expected[f"up{lvl}"] = (1, cfg.C * s, t // s, f // s)
    k = cfg.scale
    expected["bottleneck"] = (1, cfg.C * k, t // k, f // k)
    bad = [f"{k}: {trace[k].shape} != {v}" for k, v in expected.items() if trace[k].shape != v]
    return Check("shape_ladder", "fail" if bad else "pass", "; ".join(bad) or f"T={t}, F'={f}")


def run_suite(cfg: ModelConfig, seed: int = 0, full_length: bool = True):
    checks = [check_scan_oracle, check_mha_oracle, check_reshape_roundtrip, check_primitive_grads,
              check_block_grad, check_dsp_roundtrip]
    results = [c(seed=seed) for c in checks]
    results.append(check_ties(cfg, seed))
    results.append(check_shape_ladder(cfg, seed, 30600 if full_length else 4 * cfg.stft.hop * cfg.scale))
    return results
