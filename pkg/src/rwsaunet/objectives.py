"""Training losses, the optimizer and one training step, plus SSNR / SI-SDR metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as tn
from .dsp import AudioBuffer, _stft_array, stft_op
from .tensor import NonFiniteError, Tensor, no_grad

COMPONENTS = ("time", "mag", "complex", "phase", "consistency")


@dataclass(frozen=True)
class LossWeights:
    time: float = 0.2
    mag: float = 0.9
    complex: float = 0.1
    phase: float = 0.3
    consistency: float = 0.1
    gan: float = 0.0  # reserved; no discriminator is trained

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if any(v < 0 or not math.isfinite(v) for v in vals):
            raise ValueError(f"loss weights must be finite and nonnegative: {vals}")
        if not any(getattr(self, c) > 0 for c in COMPONENTS):
            raise ValueError("at least one loss weight must be positive")

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(getattr(self, f.name) * k for f in fields(self)))


class TrainingAborted(RuntimeError):
    def __init__(self, component: str, step: int | None = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite {component} loss{where}")
        self.component, self.step = component, step


@dataclass
class Reference:
    """Clean targets on the same padded STFT grid as the estimate."""
    wave: np.ndarray
    mag_c: np.ndarray
    phase: np.ndarray
    re_c: np.ndarray
    im_c: np.ndarray


def make_reference(clean: np.ndarray, padded: int, cfg) -> Reference:
    clean = np.atleast_2d(np.asarray(clean, dtype=tn.default_dtype()))
    x = np.pad(clean, ((0, 0), (0, padded - clean.shape[-1])))
    # plain numpy: a non-finite target surfaces in the guarded loss terms below
    z = _stft_array(x, cfg.stft)
    mag_c = (np.abs(z) ** cfg.c).astype(clean.dtype)
    phase = np.arctan2(z.imag, z.real).astype(clean.dtype)
    return Reference(clean, mag_c, phase, mag_c * np.cos(phase), mag_c * np.sin(phase))


def phase_losses(est_phase: Tensor, ref_phase: np.ndarray):
    """Instantaneous phase, group delay (d/dF) and instantaneous frequency (d/dT), anti-wrapped."""
    ref = Tensor(ref_phase)
    d = est_phase - ref
    ip = tn.wrap_distance(d).mean()
    gd = tn.wrap_distance(d[..., 1:] - d[..., :-1]).mean()
    iaf = tn.wrap_distance(d[..., 1:, :] - d[..., :-1, :]).mean()
    return ip, gd, iaf


def _compressed_stft(wave: Tensor, padded: int, cfg, eps=1e-9):
    wave = tn.pad(wave, ((0, 0), (0, padded - wave.shape[-1])))
    re, im = stft_op(wave, cfg.stft)
    mag = tn.sqrt(re * re + im * im + eps)
    scale = mag ** (cfg.c - 1.0)
    return re * scale, im * scale


def compute_losses(est, ref: Reference, w: LossWeights, cfg, padded: int | None = None):
    """Weighted sum of the five components; returns (total, {name: Tensor}).

    ``est`` is a model Estimate; ``ref`` comes from :func:`make_reference`.
    """
    if est.wave.shape != ref.wave.shape or est.mag_c.shape != ref.mag_c.shape:
        raise tn.ShapeError(f"estimate {est.wave.shape}/{est.mag_c.shape} vs reference "
                            f"{ref.wave.shape}/{ref.mag_c.shape}")
    padded = padded or cfg.stft.hop * (est.mag_c.shape[-2] - 1)
    comps = {}

    def guarded(name, fn):
        try:
            val = fn()
        except NonFiniteError as exc:
            raise TrainingAborted(name) from exc
        if not np.isfinite(val.data).all():
            raise TrainingAborted(name)
        comps[name] = val

    guarded("time", lambda: tn.tabs(est.wave - Tensor(ref.wave)).mean())
    guarded("mag", lambda: ((est.mag_c - Tensor(ref.mag_c)) ** 2).mean())
    guarded("complex", lambda: ((est.re_c - Tensor(ref.re_c)) ** 2 + (est.im_c - Tensor(ref.im_c)) ** 2).mean())

    def _phase():
        ip, gd, iaf = phase_losses(est.phase, ref.phase)
        return (ip + gd + iaf) * (1.0 / 3.0)
    guarded("phase", _phase)

    def _consistency():
        re2, im2 = _compressed_stft(est.wave, padded, cfg)
        return ((est.re_c - re2) ** 2 + (est.im_c - im2) ** 2).mean()
    if w.consistency > 0:
        guarded("consistency", _consistency)
    else:
        comps["consistency"] = Tensor(np.zeros((), dtype=tn.default_dtype()))
    total = None
    for name in COMPONENTS:
        term = comps[name] * getattr(w, name)
        total = term if total is None else total + term
    return total, comps


# --------------------------------------------------------------------------
# optimisation


@dataclass
class Adam:
    params: list
    lr: float = 5e-4
    betas: tuple = (0.8, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self):
        self.step_count += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.step_count, 1 - b2 ** self.step_count
        for p in self.params:
            if p.grad is None or not p.trainable:
                continue
            g = p.grad.astype(p.data.dtype)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            key = id(p)
            m = self._m.setdefault(key, np.zeros_like(p.data))
            v = self._v.setdefault(key, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def train_step(model, opt: Adam, noisy, clean, w: LossWeights, step: int | None = None) -> dict:
    """One forward, one backward, one update.  Returns the loss components as floats."""
    noisy, clean = np.atleast_2d(noisy), np.atleast_2d(clean)
    est = model.spectral_forward(noisy)
    padded = model.padded_length(noisy.shape[-1])
    ref = make_reference(clean, padded, model.cfg)
    try:
        total, comps = compute_losses(est, ref, w, model.cfg, padded)
    except TrainingAborted as exc:
        raise TrainingAborted(exc.component, step) from exc
    model.zero_grad()
    try:
        tn.backward(total)
    except NonFiniteError as exc:
        raise TrainingAborted("gradient", step) from exc
    opt.step()
    out = {"total": float(total.data)}
    out.update({k: float(v.data) for k, v in comps.items()})
    return out


def evaluate_loss(model, noisy, clean, w: LossWeights) -> dict:
    noisy, clean = np.atleast_2d(noisy), np.atleast_2d(clean)
    with no_grad():
        est = model.spectral_forward(noisy)
        padded = model.padded_length(noisy.shape[-1])
        total, comps = compute_losses(est, make_reference(clean, padded, model.cfg), w, model.cfg, padded)
    out = {"total": float(total.data)}
    out.update({k: float(v.data) for k, v in comps.items()})
    return out


# --------------------------------------------------------------------------
# metrics

SI_SDR_CAP = 1e3
SSNR_SEGMENT = 256
SSNR_RANGE = (-10.0, 35.0)


def _samples(x):
    return np.asarray(x.samples if isinstance(x, AudioBuffer) else x, dtype=np.float64)


def ssnr(ref, est, segment: int = SSNR_SEGMENT) -> float:
    r, e = _samples(ref), _samples(est)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {e.shape}")
    n = len(r) // segment
    if n < 1:
        raise ValueError(f"need at least {segment} samples for segmental SNR")
    r = r[:n * segment].reshape(n, segment)
    e = e[:n * segment].reshape(n, segment)
    sig = (r ** 2).sum(axis=1)
    err = ((r - e) ** 2).sum(axis=1)
    keep = sig > 0
    if not keep.any():
        raise ValueError("all reference segments are silent")
    with np.errstate(divide="ignore"):
        snr = np.where(err[keep] > 0, 10 * np.log10(sig[keep] / np.where(err[keep] > 0, err[keep], 1.0)), np.inf)
    return float(np.clip(snr, *SSNR_RANGE).mean())


def si_sdr(ref, est) -> float:
    r, e = _samples(ref), _samples(est)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {e.shape}")
    rr = float(r @ r)
    if rr == 0:
        raise ValueError("reference signal is all zeros")
    s = (float(e @ r) / rr) * r
    err = e - s
    ee = float(err @ err)
    if ee < 1e-30:
        return SI_SDR_CAP
    ss = float(s @ s)
    if ss == 0:
        return -SI_SDR_CAP
    return 10 * math.log10(ss / ee)


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)  # (path, ssnr_db, si_sdr_db)

    def add(self, path: str, ref, est):
        self.rows.append((str(path), ssnr(ref, est), si_sdr(ref, est)))

    def aggregate(self) -> dict:
        if not self.rows:
            return {}
        arr = np.array([[r[1], r[2]] for r in self.rows])
        return {"ssnr": (float(arr[:, 0].mean()), float(arr[:, 0].std())),
                "si_sdr": (float(arr[:, 1].mean()), float(arr[:, 1].std()))}

    def serialize(self) -> str:
        lines = [f"{p}\t{s:.4f}\t{d:.4f}" for p, s, d in self.rows]
        for name, (mu, sd) in self.aggregate().items():
            lines.append(f"#aggregate\t{name}\t{mu:.4f}±{sd:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "MetricReport":
        rep = cls()
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            p, s, d = line.split("\t")
            rep.rows.append((p, float(s), float(d)))
        return rep
