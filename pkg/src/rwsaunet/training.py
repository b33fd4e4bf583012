"""Small-scale training loop used by the toy overfit run and the CLI."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import rms_gain
from .objectives import COMPONENTS, Adam, LossWeights, evaluate_loss, si_sdr, train_step
from .tensor import no_grad

LOG_HEADER = "step,loss_total," + ",".join(f"loss_{c}" for c in COMPONENTS)


@dataclass
class TrainResult:
    log: list = field(default_factory=list)          # one dict per step
    initial_loss: float = float("nan")               # mean over all pairs before training
    final_loss: float = float("nan")                 # mean over all pairs after the last step
    best_step: int = 0
    best_si_sdr: float = float("-inf")
    noisy_si_sdr: float = float("nan")
    best_state: dict = field(default_factory=dict)

    def csv(self) -> str:
        rows = [LOG_HEADER]
        for r in self.log:
            rows.append(",".join([str(r["step"]), repr(r["total"])] + [repr(r[c]) for c in COMPONENTS]))
        return "\n".join(rows) + "\n"


def normalised_pairs(pairs):
    """Scale each (noisy, clean) pair by the unit-RMS gain of its noisy signal."""
    out = []
    for noisy, clean in pairs:
        noisy = np.asarray(noisy, dtype=np.float64)
        clean = np.asarray(clean, dtype=np.float64)
        if noisy.shape != clean.shape:
            raise ValueError(f"pair length mismatch: {noisy.shape} vs {clean.shape}")
        g = rms_gain(noisy)
        out.append((noisy * g, clean * g))
    return out


def mean_loss(model, pairs, w):
    return float(np.mean([evaluate_loss(model, n, c, w)["total"] for n, c in pairs]))


def mean_si_sdr(model, pairs):
    vals = []
    with no_grad():
        for n, c in pairs:
            est = model.spectral_forward(n).wave.data[0].astype(np.float64)
            vals.append(si_sdr(c, est))
    return float(np.mean(vals))


def snapshot(model):
    return {name: p.data.copy() for name, p in model.named_parameters()}


def restore(model, state):
    for name, p in model.named_parameters():
        p.data[...] = state[name]


def train(model, pairs, steps: int, w: LossWeights | None = None, lr: float = 1e-3, eval_every: int = 50,
          batch: int = 1, progress=None) -> TrainResult:
    """Cycle through ``pairs`` (noisy, clean), ``batch`` at a time, for ``steps`` updates.

    All pairs must share one length when ``batch`` > 1.

    The best checkpoint by mean SI-SDR over the pairs is kept in ``best_state``.
    """
    if not pairs:
        raise ValueError("empty dataset")
    w = w or LossWeights()
    data = normalised_pairs(pairs)
    opt = Adam(model.parameters(), lr=lr)
    res = TrainResult()
    res.initial_loss = mean_loss(model, data, w)
    res.noisy_si_sdr = float(np.mean([si_sdr(c, n) for n, c in data]))
    res.best_si_sdr, res.best_step, res.best_state = mean_si_sdr(model, data), 0, snapshot(model)
    for step in range(1, steps + 1):
        picks = [data[((step - 1) * batch + j) % len(data)] for j in range(batch)]
        noisy = np.stack([p[0] for p in picks])
        clean = np.stack([p[1] for p in picks])
        comps = train_step(model, opt, noisy, clean, w, step=step)
        comps["step"] = step
        res.log.append(comps)
        if progress:
            progress(comps)
        if step % eval_every == 0 or step == steps:
            score = mean_si_sdr(model, data)
            if score > res.best_si_sdr:
                res.best_si_sdr, res.best_step, res.best_state = score, step, snapshot(model)
    res.final_loss = mean_loss(model, data, w)
    return res
