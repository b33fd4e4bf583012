"""RWSA-MambaUNet: encoder, three-level MambAttention U-Net, refinement heads and decoders.

Data flow for a waveform of L samples::

    stft -> (|X|^c, angle X) -> encoder -> U-Net -> (+ encoder) -> magnitude refine -> mask decoder
                                                 -> (+ encoder) -> phase refine     -> phase decoder
    est = (mask * |X|^c)^(1/c) * exp(i * phase) -> istft -> trim to L

Down-path and up-path blocks at the same resolution share one attention unit
(LayerNorm + MHA) when ``rwsa`` is on.  The bottleneck has no partner.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as tn
from .dsp import AudioBuffer, AudioError, StftConfig, istft_op, stft_op
from .flops import FlopsReport
from .nn import (BCTF, Conv2d, ConvBlock, ConvTranspose2d, DilatedDenseNet, LearnableSigmoid, ModuleList, NormAct,
                 PatchEmbed, SubPixelConv)
from .sequence import MambAttentionBlock, SharedAttention, TFMambaBlock
from .tensor import Module, ShapeError, Tensor, no_grad, tie

PAIRINGS = ("per_block", "per_level")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ModelConfig:
    C: int = 16
    N: int = 2
    heads_bottleneck: int = 8
    heads_other: int = 4
    levels: int = 3
    stft: StftConfig = field(default_factory=StftConfig)
    c: float = 0.3
    beta: float = 2.0
    d_state: int = 16
    d_conv: int = 4
    expand: int = 3
    rwsa: bool = True
    rwsa_pairing: str = "per_block"
    mha: bool = True
    tie_layernorm: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        for key in ("C", "N", "heads_bottleneck", "heads_other", "levels", "d_state", "d_conv", "expand"):
            v = getattr(self, key)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(key, f"must be a positive integer, got {v!r}")
        if self.levels < 2:
            raise ConfigError("levels", "need at least one downsampling")
        for lvl, width in enumerate(self.widths):
            h = self.heads_at(lvl)
            if width % h:
                key = "heads_bottleneck" if lvl == self.levels - 1 else "heads_other"
                raise ConfigError(key, f"width {width} at level {lvl} is not divisible by {h} heads")
        f_half = self.stft.n_freq // 2
        if f_half % self.scale:
            raise ConfigError("stft.n_fft", f"F'={f_half} not divisible by {self.scale}")
        if not 0 < self.c <= 1:
            raise ConfigError("c", "compression exponent must lie in (0, 1]")
        if self.beta <= 0:
            raise ConfigError("beta", "must be positive")
        if self.rwsa_pairing not in PAIRINGS:
            raise ConfigError("rwsa_pairing", f"expected one of {PAIRINGS}")

    @property
    def widths(self):
        return [self.C * 2 ** i for i in range(self.levels)]

    @property
    def scale(self):
        """Total down-sampling factor of the U-Net along T and F'."""
        return 2 ** (self.levels - 1)

    def heads_at(self, level):
        return self.heads_bottleneck if level == self.levels - 1 else self.heads_other

    def mamba_kw(self):
        return dict(d_state=self.d_state, d_conv=self.d_conv, expand=self.expand)

    def as_dict(self):
        d = asdict(self)
        d["stft"] = dict(n_fft=self.stft.n_fft, win_length=self.stft.win_length, hop=self.stft.hop)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("stft"), dict):
            d["stft"] = StftConfig(**d["stft"])
        return cls(**d)

    def with_(self, **kw):
        return replace(self, **kw)


PRESETS = {
    "XS": ModelConfig(C=16, N=2),
    "S": ModelConfig(C=16, N=4),
    "M": ModelConfig(C=24, N=4),
}


# --------------------------------------------------------------------------
# building blocks


class Encoder(Module):
    """(2 -> C) conv block, dilated DenseNet, (C -> C) conv block with frequency stride 2."""

    def __init__(self, ch, rng):
        super().__init__()
        self.ch = ch
        self.conv_in = ConvBlock(Conv2d(2, ch, 1, rng), ch)
        self.dense = DilatedDenseNet(ch, rng)
        self.conv_out = ConvBlock(Conv2d(ch, ch, (1, 3), rng, stride=(1, 2), padding=(0, 1)), ch)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 2:
            raise ShapeError(f"encoder expects [B, 2, T, F], got {x.shape}")
        if x.shape[3] % 2:
            raise ShapeError(f"frequency extent {x.shape[3]} is odd")
        return self.conv_out(self.dense(self.conv_in(x)))

    def flops(self, shape, report, name):
        s = self.conv_in.flops(shape, report, name + ".conv_in")
        s = self.dense.flops(s, report, name + ".dense")
        return self.conv_out.flops(s, report, name + ".conv_out")

    @staticmethod
    def analytic_params(ch):
        return (2 * ch + ch + 3 * ch) + DilatedDenseNet.analytic_params(ch) + (ch * ch * 3 + ch + 3 * ch)


class Stack(Module):
    """PatchEmbed followed by N MambAttention blocks."""

    def __init__(self, in_ch, width, n_blocks, heads, rng, attention, mamba_kw):
        super().__init__()
        self.embed = PatchEmbed(in_ch, width, rng)
        self.blocks = ModuleList(
            MambAttentionBlock(width, heads, rng, attention=attention, **mamba_kw) for _ in range(n_blocks))

    def forward(self, x):
        x = self.embed(x)
        for blk in self.blocks:
            x = blk(x)
        return x

    def flops(self, shape, report, name):
        s = self.embed.flops(shape, report, name + ".embed")
        for i, blk in enumerate(self.blocks):
            blk.flops(s, report, f"{name}.blocks.{i}")
        return s


class Refine(Module):
    """PatchEmbed, N TF-Mamba blocks and a 3x3 conv; no attention."""

    def __init__(self, ch, n_blocks, rng, mamba_kw):
        super().__init__()
        self.embed = PatchEmbed(ch, ch, rng)
        self.blocks = ModuleList(TFMambaBlock(ch, rng, **mamba_kw) for _ in range(n_blocks))
        self.conv = Conv2d(ch, ch, 3, rng)

    def forward(self, x):
        x = self.embed(x)
        for blk in self.blocks:
            x = blk(x)
        return self.conv(x)

    def flops(self, shape, report, name):
        s = self.embed.flops(shape, report, name + ".embed")
        for i, blk in enumerate(self.blocks):
            blk.flops(s, report, f"{name}.blocks.{i}")
        return self.conv.flops(s, report, name + ".conv")


class Downsample(Module):
    def __init__(self, in_ch, rng):
        super().__init__()
        self.conv = Conv2d(in_ch, 2 * in_ch, 3, rng, stride=2, padding=1)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"downsample needs even T and F, got {x.shape[2:]}")
        return self.conv(x)

    def flops(self, shape, report, name):
        return self.conv.flops(shape, report, name + ".conv")


class Upsample(Module):
    def __init__(self, in_ch, rng):
        super().__init__()
        if in_ch % 2:
            raise ShapeError(f"upsample needs an even channel count, got {in_ch}")
        self.conv = ConvTranspose2d(in_ch, in_ch // 2, 3, rng, stride=2, padding=1, output_padding=1)

    def forward(self, x):
        return self.conv(x)

    def flops(self, shape, report, name):
        return self.conv.flops(shape, report, name + ".conv")


class DecoderTrunk(Module):
    """DenseNet, sub-pixel upsampling of F' back to F, norm + PReLU."""

    def __init__(self, ch, rng):
        super().__init__()
        self.dense = DilatedDenseNet(ch, rng)
        self.upsample = SubPixelConv(ch, ch, rng, r=2)
        self.norm = NormAct(ch)

    def forward(self, x):
        return self.norm(self.upsample(self.dense(x)))

    def flops(self, shape, report, name):
        s = self.dense.flops(shape, report, name + ".dense")
        s = self.upsample.flops(s, report, name + ".upsample")
        return self.norm.flops(s, report, name + ".norm")


class MaskDecoder(Module):
    def __init__(self, ch, n_freq, beta, rng):
        super().__init__()
        self.trunk = DecoderTrunk(ch, rng)
        self.proj = ConvTranspose2d(ch, 1, 1, rng)
        self.act = LearnableSigmoid(n_freq, beta)

    def forward(self, x):
        return self.act(self.proj(self.trunk(x)))

    def flops(self, shape, report, name):
        s = self.trunk.flops(shape, report, name + ".trunk")
        s = self.proj.flops(s, report, name + ".proj")
        return self.act.flops(s, report, name + ".act")


def phase_decode(real, imag):
    """atan2(imag, real) in (-pi, pi], with atan2(0, 0) = 0."""
    if isinstance(real, Tensor) or isinstance(imag, Tensor):
        if real.shape != imag.shape:
            raise ShapeError(f"phase components differ in shape: {real.shape} vs {imag.shape}")
        return tn.atan2(imag, real)
    real, imag = np.asarray(real, dtype=np.float64), np.asarray(imag, dtype=np.float64)
    if real.shape != imag.shape:
        raise ShapeError(f"phase components differ in shape: {real.shape} vs {imag.shape}")
    return np.arctan2(imag, real)


class PhaseDecoder(Module):
    def __init__(self, ch, rng):
        super().__init__()
        self.trunk = DecoderTrunk(ch, rng)
        self.real = Conv2d(ch, 1, 1, rng)
        self.imag = Conv2d(ch, 1, 1, rng)

    def forward(self, x):
        h = self.trunk(x)
        return phase_decode(self.real(h), self.imag(h))

    def flops(self, shape, report, name):
        s = self.trunk.flops(shape, report, name + ".trunk")
        self.real.flops(s, report, name + ".real")
        s = self.imag.flops(s, report, name + ".imag")
        report.add(name + ".atan2", "activation", int(np.prod(s)))
        return s


# --------------------------------------------------------------------------
# full model


@dataclass
class Estimate:
    """Differentiable outputs of one spectral forward pass (batch-major)."""
    wave: Tensor          # [B, L]
    mask: Tensor          # [B, T, F]
    mag_c: Tensor         # compressed magnitude [B, T, F]
    phase: Tensor         # [B, T, F]
    re_c: Tensor          # compressed complex spectrum, real part
    im_c: Tensor
    length: int
    trace: dict = field(default_factory=dict)


class RWSAMambaUNet(Module):
    def __init__(self, cfg: ModelConfig, rng):
        super().__init__()
        object.__setattr__(self, "cfg", cfg)
        C, N, kw = cfg.C, cfg.N, cfg.mamba_kw()
        w = cfg.widths
        last = cfg.levels - 1
        self.encoder = Encoder(C, rng)
        self.down = ModuleList()
        self.downsample = ModuleList()
        for lvl in range(last):
            self.down.append(Stack(w[lvl], w[lvl], N, cfg.heads_at(lvl), rng, cfg.mha, kw))
            self.downsample.append(Downsample(w[lvl], rng))
        self.bottleneck = Stack(w[last], w[last], N, cfg.heads_at(last), rng, cfg.mha, kw)
        self.upsample = ModuleList()
        self.up = ModuleList()
        for lvl in range(last):
            self.upsample.append(Upsample(w[lvl + 1], rng))
            self.up.append(Stack(2 * w[lvl], w[lvl], N, cfg.heads_at(lvl), rng, cfg.mha, kw))
        self.mag_refine = Refine(C, N, rng, kw)
        self.pha_refine = Refine(C, N, rng, kw)
        self.mask_decoder = MaskDecoder(C, cfg.stft.n_freq, cfg.beta, rng)
        self.phase_decoder = PhaseDecoder(C, rng)
        object.__setattr__(self, "ties", {})
        if cfg.rwsa and cfg.mha:
            self._apply_ties()

    # -- weight sharing --------------------------------------------------------
    def tie_pairs(self):
        """(canonical block path, alias block path) for every tied attention unit."""
        cfg = self.cfg
        pairs = []
        for lvl in range(cfg.levels - 1):
            if cfg.rwsa_pairing == "per_block":
                pairs += [(f"down.{lvl}.blocks.{i}", f"up.{lvl}.blocks.{i}") for i in range(cfg.N)]
            else:
                root = f"down.{lvl}.blocks.0"
                pairs += [(root, f"down.{lvl}.blocks.{i}") for i in range(1, cfg.N)]
                pairs += [(root, f"up.{lvl}.blocks.{i}") for i in range(cfg.N)]
        return pairs

    def _apply_ties(self):
        for canon, alias in self.tie_pairs():
            unit = self.resolve(canon + ".attn")
            for rel, p in unit.named_parameters():
                if rel.startswith("norm.") and not self.cfg.tie_layernorm:
                    continue
                site = f"{alias}.attn.{rel}"
                tie(p, self, site)
                self.ties[site] = f"{canon}.attn.{rel}"

    def tied_units(self) -> int:
        return len(self.tie_pairs()) if (self.cfg.rwsa and self.cfg.mha) else 0

    # -- forward ---------------------------------------------------------------
    def forward(self, x, trace=None):
        """x: [B, 2, T, F] (compressed magnitude, phase) -> (mask, phase), each [B, T, F]."""
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != 2 or x.shape[3] != cfg.stft.n_freq:
            raise ShapeError(f"model input must be [B, 2, T, {cfg.stft.n_freq}], got {x.shape}")
        if x.shape[2] % cfg.scale:
            raise ShapeError(f"T={x.shape[2]} is not divisible by {cfg.scale}")
        if x.axes is None:
            x = x.reshape(x.shape, axes=BCTF)
        rec = trace if trace is not None else {}
        e = self.encoder(x)
        rec["encoder"] = e
        skips, h = [], e
        for lvl in range(cfg.levels - 1):
            s = self.down[lvl](h) + h
            skips.append(s)
            h = self.downsample[lvl](s)
            rec[f"down{lvl}"], rec[f"downsample{lvl}"] = s, h
        h = self.bottleneck(h) + h
        rec["bottleneck"] = h
        for lvl in reversed(range(cfg.levels - 1)):
            u = self.upsample[lvl](h)
            rec[f"upsample{lvl}"] = u
            h = self.up[lvl](tn.concat([u, skips[lvl]], axis=1)) + u
            rec[f"up{lvl}"] = h
        m = self.mag_refine(h) + e
        p = self.pha_refine(h) + e
        rec["mag_refine"], rec["pha_refine"] = m, p
        b, _, t, f = x.shape
        mask = self.mask_decoder(m).reshape((b, t, f))
        phase = self.phase_decoder(p).reshape((b, t, f))
        rec["mask"], rec["phase"] = mask, phase
        return mask, phase

    def padded_length(self, length: int) -> int:
        """Smallest L' >= length with T = L'//hop + 1 divisible by the U-Net scale."""
        hop, k = self.cfg.stft.hop, self.cfg.scale
        n = math.ceil((length / hop + 1) / k)
        return hop * (k * max(n, 1) - 1)

    def spectral_forward(self, noisy, trace=None) -> Estimate:
        """Differentiable pass from a noisy waveform array [B, L] to an :class:`Estimate`."""
        cfg = self.cfg
        noisy = np.asarray(noisy, dtype=tn.default_dtype())
        if noisy.ndim == 1:
            noisy = noisy[None]
        length = noisy.shape[-1]
        if length < cfg.stft.hop:
            raise AudioError(f"input of {length} samples is shorter than one hop ({cfg.stft.hop})")
        padded = self.padded_length(length)
        x = np.pad(noisy, ((0, 0), (0, padded - length)))
        with no_grad():
            re, im = stft_op(Tensor(x), cfg.stft)
        mag = np.sqrt(re.data ** 2 + im.data ** 2)
        mag_c = mag ** cfg.c
        phase_in = np.arctan2(im.data, re.data)
        feats = Tensor(np.stack([mag_c, phase_in], axis=1), axes=BCTF)
        mask, phase = self.forward(feats, trace)
        est_mag_c = mask * Tensor(mag_c)
        est_mag = est_mag_c ** (1.0 / cfg.c)
        cos, sin = tn.cos(phase), tn.sin(phase)
        wave = istft_op(est_mag * cos, est_mag * sin, padded, cfg.stft)[:, :length]
        return Estimate(wave, mask, est_mag_c, phase, est_mag_c * cos, est_mag_c * sin, length,
                        trace if trace is not None else {})

    def enhance(self, audio, normalize=True):
        """Enhance one waveform; returns (AudioBuffer, mask, est_mag, est_phase) as arrays."""
        if isinstance(audio, AudioBuffer):
            if audio.sample_rate != 16000:
                raise AudioError(f"expected 16 kHz audio, got {audio.sample_rate} Hz")
            samples = audio.samples
        else:
            samples = np.asarray(audio, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError("expected mono audio")
        gain = rms_gain(samples) if normalize else 1.0
        with no_grad():
            est = self.spectral_forward(samples * gain)
        out = est.wave.data[0].astype(np.float64) / gain
        mag = est.mag_c.data[0].astype(np.float64) ** (1.0 / self.cfg.c)
        return AudioBuffer(out), est.mask.data[0], mag, est.phase.data[0]

    # -- accounting ------------------------------------------------------------
    def count_params(self):
        """Unique parameter counts per top-level module and in total."""
        per, total = {}, 0
        for name, p in self.named_parameters():
            top = name.split(".")[0]
            per[top] = per.get(top, 0) + p.size
            total += p.size
        return per, total

    def flops(self, duration_s: float) -> FlopsReport:
        cfg = self.cfg
        length = int(round(duration_s * 16000))
        if length < cfg.stft.hop:
            raise ValueError(f"duration {duration_s}s is shorter than one hop")
        t = cfg.stft.n_frames(self.padded_length(length))
        f = cfg.stft.n_freq
        report = FlopsReport(duration_s)
        e = self.encoder.flops((1, 2, t, f), report, "encoder")
        h = e
        for lvl in range(cfg.levels - 1):
            self.down[lvl].flops(h, report, f"down.{lvl}")
            report.add(f"down.{lvl}.skip", "elementwise", np.prod(h))
            h = self.downsample[lvl].flops(h, report, f"downsample.{lvl}")
        self.bottleneck.flops(h, report, "bottleneck")
        report.add("bottleneck.skip", "elementwise", np.prod(h))
        for lvl in reversed(range(cfg.levels - 1)):
            u = self.upsample[lvl].flops(h, report, f"upsample.{lvl}")
            cat = (u[0], 2 * u[1], u[2], u[3])
            h = self.up[lvl].flops(cat, report, f"up.{lvl}")
            report.add(f"up.{lvl}.skip", "elementwise", np.prod(h))
        for head in ("mag_refine", "pha_refine"):
            getattr(self, head).flops(h, report, head)
            report.add(head + ".skip", "elementwise", np.prod(h))
        s = self.mask_decoder.flops(e, report, "mask_decoder")
        report.add("mask_decoder.apply", "elementwise", np.prod(s))
        self.phase_decoder.flops(e, report, "phase_decoder")
        return report


def rms_gain(samples: np.ndarray) -> float:
    """Scale that brings a waveform to unit RMS; 1 for silence."""
    e = float(np.sum(np.asarray(samples, dtype=np.float64) ** 2))
    return math.sqrt(len(samples) / e) if e > 0 else 1.0


def build_model(cfg: ModelConfig, seed: int = 0) -> RWSAMambaUNet:
    return RWSAMambaUNet(cfg, np.random.default_rng(seed))


def count_params(model: RWSAMambaUNet):
    return model.count_params()


def count_flops(model: RWSAMambaUNet, duration_s: float) -> FlopsReport:
    return model.flops(duration_s)


def attention_footprint(width: int, tie_layernorm: bool = True) -> int:
    return SharedAttention.param_count(width) - (0 if tie_layernorm else 2 * width)
