"""Waveform/spectrogram conversion, power-law compression, SNR mixing and WAV I/O.

The STFT is centred: the waveform is reflect-padded by ``n_fft // 2`` on both
sides, so a signal of ``L`` samples yields ``L // hop + 1`` frames.  The
inverse uses windowed overlap-add divided by the summed squared window.

:func:`stft_op` and :func:`istft_op` are the same maps as engine ops over
(real, imag) tensor pairs; their backward passes are the exact adjoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.io import wavfile

from .tensor import Tensor, make


class AudioError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise AudioError("audio must be a non-empty mono sequence")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("audio contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 510
    win_length: int = 510
    hop: int = 120
    centered: bool = True

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ValueError("win_length must not exceed n_fft")
        if not 0 < self.hop < self.win_length:
            raise ValueError("hop must be positive and smaller than win_length")

    @property
    def n_freq(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        if self.centered:
            return length // self.hop + 1
        return (length - self.n_fft) // self.hop + 1

    def window(self) -> np.ndarray:
        return _window(self.n_fft, self.win_length)


@lru_cache(maxsize=8)
def _window(n_fft: int, win_length: int) -> np.ndarray:
    n = np.arange(win_length)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * n / win_length)  # periodic Hann
    left = (n_fft - win_length) // 2
    out = np.zeros(n_fft)
    out[left:left + win_length] = w
    out.flags.writeable = False
    return out


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # complex [T, F] (or [..., T, F])
    stft_config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        if self.frames.shape[-1] != self.stft_config.n_freq:
            raise ValueError(f"expected {self.stft_config.n_freq} bins, got {self.frames.shape[-1]}")

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.frames)

    @property
    def phase(self) -> np.ndarray:
        return wrap_phase(np.angle(self.frames))

    @property
    def shape(self):
        return self.frames.shape


def wrap_phase(p: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    p = np.asarray(p)
    return np.where(p <= -np.pi, p + 2 * np.pi, p)


# --------------------------------------------------------------------------
# framing helpers (all linear, shared by the numpy and engine paths)


@lru_cache(maxsize=32)
def _pad_index(length: int, pad: int) -> np.ndarray:
    """Source index for every sample of the reflect-padded signal."""
    idx = np.arange(-pad, length + pad)
    if length == 1:
        return np.zeros_like(idx)
    period = 2 * (length - 1)
    idx = np.abs(idx) % period
    idx = np.where(idx >= length, period - idx, idx)
    idx.flags.writeable = False
    return idx


def _frame_index(n_frames: int, n_fft: int, hop: int) -> np.ndarray:
    return np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """frames [..., T, N] -> [..., (T-1)*hop + N]."""
    *lead, n_frames, n = frames.shape
    out = np.zeros((*lead, (n_frames - 1) * hop + n), dtype=frames.dtype)
    for t in range(n_frames):
        out[..., t * hop:t * hop + n] += frames[..., t, :]
    return out


@lru_cache(maxsize=32)
def _wss(n_frames: int, n_fft: int, win_length: int, hop: int) -> np.ndarray:
    w = _window(n_fft, win_length)
    return _overlap_add(np.broadcast_to(w * w, (n_frames, n_fft)), hop)


def _edge_weight(n_fft: int, n_freq: int) -> np.ndarray:
    c = np.full(n_freq, 2.0)
    c[0] = 1.0
    if n_fft % 2 == 0:
        c[-1] = 1.0
    return c


def _stft_array(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    length = x.shape[-1]
    if length < 1:
        raise AudioError("audio shorter than one sample")
    if cfg.centered:
        x = x[..., _pad_index(length, cfg.n_fft // 2)]
    n_frames = (x.shape[-1] - cfg.n_fft) // cfg.hop + 1
    frames = x[..., _frame_index(n_frames, cfg.n_fft, cfg.hop)] * cfg.window()
    return np.fft.rfft(frames, axis=-1)


def _stft_adjoint_array(z: np.ndarray, length: int, cfg: StftConfig) -> np.ndarray:
    """Adjoint of the real-linear map x -> stft(x) under <a, b> = Re sum(conj(a) b)."""
    n = cfg.n_fft
    z = z / _edge_weight(n, cfg.n_freq)
    frames = np.fft.irfft(z, n=n, axis=-1) * n * cfg.window()
    padded = _overlap_add(frames, cfg.hop)
    if not cfg.centered:
        out = np.zeros((*padded.shape[:-1], length), dtype=padded.dtype)
        out[..., :padded.shape[-1]] = padded[..., :length]
        return out
    idx = _pad_index(length, n // 2)
    if padded.shape[-1] < idx.shape[0]:
        padded = np.pad(padded, [(0, 0)] * (padded.ndim - 1) + [(0, idx.shape[0] - padded.shape[-1])])
    padded = padded[..., :idx.shape[0]]
    flat = padded.reshape(-1, padded.shape[-1])
    out = np.stack([np.bincount(idx, weights=row, minlength=length) for row in flat])
    return out.reshape(*padded.shape[:-1], length)


def _istft_array(z: np.ndarray, length: int, cfg: StftConfig) -> np.ndarray:
    n_frames = z.shape[-2]
    span = (n_frames - 1) * cfg.hop + cfg.n_fft - (cfg.n_fft // 2 if cfg.centered else 0)
    if length > span:
        raise AudioError(f"out_len {length} exceeds synthesizable span {span}")
    frames = np.fft.irfft(z, n=cfg.n_fft, axis=-1) * cfg.window()
    y = _overlap_add(frames, cfg.hop)
    wss = _wss(n_frames, cfg.n_fft, cfg.win_length, cfg.hop)
    start = cfg.n_fft // 2 if cfg.centered else 0
    sl = slice(start, start + length)
    return y[..., sl] / wss[sl]


def _istft_adjoint_array(g: np.ndarray, n_frames: int, cfg: StftConfig) -> np.ndarray:
    """Adjoint of (complex spectrogram) -> istft waveform; returns complex cotangent."""
    length = g.shape[-1]
    wss = _wss(n_frames, cfg.n_fft, cfg.win_length, cfg.hop)
    start = cfg.n_fft // 2 if cfg.centered else 0
    buf = np.zeros((*g.shape[:-1], wss.shape[0]), dtype=np.result_type(g, np.float32))
    buf[..., start:start + length] = g / wss[start:start + length]
    frames = buf[..., _frame_index(n_frames, cfg.n_fft, cfg.hop)] * cfg.window()
    spec = np.fft.rfft(frames, axis=-1)
    return spec * (_edge_weight(cfg.n_fft, cfg.n_freq) / cfg.n_fft)


# --------------------------------------------------------------------------
# public numpy API


def stft(audio, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    x = audio.samples if isinstance(audio, AudioBuffer) else np.asarray(audio)
    return ComplexSpectrogram(_stft_array(x, cfg), cfg)


def istft(spec: ComplexSpectrogram, out_len: int, sample_rate: int = 16000):
    y = _istft_array(spec.frames, out_len, spec.stft_config)
    return AudioBuffer(y, sample_rate) if y.ndim == 1 else y


def stft_adjoint(spec: np.ndarray, length: int, cfg: StftConfig | None = None) -> np.ndarray:
    return _stft_adjoint_array(spec, length, cfg or StftConfig())


def istft_adjoint(wave: np.ndarray, n_frames: int, cfg: StftConfig | None = None) -> np.ndarray:
    return _istft_adjoint_array(wave, n_frames, cfg or StftConfig())


def compress(mag, c: float = 0.3):
    mag = np.asarray(mag)
    if not 0 < c <= 1:
        raise ValueError("compression exponent must lie in (0, 1]")
    if np.any(mag < 0):
        raise ValueError("compress expects non-negative magnitudes")
    return mag ** c


def inverse_compress(x, c: float = 0.3):
    x = np.asarray(x)
    if np.any(x < 0):
        raise ValueError("inverse_compress expects non-negative input")
    return x ** (1.0 / c)


def energy(x) -> float:
    x = x.samples if isinstance(x, AudioBuffer) else np.asarray(x)
    return float(np.dot(x, x))


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float) -> AudioBuffer:
    """clean + g * noise with g chosen so the global SNR equals ``snr_db``."""
    if len(clean) != len(noise):
        raise AudioError("clean and noise must have equal length")
    ec, en = energy(clean), energy(noise)
    if ec <= 0 or en <= 0:
        raise AudioError("zero-energy input")
    g = np.sqrt(ec / (en * 10 ** (snr_db / 10)))
    return AudioBuffer(clean.samples + g * noise.samples, clean.sample_rate)


def noise_gain(clean: AudioBuffer, noise: AudioBuffer, snr_db: float) -> float:
    return float(np.sqrt(energy(clean) / (energy(noise) * 10 ** (snr_db / 10))))


# --------------------------------------------------------------------------
# engine ops


def stft_op(x: Tensor, cfg: StftConfig) -> tuple[Tensor, Tensor]:
    """Differentiable STFT of ``x`` [..., L]; returns (real, imag) of shape [..., T, F]."""
    length = x.shape[-1]
    z = _stft_array(x.data, cfg)
    dtype = x.dtype
    re = z.real.astype(dtype)
    im = z.imag.astype(dtype)
    # One complex node keeps the adjoint exact; split into parts afterwards.
    packed = make(np.stack([re, im]), (x,),
                  lambda g: (_stft_adjoint_array(g[0] + 1j * g[1], length, cfg).astype(dtype),), "stft")
    return packed[0], packed[1]


def istft_op(re: Tensor, im: Tensor, length: int, cfg: StftConfig) -> Tensor:
    """Differentiable inverse STFT from (real, imag) [..., T, F] to [..., length]."""
    n_frames = re.shape[-2]
    dtype = re.dtype
    y = _istft_array(re.data + 1j * im.data, length, cfg).astype(dtype)

    def bw(g):
        z = _istft_adjoint_array(g, n_frames, cfg)
        return z.real.astype(dtype), z.imag.astype(dtype)
    return make(y, (re, im), bw, "istft")


# --------------------------------------------------------------------------
# WAV I/O


def read_wav(path, expected_rate: int = 16000) -> AudioBuffer:
    rate, data = wavfile.read(path)
    if rate != expected_rate:
        raise AudioError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.ndim != 1:
        raise AudioError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    x = np.clip(audio.samples, -1.0, 1.0 - 1.0 / 32768)
    wavfile.write(path, audio.sample_rate, np.round(x * 32768).astype(np.int16))
