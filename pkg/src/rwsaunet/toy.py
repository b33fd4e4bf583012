"""Synthetic paired data: harmonic "speech" in filtered noise."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import AudioBuffer, mix_at_snr, read_wav, write_wav

SNR_GRID = (-10, -5, 0, 5, 10, 15, 20)
SR = 16000


def harmonic_speech(length: int, rng: np.random.Generator) -> np.ndarray:
    """3-5 harmonics of a gliding f0 under a syllable-rate envelope."""
    t = np.arange(length) / SR
    f0 = rng.uniform(110, 240) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t + rng.uniform(0, 6)))
    phase = 2 * np.pi * np.cumsum(f0) / SR
    x = np.zeros(length)
    for k in range(1, rng.integers(3, 6) + 1):
        x += rng.uniform(0.3, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    rate = rng.uniform(3, 6)
    env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 1.5
    x *= 0.2 + 0.8 * env
    return 0.3 * x / np.max(np.abs(x))


def filtered_noise(length: int, rng: np.random.Generator) -> np.ndarray:
    lo = rng.uniform(100, 2000)
    hi = min(lo * rng.uniform(2, 6), 7500)
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=SR, output="sos")
    n = signal.sosfilt(sos, rng.standard_normal(length))
    return n / np.std(n)


def make_pairs(count: int, length: int, seed: int = 0, snrs=SNR_GRID):
    """Return [(clean, noisy, snr_db)] with SNRs cycling through ``snrs``."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        clean = AudioBuffer(harmonic_speech(length, rng))
        noise = AudioBuffer(filtered_noise(length, rng))
        snr = snrs[i % len(snrs)]
        pairs.append((clean, mix_at_snr(clean, noise, snr), snr))
    return pairs


def write_dataset(directory, count: int, length: int, seed: int = 0, snrs=SNR_GRID):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, (clean, noisy, _) in enumerate(make_pairs(count, length, seed, snrs)):
        peak = max(np.max(np.abs(noisy.samples)), np.max(np.abs(clean.samples)), 1e-9)
        g = 0.9 / peak if peak > 0.9 else 1.0
        write_wav(d / f"pair{i:03d}_clean.wav", AudioBuffer(clean.samples * g))
        write_wav(d / f"pair{i:03d}_noisy.wav", AudioBuffer(noisy.samples * g))
    return d


def load_dataset(directory):
    """Load ``*_clean.wav`` / ``*_noisy.wav`` pairs sorted by stem."""
    d = Path(directory)
    pairs = []
    for clean_path in sorted(d.glob("*_clean.wav")):
        noisy_path = clean_path.with_name(clean_path.name[: -len("_clean.wav")] + "_noisy.wav")
        if noisy_path.exists():
            pairs.append((clean_path.stem[:-6], read_wav(clean_path), read_wav(noisy_path)))
    return pairs


def main(argv=None):
    import argparse
    p = argparse.ArgumentParser(prog="python -m rwsaunet.toy", description="write synthetic clean/noisy WAV pairs")
    p.add_argument("out")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--samples", type=int, default=30600)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    write_dataset(args.out, args.count, args.samples, args.seed)
    print(f"wrote {args.count} pairs to {args.out}")


if __name__ == "__main__":
    main()
