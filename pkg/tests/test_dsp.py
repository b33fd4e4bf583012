import numpy as np
import pytest
from scipy.io import wavfile

from rwsaunet import dsp
from rwsaunet.dsp import AudioBuffer, AudioError, StftConfig
from rwsaunet.toy import harmonic_speech

CFG = StftConfig()


def test_config_validation():
    with pytest.raises(ValueError):
        StftConfig(n_fft=256, win_length=510)
    with pytest.raises(ValueError):
        StftConfig(hop=510)
    assert CFG.n_freq == 256 and CFG.n_frames(30600) == 256


def test_zero_input_gives_zero_spectrogram():
    spec = dsp.stft(AudioBuffer(np.zeros(30600)))
    assert spec.shape == (256, 256)
    assert not np.any(spec.frames)


@pytest.mark.parametrize("k", [10, 37, 100])
def test_bin_center_sine_peaks_at_its_bin(k):
    n = np.arange(16000)
    spec = dsp.stft(np.sin(2 * np.pi * k * n / 510))
    interior = spec.magnitude[5:-5]
    assert np.all(interior.argmax(axis=-1) == k)


@pytest.mark.parametrize("signal", ["noise", "speech"])
def test_roundtrip(signal, rng):
    x = rng.normal(size=30600) if signal == "noise" else harmonic_speech(30600, rng)
    y = dsp.istft(dsp.stft(x), len(x))
    assert np.max(np.abs(x - y.samples)) < 1e-5


@pytest.mark.parametrize("length", [1, 2, 119, 121, 4800])
def test_roundtrip_odd_lengths(length, rng):
    x = rng.normal(size=length)
    np.testing.assert_allclose(dsp._istft_array(dsp._stft_array(x, CFG), length, CFG), x, atol=1e-9)


def test_istft_zero_and_linear(rng):
    t = CFG.n_frames(4800)
    zero = dsp.ComplexSpectrogram(np.zeros((t, 256), complex))
    assert not np.any(dsp._istft_array(zero.frames, 4800, CFG))
    s1 = rng.normal(size=(t, 256)) + 1j * rng.normal(size=(t, 256))
    s2 = rng.normal(size=(t, 256)) + 1j * rng.normal(size=(t, 256))
    lhs = dsp._istft_array(2.5 * s1 - 0.7 * s2, 4800, CFG)
    rhs = 2.5 * dsp._istft_array(s1, 4800, CFG) - 0.7 * dsp._istft_array(s2, 4800, CFG)
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_istft_rejects_overlong_output():
    spec = dsp.stft(np.ones(1200))
    with pytest.raises(AudioError):
        dsp.istft(spec, 5000)


def test_stft_rejects_empty():
    with pytest.raises(AudioError):
        dsp.stft(np.zeros(0))


def test_phase_is_wrapped(rng):
    spec = dsp.stft(rng.normal(size=4000))
    assert np.all(spec.phase > -np.pi) and np.all(spec.phase <= np.pi)
    assert dsp.wrap_phase(np.array([-np.pi]))[0] == pytest.approx(np.pi)


def test_parseval(rng):
    x = rng.normal(size=16000)
    z = dsp.stft(x).frames
    w = CFG.window()
    weighted = (np.abs(z) ** 2 * dsp._edge_weight(CFG.n_fft, CFG.n_freq)).sum()
    est = weighted / (CFG.n_fft * (w * w).sum() / CFG.hop)
    assert abs(est / dsp.energy(x) - 1) < 0.01


@pytest.mark.parametrize("trial", range(3))
def test_stft_adjoint(trial):
    rng = np.random.default_rng(trial)
    length = 1000 + 37 * trial
    x = rng.normal(size=length)
    s = rng.normal(size=(CFG.n_frames(length), 256)) + 1j * rng.normal(size=(CFG.n_frames(length), 256))
    lhs = np.real(np.vdot(dsp.stft(x).frames, s))
    rhs = np.dot(x, dsp.stft_adjoint(s, length))
    assert abs(lhs - rhs) / abs(lhs) < 1e-8


@pytest.mark.parametrize("trial", range(3))
def test_istft_adjoint(trial):
    rng = np.random.default_rng(10 + trial)
    length, t = 1500, CFG.n_frames(1500)
    s = rng.normal(size=(t, 256)) + 1j * rng.normal(size=(t, 256))
    g = rng.normal(size=length)
    lhs = np.dot(dsp._istft_array(s, length, CFG), g)
    rhs = np.real(np.vdot(s, dsp.istft_adjoint(g, t)))
    assert abs(lhs - rhs) / abs(lhs) < 1e-8


def test_compress():
    assert dsp.compress(1.0) == 1.0 and dsp.compress(0.0) == 0.0
    m = np.random.default_rng(0).uniform(0, 10, 1000)
    np.testing.assert_allclose(dsp.inverse_compress(dsp.compress(m)), m, rtol=1e-6)
    with pytest.raises(ValueError):
        dsp.compress(np.array([-1.0]))
    with pytest.raises(ValueError):
        dsp.compress(1.0, c=0.0)


def test_mix_at_snr(rng):
    clean = AudioBuffer(rng.normal(size=8000))
    noise = AudioBuffer(rng.normal(size=8000) * 3)
    for snr in (0.0, 60.0, -5.0):
        mixed = dsp.mix_at_snr(clean, noise, snr)
        resid = dsp.energy(mixed.samples - clean.samples)
        assert abs(10 * np.log10(dsp.energy(clean) / resid) - snr) < 1e-9
    mixed = dsp.mix_at_snr(clean, noise, 60.0)
    assert dsp.energy(mixed.samples - clean.samples) / dsp.energy(clean) == pytest.approx(1e-6, rel=1e-9)


def test_mix_orthogonal_sines():
    n = np.arange(16000)
    clean = AudioBuffer(np.sin(2 * np.pi * 100 * n / 16000))
    noise = AudioBuffer(np.cos(2 * np.pi * 100 * n / 16000))
    g = dsp.noise_gain(clean, noise, 10.0)
    assert g == pytest.approx(10 ** -0.5, rel=1e-9)
    mixed = dsp.mix_at_snr(clean, noise, 10.0)
    assert dsp.energy(mixed) == pytest.approx(dsp.energy(clean) * 1.1, rel=1e-9)


def test_mix_errors():
    with pytest.raises(AudioError):
        dsp.mix_at_snr(AudioBuffer(np.ones(4)), AudioBuffer(np.ones(5)), 0)
    with pytest.raises(AudioError):
        dsp.mix_at_snr(AudioBuffer(np.zeros(4)), AudioBuffer(np.ones(4)), 0)


def test_audio_buffer_invariants():
    with pytest.raises(AudioError):
        AudioBuffer(np.array([]))
    with pytest.raises(AudioError):
        AudioBuffer(np.array([1.0, np.nan]))
    assert AudioBuffer(np.zeros(8000)).duration == 0.5


def test_wav_roundtrip(tmp_path, rng):
    x = AudioBuffer(np.clip(rng.normal(size=1000) * 0.3, -1, 1))
    dsp.write_wav(tmp_path / "a.wav", x)
    y = dsp.read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(x.samples - y.samples)) <= 1 / 32768
    wavfile.write(tmp_path / "f.wav", 16000, x.samples.astype(np.float32))
    assert np.allclose(dsp.read_wav(tmp_path / "f.wav").samples, x.samples, atol=1e-7)


def test_wav_clips_to_int16_range(tmp_path):
    dsp.write_wav(tmp_path / "c.wav", AudioBuffer(np.array([2.0, -2.0, 0.0])))
    _, data = wavfile.read(tmp_path / "c.wav")
    assert data.tolist() == [32767, -32768, 0]


@pytest.mark.parametrize("rate,data", [
    (8000, np.zeros(10, np.int16)),
    (16000, np.zeros((10, 2), np.int16)),
    (16000, np.zeros(10, np.int32)),
])
def test_wav_rejects_unsupported(tmp_path, rate, data):
    wavfile.write(tmp_path / "bad.wav", rate, data)
    with pytest.raises(AudioError):
        dsp.read_wav(tmp_path / "bad.wav")
