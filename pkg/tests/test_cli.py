import json

import numpy as np
import pytest

from rwsaunet import cli
from rwsaunet.dsp import AudioBuffer, energy, mix_at_snr, read_wav, write_wav
from rwsaunet.model import PRESETS, build_model
from rwsaunet.objectives import SI_SDR_CAP, MetricReport, si_sdr
from rwsaunet.toy import write_dataset
from rwsaunet.weights import WeightStore, content_hash

SMALL = "train.segment=840\ntrain.batch=1\ntrain.eval_every=1\n"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def small_cfg(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


@pytest.fixture
def toy_dir(tmp_path):
    return write_dataset(tmp_path / "toy", 2, 840, seed=0)


@pytest.fixture
def init_weights(tmp_path, capsys, small_cfg, toy_dir):
    out = tmp_path / "init.rwsa"
    assert run(capsys, "train-toy", "--config", small_cfg, "--data", toy_dir, "--steps", 0, "--out", out)[0] == 0
    return out


def _total(out):
    line = next(l for l in out.splitlines() if l.startswith("total"))
    return int(line.split()[1].replace(",", ""))


# --- count-params / count-flops ----------------------------------------------

def test_count_params_presets(tmp_path, capsys):
    cases = {"": 1.02e6, "model.N=4\n": 1.95e6, "model.N=4\nmodel.rwsa=false\n": 1.98e6,
             "model.N=4\nmodel.mha=false\n": 1.88e6}
    for text, target in cases.items():
        p = tmp_path / "c.cfg"
        p.write_text(text)
        code, out, _ = run(capsys, "count-params", "--config", p)
        assert code == 0 and "tied attention units" in out
        assert abs(_total(out) / target - 1) < 0.10, (text, _total(out))


@pytest.mark.parametrize("text,key", [
    ("model.C=10\n", "model.heads_other"),
    ("model.bogus=1\n", "model.bogus"),
    ("model.N=two\n", "model.N"),
    ("model.rwsa=maybe\n", "model.rwsa"),
    ("stft.hop=600\n", "stft.n_fft"),
    ("train.batch=0\n", "train.batch"),
])
def test_config_errors_exit_2(tmp_path, capsys, text, key):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    code, _, err = run(capsys, "count-params", "--config", p)
    assert code == 2 and key in err


def test_missing_config_file(tmp_path, capsys):
    assert run(capsys, "count-params", "--config", tmp_path / "nope.cfg")[0] == 2


def _flops_table(out):
    rows = dict(l.split("\t")[:2] for l in out.splitlines() if "\t" in l)
    return {k: float(v) for k, v in rows.items()}


def test_count_flops(tmp_path, capsys):
    totals = []
    for text in ("", "model.N=4\n", "model.N=4\nmodel.C=24\n"):
        p = tmp_path / "f.cfg"
        p.write_text(text)
        code, out, _ = run(capsys, "count-flops", "--config", p, "--seconds", 1.0)
        assert code == 0
        totals.append(_flops_table(out)["total"])
    assert totals[0] < totals[1] < totals[2]
    assert abs(totals[1] / totals[0] / (14.91 / 9.22) - 1) < 0.15
    a = _flops_table(run(capsys, "count-flops", "--seconds", 1.9125)[1])
    b = _flops_table(run(capsys, "count-flops", "--seconds", 3.825)[1])
    assert b["kind:scan"] == 2.0 * a["kind:scan"]


def test_count_flops_rejects_bad_duration(capsys):
    assert run(capsys, "count-flops", "--seconds", 0)[0] == 3
    assert run(capsys, "count-flops", "--seconds", -1)[0] == 3


# --- train-toy ----------------------------------------------------------------

def test_zero_steps_keeps_initialisation(init_weights):
    from rwsaunet import config
    rc = config.parse(SMALL)
    model = build_model(rc.model, rc["train.seed"])
    store = WeightStore.load(init_weights)
    for name, p in model.named_parameters():
        np.testing.assert_array_equal(store.entries[name], p.data.astype(np.float32))
    manifest = json.loads((init_weights.parent / (init_weights.name + ".manifest.json")).read_text())
    assert manifest["weights_hash"] == content_hash(init_weights.read_bytes())
    assert manifest["seed"] == 0 and "train.segment=840" in manifest["config"]


def test_training_log_is_deterministic(tmp_path, capsys, small_cfg, toy_dir):
    logs, hashes = [], []
    for i in range(2):
        out = tmp_path / f"run{i}.rwsa"
        assert run(capsys, "train-toy", "--config", small_cfg, "--data", toy_dir, "--steps", 2, "--out", out)[0] == 0
        logs.append((tmp_path / f"run{i}.rwsa.loss.csv").read_text())
        hashes.append(json.loads((tmp_path / f"run{i}.rwsa.manifest.json").read_text())["weights_hash"])
    assert logs[0] == logs[1]
    assert hashes[0] == hashes[1]
    lines = logs[0].strip().split("\n")
    assert lines[0] == "step,loss_total,loss_time,loss_mag,loss_complex,loss_phase,loss_consistency"
    assert len(lines) == 3


def test_manifest_hash_tracks_weight_bytes(tmp_path, capsys, toy_dir, init_weights):
    other_cfg = tmp_path / "seed1.cfg"
    other_cfg.write_text(SMALL + "train.seed=1\n")
    out = tmp_path / "seed1.rwsa"
    run(capsys, "train-toy", "--config", other_cfg, "--data", toy_dir, "--steps", 0, "--out", out)
    h0 = json.loads((tmp_path / "init.rwsa.manifest.json").read_text())["weights_hash"]
    h1 = json.loads((tmp_path / "seed1.rwsa.manifest.json").read_text())["weights_hash"]
    assert h0 != h1
    assert h0 == content_hash(init_weights.read_bytes())


def test_train_toy_input_errors(tmp_path, capsys, small_cfg):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run(capsys, "train-toy", "--config", small_cfg, "--data", empty, "--steps", 1,
               "--out", tmp_path / "w")[0] == 3


# --- enhance ----------------------------------------------------------------

def test_enhance_silence_and_determinism(tmp_path, capsys, small_cfg, init_weights):
    noisy = tmp_path / "silence.wav"
    write_wav(noisy, AudioBuffer(np.zeros(4000)))
    outs = []
    for i in range(2):
        out = tmp_path / f"out{i}.wav"
        code, _, _ = run(capsys, "enhance", "--config", small_cfg, "--weights", init_weights, "--in", noisy,
                         "--out", out)
        assert code == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    y = read_wav(tmp_path / "out0.wav")
    assert len(y) == 4000
    assert np.sqrt(np.mean(y.samples ** 2)) <= 1e-4
    manifest = json.loads((tmp_path / "out0.wav.manifest.json").read_text())
    assert manifest["weights_hash"] == content_hash(init_weights.read_bytes())


def test_enhance_preserves_length(tmp_path, capsys, small_cfg, init_weights, rng):
    noisy = tmp_path / "n.wav"
    write_wav(noisy, AudioBuffer(rng.normal(size=5001) * 0.1))
    run(capsys, "enhance", "--config", small_cfg, "--weights", init_weights, "--in", noisy, "--out", tmp_path / "o.wav")
    assert len(read_wav(tmp_path / "o.wav")) == 5001


def test_enhance_errors(tmp_path, capsys, small_cfg, init_weights):
    from scipy.io import wavfile
    bad_rate = tmp_path / "8k.wav"
    wavfile.write(bad_rate, 8000, np.zeros(4000, np.int16))
    args = ["enhance", "--config", small_cfg, "--weights", init_weights, "--out", tmp_path / "o.wav"]
    assert run(capsys, *args, "--in", bad_rate)[0] == 3
    good = tmp_path / "ok.wav"
    write_wav(good, AudioBuffer(np.zeros(4000)))
    other = tmp_path / "n1.cfg"
    other.write_text("model.N=1\n")
    assert run(capsys, "enhance", "--config", other, "--weights", init_weights, "--in", good,
               "--out", tmp_path / "o.wav")[0] == 4
    junk = tmp_path / "junk.rwsa"
    junk.write_bytes(b"not weights")
    assert run(capsys, "enhance", "--config", small_cfg, "--weights", junk, "--in", good,
               "--out", tmp_path / "o.wav")[0] == 4
    assert run(capsys, *args, "--in", tmp_path / "missing.wav")[0] == 3


@pytest.mark.slow
def test_toy_trained_weights_improve_held_in_pair(tmp_path, capsys):
    data = write_dataset(tmp_path / "toy", 5, 1800, seed=0)
    cfg = tmp_path / "t.cfg"
    cfg.write_text("train.segment=1800\ntrain.batch=1\ntrain.lr=1e-3\ntrain.eval_every=20\n")
    weights = tmp_path / "toy.rwsa"
    assert run(capsys, "train-toy", "--config", cfg, "--data", data, "--steps", 60, "--out", weights)[0] == 0
    out = tmp_path / "enh.wav"
    assert run(capsys, "enhance", "--config", cfg, "--weights", weights, "--in", data / "pair000_noisy.wav",
               "--out", out)[0] == 0
    clean = read_wav(data / "pair000_clean.wav")
    noisy = read_wav(data / "pair000_noisy.wav")
    assert si_sdr(clean, read_wav(out)) > si_sdr(clean, noisy)


# --- metrics ----------------------------------------------------------------

def _write_set(d, clips):
    d.mkdir(exist_ok=True)
    for name, x in clips.items():
        write_wav(d / name, AudioBuffer(x))


def test_metrics_identical_sets(tmp_path, capsys, rng):
    clips = {f"c{i}.wav": rng.uniform(-0.5, 0.5, 2048) for i in range(3)}
    _write_set(tmp_path / "ref", clips)
    _write_set(tmp_path / "est", clips)
    code, out, _ = run(capsys, "metrics", "--ref", tmp_path / "ref", "--est", tmp_path / "est",
                       "--out", tmp_path / "r.tsv")
    assert code == 0
    rep = MetricReport.parse(out)
    assert len(rep.rows) == 3
    assert all(r[1] == 35.0 and r[2] == SI_SDR_CAP for r in rep.rows)
    assert (tmp_path / "r.tsv").read_text() == out


def test_metrics_orthogonal_noise_at_zero_db(tmp_path, capsys, rng):
    ref = rng.uniform(-0.3, 0.3, 4096)
    noise = rng.normal(size=4096)
    noise -= (noise @ ref) / (ref @ ref) * ref
    mixed = mix_at_snr(AudioBuffer(ref), AudioBuffer(noise), 0.0)
    assert energy(mixed.samples - ref) == pytest.approx(energy(ref))
    write_wav(tmp_path / "ref.wav", AudioBuffer(ref))
    write_wav(tmp_path / "est.wav", AudioBuffer(mixed.samples * 0.5))
    code, out, _ = run(capsys, "metrics", "--ref", tmp_path / "ref.wav", "--est", tmp_path / "est.wav")
    assert code == 0
    assert abs(MetricReport.parse(out).rows[0][2]) < 0.05


def test_metrics_aggregate_is_hand_average(tmp_path, capsys, rng):
    refs = {f"c{i}.wav": rng.uniform(-0.5, 0.5, 2048) for i in range(4)}
    ests = {k: v + 0.05 * (i + 1) * rng.normal(size=2048) for i, (k, v) in enumerate(refs.items())}
    _write_set(tmp_path / "ref", refs)
    _write_set(tmp_path / "est", ests)
    out = run(capsys, "metrics", "--ref", tmp_path / "ref", "--est", tmp_path / "est")[1]
    rows = [l.split("\t") for l in out.splitlines() if not l.startswith("#")]
    agg = next(l for l in out.splitlines() if l.startswith("#aggregate\tssnr"))
    mean = float(agg.split("\t")[2].split("±")[0])
    assert mean == pytest.approx(np.mean([float(r[1]) for r in rows]), abs=1e-4)


def test_metrics_length_mismatch_is_listed(tmp_path, capsys, rng):
    _write_set(tmp_path / "ref", {"a.wav": rng.uniform(-0.5, 0.5, 1024), "b.wav": rng.uniform(-0.5, 0.5, 1024)})
    _write_set(tmp_path / "est", {"a.wav": rng.uniform(-0.5, 0.5, 1024), "b.wav": rng.uniform(-0.5, 0.5, 1000)})
    code, out, err = run(capsys, "metrics", "--ref", tmp_path / "ref", "--est", tmp_path / "est")
    assert code != 0 and "b.wav" in err and "length mismatch" in err
    assert len(MetricReport.parse(out).rows) == 1


def test_metrics_missing_path(tmp_path, capsys):
    assert run(capsys, "metrics", "--ref", tmp_path / "x", "--est", tmp_path / "y")[0] == 3


# --- verify -----------------------------------------------------------------

def test_verify_quick_passes(capsys):
    code, out, _ = run(capsys, "verify", "--quick")
    assert code == 0
    assert "FAIL" not in out and out.count("PASS") == 8


def test_verify_without_sharing_skips_ties(tmp_path, capsys):
    p = tmp_path / "norwsa.cfg"
    p.write_text("model.rwsa=false\n")
    code, out, _ = run(capsys, "verify", "--config", p, "--quick")
    assert code == 0
    assert "SKIP  tie_integrity" in out


def test_verify_rejects_invalid_config_first(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("model.C=10\nmodel.heads_other=4\n")
    code, out, err = run(capsys, "verify", "--config", p)
    assert code == 2 and out == "" and "model.heads_other" in err


def test_verify_failure_exit_code(capsys, monkeypatch):
    from rwsaunet import verify
    monkeypatch.setattr(verify, "check_dsp_roundtrip", lambda seed=0: verify.Check("stft_roundtrip", "fail", "forced"))
    code, out, _ = run(capsys, "verify", "--quick")
    assert code == 5 and "FAIL  stft_roundtrip" in out
