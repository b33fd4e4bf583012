import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from conftest import weighted_grad_error

from rwsaunet import tensor as tn
from rwsaunet.model import PRESETS, Estimate, build_model
from rwsaunet.objectives import (COMPONENTS, SI_SDR_CAP, Adam, LossWeights, MetricReport, Reference, TrainingAborted,
                                 compute_losses, evaluate_loss, make_reference, si_sdr, ssnr, train_step)
from rwsaunet.tensor import Parameter, Tensor

XS = PRESETS["XS"]
SEG = 840  # T = 8 frames


def _estimate_from(ref: Reference, wave, mag_c, phase):
    return Estimate(wave, None, mag_c, phase, mag_c * tn.cos(phase), mag_c * tn.sin(phase), wave.shape[-1])


# --- losses -----------------------------------------------------------------

def test_losses_vanish_at_reference(f64, rng):
    clean = rng.normal(size=(1, SEG))
    ref = make_reference(clean, SEG, XS)
    est = _estimate_from(ref, Tensor(ref.wave), Tensor(ref.mag_c), Tensor(ref.phase))
    total, comps = compute_losses(est, ref, LossWeights(), XS, SEG)
    for name in COMPONENTS:
        assert float(comps[name].data) == pytest.approx(0.0, abs=1e-12), name
    assert float(total.data) == pytest.approx(0.0, abs=1e-12)


def test_losses_nonnegative_and_linear_in_weights(f64, rng):
    clean = rng.normal(size=(1, SEG))
    ref = make_reference(clean, SEG, XS)
    est = _estimate_from(ref, Tensor(clean + 0.3 * rng.normal(size=clean.shape)),
                         Tensor(ref.mag_c * rng.uniform(0.5, 1.5, ref.mag_c.shape)),
                         Tensor(ref.phase + rng.normal(size=ref.phase.shape)))
    w = LossWeights()
    t1, comps = compute_losses(est, ref, w, XS, SEG)
    assert all(float(v.data) > 0 for v in comps.values())
    for k in (0.5, 3.0, 10.0):
        tk, _ = compute_losses(est, ref, w.scaled(k), XS, SEG)
        assert float(tk.data) == pytest.approx(k * float(t1.data), rel=1e-12)


def test_wrap_distance_example(f64):
    d = tn.wrap_distance(Tensor(np.array([(math.pi - 0.1) - (-math.pi + 0.1)])))
    assert float(d.data[0]) == pytest.approx(0.2, abs=1e-12)


def test_loss_gradients(f64, rng):
    clean = rng.normal(size=(1, 480))
    ref = make_reference(clean, 480, XS)
    wave = Parameter(clean + 0.2 * rng.normal(size=clean.shape))
    mag_c = Parameter(ref.mag_c * rng.uniform(0.6, 1.4, ref.mag_c.shape) + 0.05)
    phase = Parameter(ref.phase + rng.uniform(-0.5, 0.5, ref.phase.shape))

    def loss():
        est = _estimate_from(ref, wave, mag_c, phase)
        return compute_losses(est, ref, LossWeights(), XS, 480)[0]
    assert weighted_grad_error(loss, [wave, mag_c, phase]) < 1e-5


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        LossWeights(time=-1)
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0, 0)


def test_shape_mismatch(rng):
    ref = make_reference(rng.normal(size=(1, SEG)), SEG, XS)
    est = _estimate_from(ref, Tensor(np.zeros((1, SEG - 1))), Tensor(ref.mag_c), Tensor(ref.phase))
    with pytest.raises(tn.ShapeError):
        compute_losses(est, ref, LossWeights(), XS, SEG)


def test_nan_component_is_named(rng):
    ref = make_reference(rng.normal(size=(1, SEG)), SEG, XS)
    bad = Reference(ref.wave, ref.mag_c.copy(), ref.phase, ref.re_c, ref.im_c)
    bad.mag_c[0, 0, 0] = np.nan
    est = _estimate_from(ref, Tensor(ref.wave), Tensor(ref.mag_c), Tensor(ref.phase))
    with pytest.raises(TrainingAborted) as exc:
        compute_losses(est, bad, LossWeights(), XS, SEG)
    assert exc.value.component == "mag"


def test_train_step_nan_target_aborts(rng):
    model = build_model(XS)
    noisy = rng.normal(size=SEG)
    clean = noisy * 0.5
    clean[10] = np.nan
    with pytest.raises(TrainingAborted) as exc:
        train_step(model, Adam(model.parameters()), noisy, clean, LossWeights(), step=7)
    assert exc.value.component == "time" and exc.value.step == 7


# --- training step ----------------------------------------------------------

def _batch(seed):
    r = np.random.default_rng(seed)
    clean = np.sin(np.arange(SEG) * 0.07 + seed) * 0.5
    return clean + 0.3 * r.normal(size=SEG), clean


def test_zero_learning_rate_keeps_weights():
    model = build_model(XS)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    noisy, clean = _batch(0)
    train_step(model, Adam(model.parameters(), lr=0.0), noisy, clean, LossWeights())
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n]), n


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_step_descends(seed):
    model = build_model(XS, seed)
    noisy, clean = _batch(seed)
    w = LossWeights()
    before = evaluate_loss(model, noisy, clean, w)["total"]
    train_step(model, Adam(model.parameters(), lr=1e-5), noisy, clean, w)
    after = evaluate_loss(model, noisy, clean, w)["total"]
    assert after < before


def _twin_pair():
    with tn.precision(np.float64):
        tied = build_model(XS, 0)
        untied = build_model(XS.with_(rwsa=False), 0)
    for name, p in untied.named_parameters():
        p.data[...] = tied.resolve(tied.ties.get(name, name)).data
    return tied, untied


def test_tied_gradient_is_sum_of_twin_gradients():
    tied, untied = _twin_pair()
    noisy, clean = _batch(3)
    grads = {}
    with tn.precision(np.float64):
        for model in (tied, untied):
            est = model.spectral_forward(noisy)
            total, _ = compute_losses(est, make_reference(clean, SEG, XS), LossWeights(), XS, SEG)
            model.zero_grad()
            tn.backward(total)
    assert tied.ties
    for canon in set(tied.ties.values()):
        aliases = [a for a, c in tied.ties.items() if c == canon]
        summed = untied.resolve(canon).grad + sum(untied.resolve(a).grad for a in aliases)
        g = tied.resolve(canon).grad
        assert np.max(np.abs(g - summed)) <= 1e-12 * max(1.0, np.max(np.abs(summed)))
    # untied parameters outside the attention units see the same gradient
    for name, p in tied.named_parameters():
        if name not in tied.ties.values():
            np.testing.assert_allclose(p.grad, untied.resolve(name).grad, rtol=1e-10, atol=1e-14)
    # the tied update equals one optimizer step on the summed gradient
    canon = next(iter(tied.ties.values()))
    p = tied.resolve(canon)
    with tn.precision(np.float64):
        solo = Parameter(p.data.copy())
    solo.grad = p.grad.copy()
    Adam([p], lr=1e-3).step()
    Adam([solo], lr=1e-3).step()
    np.testing.assert_array_equal(p.data, solo.data)


def test_untied_twins_diverge_after_one_step():
    _, untied = _twin_pair()
    noisy, clean = _batch(4)
    with tn.precision(np.float64):
        train_step(untied, Adam(untied.parameters(), lr=1e-3), noisy, clean, LossWeights())
    a = untied.resolve("down.0.blocks.0.attn.mha.in_proj.weight").data
    b = untied.resolve("up.0.blocks.0.attn.mha.in_proj.weight").data
    assert np.max(np.abs(a - b)) > 0


def test_tied_weights_stay_identical():
    model = build_model(XS, 2)
    opt = Adam(model.parameters(), lr=1e-3)
    for step in range(3):
        train_step(model, opt, *_batch(step), LossWeights())
    for alias, canon in model.ties.items():
        assert model.resolve(alias) is model.resolve(canon)


# --- metrics ----------------------------------------------------------------

def test_ssnr_examples(rng):
    ref = rng.normal(size=256 * 8)
    assert ssnr(ref, ref) == 35.0
    assert ssnr(ref, -ref) == pytest.approx(10 * math.log10(0.25))
    assert ssnr(ref, np.zeros_like(ref)) == pytest.approx(0.0)
    assert ssnr(ref, 2 * ref) == pytest.approx(0.0)
    assert ssnr(ref, ref + 100 * rng.normal(size=ref.shape)) == -10.0


def test_ssnr_errors(rng):
    with pytest.raises(ValueError):
        ssnr(np.zeros(512), np.ones(512))
    with pytest.raises(ValueError):
        ssnr(np.ones(100), np.ones(100))
    with pytest.raises(ValueError):
        ssnr(np.ones(512), np.ones(511))


def test_ssnr_skips_silent_segments(rng):
    ref = np.concatenate([np.zeros(256), rng.normal(size=256)])
    assert ssnr(ref, np.zeros_like(ref)) == pytest.approx(0.0)


def test_si_sdr_examples(rng):
    assert si_sdr([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.0, abs=1e-12)
    x = rng.normal(size=1000)
    assert si_sdr(x, x) == SI_SDR_CAP
    with pytest.raises(ValueError):
        si_sdr(np.zeros(4), np.ones(4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 31), alpha=st.sampled_from([0.1, 3.0, -2.0, 1e-3, 250.0]))
def test_si_sdr_scale_invariance(seed, alpha):
    r = np.random.default_rng(seed)
    ref, est = r.normal(size=300), r.normal(size=300)
    assert abs(si_sdr(ref, alpha * est) - si_sdr(ref, est)) < 1e-9


def test_metric_report_roundtrip(rng):
    rep = MetricReport()
    for i in range(3):
        ref = rng.normal(size=1024)
        rep.add(f"clip{i}.wav", ref, ref + 0.1 * (i + 1) * rng.normal(size=1024))
    text = rep.serialize()
    lines = text.strip().split("\n")
    assert len(lines) == 5 and lines[3].startswith("#aggregate\tssnr\t") and "±" in lines[3]
    parsed = MetricReport.parse(text)
    assert [r[0] for r in parsed.rows] == [r[0] for r in rep.rows]
    mu, sd = rep.aggregate()["si_sdr"]
    vals = [r[2] for r in rep.rows]
    assert mu == pytest.approx(np.mean(vals)) and sd == pytest.approx(np.std(vals))
