import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hqvae import objectives as O
from hqvae import tensor as T
from hqvae.gradcheck import check_gradients
from hqvae.networks import to_rows
from hqvae.tensor import Tensor

from conftest import toy_batch, toy_model
from oracles import exact_expectation, monte_carlo

pytestmark = pytest.mark.usefixtures("f64")

SQ2 = [("first", 2, 4), ("injected", 4, 4)]
RSQ = [("first", 2, 4), ("residual", 2, 4)]
HYB = [("first", 1, 3), ("residual", 1, 3), ("injected", 2, 3), ("residual", 2, 3)]


def _sample(m, x, seed=0, tau=0.5):
    return m.encode(x, mode="sample", tau=tau, rng=np.random.default_rng(seed))


def _set_s2(m, values):
    for n, v in zip(m.noise, values):
        n.log_s2.data[...] = math.log(v)


@pytest.mark.parametrize("variant,layers,kw", [
    ("sqvae2", SQ2, {}), ("rsqvae", RSQ, {}), ("rsqvae", RSQ, {"objective": "naive"}),
    ("hybrid", HYB, {}), ("vqvae2", SQ2, {}), ("rqvae", RSQ, {}), ("vqvae", [("first", 2, 4)], {}),
])
def test_total_equals_sum_of_parts(variant, layers, kw):
    m = toy_model(variant, layers, **kw)
    x = toy_batch()
    fr = _sample(m, x) if m.config.stochastic else m.encode(x, mode="st")
    lb = O.objective(fr, m, 0.2, 0.5)
    assert abs(lb.value() - sum(lb.parts().values())) < 1e-5
    assert all(float(e.data) <= 0 for e in lb.entropies)


def test_max_entropy_limit():
    m = toy_model("sqvae2", SQ2)
    _set_s2(m, [1e12, 1e12])
    x = toy_batch()
    lb = O.elbo_sqvae2(_sample(m, x), m, 1.0)
    reg = lb.value() - float(lb.recon[0].data)
    assert reg == pytest.approx(-(4 + 16) * math.log(4), rel=1e-6)


def test_rsqvae_single_layer_matches_sqvae2():
    x = toy_batch()
    a = toy_model("sqvae2", [("first", 2, 4)], seed=2)
    b = toy_model("rsqvae", [("first", 2, 4)], seed=2)
    va = O.elbo_sqvae2(_sample(a, x), a, 0.3).value()
    vb = O.elbo_rsqvae(_sample(b, x), b, 0.3).value()
    vn = O.elbo_rsqvae_naive(_sample(b, x), b, 0.3).value()
    assert va == pytest.approx(vb, abs=1e-12) and vb == pytest.approx(vn, abs=1e-12)


def test_rsqvae_gap_halves_when_total_variance_doubles():
    m = toy_model("rsqvae", RSQ)
    fr = _sample(m, toy_batch())
    _set_s2(m, [0.3, 0.1])
    g1 = float(O.elbo_rsqvae(fr, m, 0.2).gaps[0].data)
    _set_s2(m, [0.6, 0.2])
    g2 = float(O.elbo_rsqvae(fr, m, 0.2).gaps[0].data)
    assert g2 == pytest.approx(g1 / 2, rel=1e-12)


def test_naive_gaps_telescope_and_differ_from_corrected():
    m = toy_model("rsqvae", RSQ + [("residual", 2, 4)])
    _set_s2(m, [0.5, 0.3, 0.2])
    fr = _sample(m, toy_batch())
    n = 2
    naive = O.elbo_rsqvae_naive(fr, m, 0.2)
    corrected = O.elbo_rsqvae(fr, m, 0.2)
    h = fr.group_targets[0].data
    residuals = [h - sum(lo.z.data for lo in fr.layers[:l + 1]) for l in range(3)]
    for g, r, s in zip(naive.gaps, residuals, [0.5, 0.3, 0.2]):
        assert float(g.data) == pytest.approx((r ** 2).sum() / (2 * s * n), rel=1e-10)
    expected = sum((r ** 2).sum() / (2 * s * n) for r, s in zip(residuals, [0.5, 0.3, 0.2])) \
        - (residuals[-1] ** 2).sum() / (2 * 1.0 * n)
    assert naive.value() - corrected.value() == pytest.approx(expected, rel=1e-9)


def test_hybrid_degenerate_groupings():
    x = toy_batch()
    m = toy_model("sqvae2", SQ2)
    fr = _sample(m, x)
    assert O.elbo_hybrid(fr, m, 0.2).value() == pytest.approx(O.elbo_sqvae2(fr, m, 0.2).value(), abs=1e-12)
    r = toy_model("rsqvae", RSQ)
    fr = _sample(r, x)
    assert O.elbo_hybrid(fr, r, 0.2).value() == pytest.approx(O.elbo_rsqvae(fr, r, 0.2).value(), abs=1e-12)


def test_hybrid_pairs_match_manual_assembly():
    m = toy_model("hybrid", HYB, size=4)
    _set_s2(m, [0.4, 0.3, 0.2, 0.1])
    x = toy_batch()
    fr = _sample(m, x)
    lb = O.elbo_hybrid(fr, m, 0.25)
    n, d = 2, 48
    z = [lo.z.data for lo in fr.layers]
    manual = 0.5 * d * math.log(0.25) + ((x.data - fr.recon.data) ** 2).sum() / (2 * 0.25 * n)
    manual += ((fr.group_targets[0].data - z[0] - z[1]) ** 2).sum() / (2 * 0.7 * n)
    manual += ((fr.group_targets[1].data - z[2] - z[3]) ** 2).sum() / (2 * 0.3 * n)
    for lo in fr.layers:
        p = lo.quant.probs.data
        manual += (p * np.log(p)).sum() / n
    assert lb.value() == pytest.approx(manual, rel=1e-10)
    with pytest.raises(ValueError):
        O.elbo_hybrid(fr, m, 0.25, groups=[[0, 1], [2]])


def test_baseline_beta_zero_and_zero_gap():
    m = toy_model("vqvae2", SQ2)
    fr = m.encode(toy_batch(), mode="st")
    lb = O.loss_vqvae2(fr, m, beta=0.0)
    assert lb.value() == pytest.approx(float(lb.recon[0].data), abs=1e-12)
    for lo in fr.layers:
        lo.z_hard = lo.zhat.data.copy()
    assert all(float(g.data) == 0 for g in O.loss_vqvae2(fr, m).gaps)


def test_rqvae_commitment_on_cumulative_sums():
    m = toy_model("rqvae", RSQ)
    fr = m.encode(toy_batch(), mode="st")
    lb = O.loss_rqvae(fr, m)
    h = fr.group_targets[0].data
    z = [lo.z_hard for lo in fr.layers]
    assert float(lb.gaps[0].data) == pytest.approx(0.25 * ((h - z[0]) ** 2).sum() / 2)
    assert float(lb.gaps[1].data) == pytest.approx(0.25 * ((h - z[0] - z[1]) ** 2).sum() / 2)


def test_baseline_codebooks_get_no_gradient():
    m = toy_model("vqvae2", SQ2)
    lb = O.loss_vqvae2(m.encode(toy_batch(), mode="st"), m)
    T.backward(lb.total)
    assert all(cb.vectors.grad is None for cb in m.codebooks)
    assert any(p.grad is not None and np.abs(p.grad).max() > 0 for p in m.parameters())


def test_variant_mismatch_rejected():
    m = toy_model("sqvae2", SQ2)
    with pytest.raises(ValueError):
        O.loss_rqvae(m.encode(toy_batch(), mode="st"), m)
    with pytest.raises(ValueError):
        O.elbo_rsqvae(_sample(m, toy_batch()), m, 0.2)


def test_nonfinite_term_is_named():
    m = toy_model("sqvae2", SQ2)
    fr = _sample(m, toy_batch())
    fr.recon = fr.recon * np.nan
    with pytest.raises(O.NumericAbort, match="recon_1"):
        O.elbo_sqvae2(fr, m, 0.2)


def test_update_sigma2_examples():
    assert O.update_sigma2(0.0) == 1e-6
    assert O.update_sigma2(0.25) == 0.25
    x = np.zeros((2, 3, 4, 4))
    assert O.batch_mse(x, x + 0.5) == 0.25


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sigma2_update_is_stationary(seed):
    rng = np.random.default_rng(seed)
    x, f = rng.random((3, 3, 4, 4)), rng.random((3, 3, 4, 4))
    s = O.update_sigma2(O.batch_mse(x, f))

    def value(s2):
        ls, rec = O.gaussian_recon(Tensor(x), Tensor(f), s2)
        return ls + float(rec.data)

    h = 1e-6 * s
    deriv = (value(s + h) - value(s - h)) / (2 * h)
    assert abs(deriv) < 1e-4 * 48 / s
    assert value(s) < value(1.5 * s) and value(s) < value(s / 1.5)


def test_codebook_reset_rules():
    m = toy_model("rqvae", RSQ)
    cb = m.codebooks[0]
    feats = np.random.default_rng(0).standard_normal((10, 3))
    before = cb.vectors.data.copy()
    assert len(O.codebook_reset(cb, feats, np.random.default_rng(0))) == 0
    assert np.array_equal(cb.vectors.data, before)
    cb.cluster_size[2] = 0.1
    dead = O.codebook_reset(cb, feats, np.random.default_rng(0))
    assert list(dead) == [2]
    assert any(np.array_equal(cb.vectors.data[2], row) for row in feats)
    assert (cb.cluster_size >= 1.0).all()
    with pytest.raises(ValueError):
        O.codebook_reset(cb, np.zeros((0, 3)), np.random.default_rng(0))


def test_ema_step_moves_codebook_toward_features():
    m = toy_model("vqvae", [("first", 2, 1)])
    fr = m.encode(toy_batch(), mode="st")
    mean = to_rows(fr.layers[0].zhat).data.mean(0)
    start = np.linalg.norm(m.codebooks[0].vectors.data[0] - mean)
    O.ema_step(fr, m)
    assert np.linalg.norm(m.codebooks[0].vectors.data[0] - mean) < start


def test_progressive_reductions_and_errors():
    r = toy_model("rsqvae", RSQ, progressive=True)
    fr = _sample(r, toy_batch())
    assert O.elbo_progressive(fr, r, [0.2]).value() == pytest.approx(O.elbo_rsqvae(fr, r, 0.2).value(), abs=1e-12)
    p = toy_model("sqvae2", SQ2, progressive=True)
    fr = _sample(p, toy_batch())
    with pytest.raises(ValueError, match="non-increasing"):
        O.elbo_progressive(fr, p, [0.1, 0.2])
    lb = O.elbo_progressive(fr, p, [0.3, 0.2])
    assert len(lb.recon) == 2
    same = O.elbo_progressive(fr, p, [0.2, 0.2])
    # identical prefix sigma: only the first reconstruction term and log term move
    assert float(same.recon[1].data) == pytest.approx(float(lb.recon[1].data))


def _fd(model, x, mode, lossfn):
    params = model.named_parameters()
    if mode == "st":
        frozen = model.encode(x, mode="st")
        fn = lambda: lossfn(model.encode(x, mode="st", frozen=frozen)).total
    else:
        fn = lambda: lossfn(_sample(model, x, seed=11)).total
    return check_gradients(fn, params, max_entries=6, rng=np.random.default_rng(0))


@pytest.mark.parametrize("name,variant,layers,kw", [
    ("sqvae2", "sqvae2", SQ2, {}), ("rsqvae", "rsqvae", RSQ, {}),
    ("rsqvae_naive", "rsqvae", RSQ, {"objective": "naive"}), ("hybrid", "hybrid", HYB, {}),
    ("progressive", "sqvae2", SQ2, {"progressive": True}),
    ("vqvae2", "vqvae2", SQ2, {}), ("rqvae", "rqvae", RSQ, {}),
])
def test_gradients_match_finite_differences(name, variant, layers, kw):
    m = toy_model(variant, layers, **kw)
    x = toy_batch()
    if name == "progressive":
        lossfn = lambda fr: O.elbo_progressive(fr, m, [0.3, 0.2], 0.5)
    else:
        lossfn = lambda fr: O.objective(fr, m, 0.2, 0.5)
    errs = _fd(m, x, "sample" if m.config.stochastic else "st", lossfn)
    assert max(errs.values()) < 1e-4, errs


def test_enumeration_small():
    m = toy_model("rsqvae", [("first", 1, 2), ("residual", 1, 2)], size=2, seed=3)
    _set_s2(m, [0.2, 0.2])
    x = np.random.default_rng(0).random((1, 3, 2, 2))
    exact = exact_expectation(m, x, 0.1, "grouped")
    mc = monte_carlo(m, x, 0.1, range(2000))
    se = mc.std(ddof=1) / math.sqrt(len(mc))
    assert abs(mc.mean() - exact) < 3 * se
