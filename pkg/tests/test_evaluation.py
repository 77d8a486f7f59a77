import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hqvae import evaluation as E
from hqvae import tensor as T
from hqvae.config import RunConfig
from hqvae.data import Dataset
from hqvae.networks import PrefixDecodeError
from hqvae.quantization import code_histogram, perplexity

from conftest import toy_model


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    x, y = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert E.ssim(x, x) == pytest.approx(1.0)
    assert E.ssim(x, y) == pytest.approx(E.ssim(y, x))
    assert -1 <= E.ssim(x, y) <= 1


def test_ssim_constant_images_luminance_term():
    a, b = 0.3, 0.7
    x, y = np.full((1, 12, 12), a), np.full((1, 12, 12), b)
    c1 = 0.01 ** 2
    assert E.ssim(x, y) == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), rel=1e-9)


def test_ssim_window_oracle():
    # direct 2-D weighted sums at one valid location
    rng = np.random.default_rng(1)
    x, y = rng.random((11, 11)), rng.random((11, 11))
    g = np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    mx, my = (w * x).sum(), (w * y).sum()
    vx, vy = (w * (x - mx) ** 2).sum(), (w * (y - my) ** 2).sum()
    cxy = (w * (x - mx) * (y - my)).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ref = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    assert E.ssim(x[None], y[None]) == pytest.approx(ref, rel=1e-10)


def test_ssim_shape_errors():
    with pytest.raises(T.ShapeError):
        E.ssim(np.zeros((1, 12, 12)), np.zeros((1, 12, 13)))
    with pytest.raises(T.ShapeError):
        E.ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


def _model(variant="sqvae2", layers=None, **kw):
    layers = layers or [("first", 4, 4), ("injected", 8, 4)]
    return toy_model(variant, layers, size=16, **kw)


def _imgs(n=6, size=16, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size))


def test_evaluate_report_contract(f64):
    m = _model()
    rep = E.evaluate(m, _imgs(), batch_size=4)
    assert rep.n == 6 and rep.rmse >= 0 and -1 <= rep.ssim <= 1
    for p, l in zip(rep.perplexity, m.config.layers):
        assert 1 - 1e-12 <= p <= l.codebook_size + 1e-9
    assert rep.bits == 16 * 2 + 64 * 2
    assert rep.s2_ratio == [1.0, 1.0]
    assert all(0 <= e <= math.log(4) + 1e-12 for e in rep.entropy_per_site)
    again = E.evaluate(m, _imgs(), batch_size=3)
    # batching changes summation order only
    assert again.rmse == pytest.approx(rep.rmse) and again.perplexity == rep.perplexity
    with pytest.raises(ValueError):
        E.evaluate(m, np.zeros((0, 3, 16, 16)))


def test_evaluate_deterministic_and_recount(f64):
    m = _model("vqvae2")
    a, b = E.evaluate(m, _imgs()), E.evaluate(m, _imgs())
    assert a.to_dict() == b.to_dict()
    assert a.s2_ratio is None
    # second pass recount of assignments
    _, fr = m.reconstruct(_imgs())
    for li, lo in enumerate(fr.layers):
        h = code_histogram(lo.codes, 4)
        assert np.array_equal(h, a.histograms[li])
        assert perplexity(h) == a.perplexity[li]


def test_evaluate_perfect_reconstruction(f64, monkeypatch):
    m = _model()
    imgs = _imgs()
    monkeypatch.setattr(m, "reconstruct", lambda x, upto=None: (x.copy(), m.encode(x, mode="hard")))
    rep = E.evaluate(m, imgs)
    assert rep.rmse == 0 and rep.ssim == pytest.approx(1.0)


def test_single_code_perplexity_one(f64):
    rep = E.evaluate(_model(layers=[("first", 4, 1), ("injected", 8, 1)]), _imgs())
    assert rep.perplexity == [1.0, 1.0]


@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000))
def test_perplexity_bounds_on_evaluation(seed):
    with T.precision(np.float64):
        m = _model("rqvae", [("first", 4, 5), ("residual", 4, 5)], seed=seed)
        rep = E.evaluate(m, _imgs(seed=seed))
        assert all(1 - 1e-12 <= p <= 5 + 1e-9 for p in rep.perplexity)


def test_progressive_dump_telescopes(f64, tmp_path):
    m = _model("rsqvae", [("first", 4, 4), ("residual", 4, 4), ("residual", 4, 4)])
    out = E.progressive_dump(m, _imgs(), tmp_path)
    full, _ = m.reconstruct(_imgs())
    assert np.array_equal(out["prefixes"][-1], full)
    assert out["telescoping_error"] < 1e-5
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["delta_2.png", "delta_3.png", "input.png", "prefix_1.png", "prefix_2.png", "prefix_3.png"]


def test_progressive_dump_rejects_plain_sqvae2(f64):
    with pytest.raises(PrefixDecodeError):
        E.progressive_dump(_model(), _imgs())
    out = E.progressive_dump(_model(progressive=True), _imgs())
    assert len(out["prefixes"]) == 2


def test_save_png_roundtrip(tmp_path):
    from PIL import Image

    imgs = np.random.default_rng(0).random((3, 3, 5, 4))
    p = E.save_png(imgs, tmp_path / "g.png")
    arr = np.asarray(Image.open(p))
    assert arr.shape == (5, 12, 3)
    assert np.array_equal(arr[:, 4:8], np.round(imgs[1].transpose(1, 2, 0) * 255).astype(np.uint8))


def test_sample_images_seeded(f64):
    m = _model()
    a = E.sample_images(m, 2, np.random.default_rng(3))
    b = E.sample_images(m, 2, np.random.default_rng(3))
    assert np.array_equal(a, b) and a.shape == (2, 3, 16, 16)


def _rd_config(K):
    return RunConfig.from_dict({
        "model": {"variant": "rqvae", "d_b": 3, "hidden": 4, "n_res": 1, "input_shape": [3, 16, 16],
                  "layers": [{"kind": "first", "resolution": 4, "codebook_size": K}]},
        "train": {"epochs": 1, "batch_size": 4, "precision": "float64"},
        "data": {"image_size": 16}})


def test_rd_sweep_rows_and_summary(tmp_path):
    imgs = np.random.default_rng(0).random((12, 3, 16, 16)).astype(np.float32)
    ds = Dataset({"train": imgs[:8], "val": imgs[8:10], "test": imgs[10:]}, "t")
    rows, summary = E.rd_sweep([("k4", _rd_config(4)), ("k8", _rd_config(8))], ds, tmp_path / "rd.csv",
                               seeds=(0, 1, 2, 3))
    assert len(rows) == 8
    for r in rows:
        assert r["bits"] == 16 * math.log2(int(r["K"]))
    with open(tmp_path / "rd_summary.csv") as f:
        srows = list(csv.DictReader(f))
    for s in srows:
        vals = [r["rmse"] for r in rows if r["label"] == s["label"]]
        assert float(s["rmse_mean"]) == pytest.approx(np.mean(vals))
        assert float(s["rmse_std"]) == pytest.approx(np.std(vals, ddof=1))
    one, _ = E.rd_sweep([("k4", _rd_config(4))], ds, tmp_path / "one.csv")
    assert len(one) == 1
