import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

import oracles
from comofusion import metrics
from comofusion.errors import ValidationError
from comofusion.imgcore import GrayImage
from comofusion.metrics import (
    MetricsReport,
    average_gradient,
    entropy,
    evaluate,
    qabf,
    rank_methods,
    spatial_frequency,
    ssim,
    ssim_fusion,
    std_dev,
)


def rand_byte(rng, shape=(16, 16)):
    return rng.integers(0, 256, shape).astype(np.float64)


def textured(rng, shape=(16, 16)):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return np.clip(128 + 60 * np.sin(0.7 * xx + 0.3 * yy) + rng.normal(0, 10, shape), 0, 255)


# ------------------------------------------------------------------ entropy
def test_entropy_anchors(backend):
    assert entropy(np.full((8, 8), 17.0)) == 0.0
    assert entropy(np.arange(256, dtype=np.float64).reshape(16, 16)) == 8.0


def test_entropy_oracle(backend, rng):
    for _ in range(5):
        img = rand_byte(rng)
        assert entropy(img) == pytest.approx(oracles.entropy(img.tolist()), abs=1e-9)


def test_entropy_accepts_gray_image():
    img = GrayImage(np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0, "unit")
    assert entropy(img) == pytest.approx(8.0, abs=1e-12)


# --------------------------------------------------------- spatial frequency
def test_spatial_frequency_anchors(backend, rng):
    assert spatial_frequency(np.full((5, 6), 3.0)) == 0.0
    checker = (np.indices((9, 12)).sum(axis=0) % 2).astype(np.float64)
    assert spatial_frequency(checker) == pytest.approx(math.sqrt(2), abs=1e-12)
    img = rand_byte(rng, (10, 14))
    assert spatial_frequency(img) == pytest.approx(spatial_frequency(img.T), rel=1e-12)


def test_spatial_frequency_oracle(backend, rng):
    img = rand_byte(rng)
    assert spatial_frequency(img) == pytest.approx(oracles.spatial_frequency(img.tolist()), abs=1e-9)
    with pytest.raises(ValidationError):
        spatial_frequency(np.zeros((1, 5)))


# ---------------------------------------------------------- average gradient
def test_average_gradient_anchors(backend):
    assert average_gradient(np.full((4, 4), 9.0)) == 0.0
    ramp = np.tile(np.arange(10, dtype=np.float64), (6, 1))
    assert average_gradient(ramp) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_average_gradient_oracle(backend, rng):
    img = rand_byte(rng)
    assert average_gradient(img) == pytest.approx(oracles.average_gradient(img.tolist()), abs=1e-9)


# ----------------------------------------------------------------------- sd
def test_std_dev(rng):
    assert std_dev(np.full((3, 3), 4.0)) == 0.0
    half = np.zeros((4, 4))
    half[:2] = 255
    assert std_dev(half) == 127.5
    img = rand_byte(rng)
    assert std_dev(img) == pytest.approx(oracles.std_dev(img.tolist()), abs=1e-9)


# --------------------------------------------------------------------- qabf
def test_qabf_identical_is_one(backend, rng):
    a = textured(rng)
    assert qabf(a, a, a) == pytest.approx(1.0, abs=1e-6)


def test_qabf_flat_fused_near_zero(backend, rng):
    a, b = textured(rng), textured(rng)
    assert qabf(a, b, np.full_like(a, 100.0)) < 1e-3


def test_qabf_crafted_8x8(backend):
    vis = np.zeros((8, 8))
    vis[:, 4:] = 200.0
    ir = np.zeros((8, 8))
    ir[3:6, 2:5] = 120.0
    fused = np.maximum(vis, ir) * 0.8 + 10.0
    assert qabf(vis, ir, fused) == pytest.approx(oracles.qabf(vis.tolist(), ir.tolist(), fused.tolist()), abs=1e-12)


def test_qabf_oracle_random(backend, rng):
    for _ in range(3):
        a, b, f = rand_byte(rng), rand_byte(rng), rand_byte(rng)
        assert qabf(a, b, f) == pytest.approx(oracles.qabf(a.tolist(), b.tolist(), f.tolist()), abs=1e-9)


def test_qabf_shape_mismatch():
    with pytest.raises(ValidationError):
        qabf(np.zeros((5, 5)), np.zeros((5, 5)), np.zeros((5, 6)))


# --------------------------------------------------------------------- ssim
def test_ssim_identity_and_decomposition(backend, rng):
    a, b = rand_byte(rng), rand_byte(rng)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim_fusion(a, a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim_fusion(a, b, a) == pytest.approx(0.5 * (1 + ssim(a, b)), abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_oracle(backend, rng):
    a, b, c = rand_byte(rng), rand_byte(rng), rand_byte(rng)
    assert ssim(a, b) == pytest.approx(oracles.ssim(a.tolist(), b.tolist()), abs=1e-9)
    assert ssim_fusion(a, b, c) == pytest.approx(oracles.ssim_fusion(a.tolist(), b.tolist(), c.tolist()), abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(ValidationError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


# -------------------------------------------------------------- bounds
byte_images = arrays(np.float64, (16, 16), elements=st.integers(0, 255).map(float))


@settings(max_examples=60, deadline=None)
@given(byte_images, byte_images, byte_images)
def test_metric_bounds(vis, ir, fused):
    m = metrics.all_metrics(vis, ir, fused)
    assert 0.0 <= m["en"] <= 8.0
    assert 0.0 <= m["qabf"] <= 1.0
    assert -1.0 <= m["ssim"] <= 1.0
    assert m["sf"] >= 0 and m["ag"] >= 0 and m["sd"] >= 0


def test_backends_agree(rng):
    from comofusion import _kernels as k

    img = rng.random((40, 33)) * 255
    for a, b in zip(k.sobel_numba(img), k.sobel_numpy(img)):
        np.testing.assert_allclose(a, b, atol=1e-10)
    taps = metrics.gaussian_taps()
    np.testing.assert_allclose(k.filter_valid_numba(img, taps), k.filter_valid_numpy(img, taps), atol=1e-9)
    assert k.average_gradient_numba(img) == pytest.approx(k.average_gradient_numpy(img), rel=1e-12)
    np.testing.assert_allclose(k.sf_terms_numba(img), k.sf_terms_numpy(img), rtol=1e-12)
    lv = rng.integers(0, 256, (20, 20))
    np.testing.assert_array_equal(k.histogram256_numba(lv), k.histogram256_numpy(lv))


# ----------------------------------------------------------- reports
def _write(path, arr):
    Image.fromarray(np.asarray(arr, np.uint8), mode="L").save(path)


@pytest.fixture
def triple_dirs(tmp_path, rng):
    dirs = {k: tmp_path / k for k in ("fused", "vis", "ir")}
    for d in dirs.values():
        d.mkdir()
    for name in ("b.png", "a.png"):
        for d in dirs.values():
            _write(d / name, textured(rng, (24, 24)))
    _write(dirs["fused"] / "orphan.png", textured(rng, (24, 24)))
    return dirs


def test_evaluate_report(triple_dirs):
    rep = evaluate(triple_dirs["fused"], triple_dirs["vis"], triple_dirs["ir"], dataset="toy")
    assert [r["name"] for r in rep.records] == ["a.png", "b.png"]
    assert [e["name"] for e in rep.errors] == ["orphan.png"]
    doc = json.loads(rep.to_json())
    jsonschema.validate(doc, metrics.REPORT_SCHEMA)
    for m in metrics.METRICS:
        assert doc["aggregate"][m] == pytest.approx(np.mean([r[m] for r in doc["records"]]))


def test_evaluate_single_triple_aggregate_equals_record(tmp_path, rng):
    for d in ("f", "v", "i"):
        (tmp_path / d).mkdir()
        _write(tmp_path / d / "x.png", textured(rng, (20, 20)))
    rep = evaluate(tmp_path / "f", tmp_path / "v", tmp_path / "i")
    assert len(rep.records) == 1
    for m in metrics.METRICS:
        assert rep.aggregate[m] == rep.records[0][m]


def test_evaluate_no_matches(tmp_path):
    for d in ("f", "v", "i"):
        (tmp_path / d).mkdir()
    rep = evaluate(tmp_path / "f", tmp_path / "v", tmp_path / "i")
    assert rep.records == [] and rep.aggregate == {}


def test_evaluate_csv(triple_dirs, tmp_path):
    rep = evaluate(triple_dirs["fused"], triple_dirs["vis"], triple_dirs["ir"])
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "name,en,sf,ag,sd,qabf,ssim"


def test_rank_methods_prefers_higher():
    good = MetricsReport(records=[{"name": "x", **{m: 2.0 for m in metrics.METRICS}}])
    bad = MetricsReport(records=[{"name": "x", **{m: 1.0 for m in metrics.METRICS}}])
    ranks = rank_methods({"bad": bad, "good": good})
    assert all(order == ["good", "bad"] for order in ranks.values())
