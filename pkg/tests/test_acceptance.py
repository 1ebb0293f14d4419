"""The nine acceptance criteria, each at its stated tolerance and time budget.

Every test records one PASS/FAIL line (see conftest.record_acceptance);
the lines are repeated in the terminal summary.
"""
import json
import math
import time

import jsonschema
import numpy as np
import pytest
import torch
from PIL import Image

import oracles
from comofusion import _kernels, metrics
from comofusion.cli import main as cli_main
from comofusion.nets import ConsistencyNetwork, FusionNetwork
from comofusion.schedule import consistency_apply, make_schedule
from comofusion.synthetic import make_pairs, write_dataset
from comofusion.training import (
    CMTrainConfig,
    FusionTrainConfig,
    consistency_loss,
    ema_update,
    fusion_stats,
    fusion_total_loss,
    grad_loss,
    pvs_loss,
    train_consistency,
    train_fusion,
)
from conftest import KERNELS, record_acceptance


def identity(net, x, t, schedule):
    return x


def central_difference(fn, x, h=1e-5):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + h
        up = fn(x).item()
        flat[k] = orig - h
        down = fn(x).item()
        flat[k] = orig
        grad.view(-1)[k] = (up - down) / (2 * h)
    return grad


# ------------------------------------------------------------------ 1
def test_criterion_1_schedule_exactness():
    start = time.perf_counter()
    s = make_schedule(epsilon=0.002, T=80.0, rho=7.0, N=40)
    t2 = oracles.schedule_time(2, 0.002, 80.0, 7.0, 40)
    errs = {
        "t1": abs(s.t(1) - 0.002),
        "t40": abs(s.t(40) - 80.0),
        "t2": abs(s.t(2) - t2),
    }
    increasing = bool(np.all(np.diff(s.times) > 0))
    elapsed = time.perf_counter() - start
    ok = max(errs.values()) <= 1e-12 and increasing and elapsed < 1.0
    detail = f"t2={s.t(2):.16g}, max err {max(errs.values()):.1e}, increasing={increasing}, {elapsed:.3f}s"
    assert record_acceptance(1, "schedule exactness", ok, detail)


# ------------------------------------------------------------------ 2
def test_criterion_2_boundary_identity():
    start = time.perf_counter()
    s = make_schedule()
    worst = 0.0
    for seed in range(100):
        torch.manual_seed(seed)
        net = ConsistencyNetwork()
        x = torch.randn(2, 2, 16, 16) * (1 + seed % 7)
        with torch.no_grad():
            out = consistency_apply(net, x, s.epsilon, s)
        worst = max(worst, (out - x).abs().max().item())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 30
    assert record_acceptance(2, "boundary identity", ok, f"max |D(x,eps)-x| = {worst:.2e} over 100 inits, {elapsed:.1f}s")


# ------------------------------------------------------------------ 3
def test_criterion_3_loss_gradients():
    start = time.perf_counter()
    worst = {}
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        vis, ir, fused = (torch.rand(8, 8, generator=g, dtype=torch.float64) for _ in range(3))
        for name, loss in (("pvs", pvs_loss), ("grad", grad_loss), ("total", fusion_total_loss)):
            f = fused.clone().requires_grad_(True)
            loss(vis, ir, f).backward()
            numeric = central_difference(lambda x: loss(vis, ir, x), fused.clone(), h=1e-5)
            rel = ((f.grad - numeric).norm() / f.grad.norm()).item()
            worst[name] = max(worst.get(name, 0.0), rel)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s"
    assert record_acceptance(3, "loss gradients vs central differences", ok, detail)


# ------------------------------------------------------------------ 4
def test_criterion_4_closed_form_consistency_loss():
    start = time.perf_counter()
    s = make_schedule()
    cfg = CMTrainConfig(distance="l2")
    rng = np.random.default_rng(4)
    x0 = torch.from_numpy(rng.uniform(-1, 1, (4, 2, 8, 8)))
    worst = 0.0
    for _ in range(20):
        i = int(rng.integers(1, s.N))
        z = torch.from_numpy(rng.standard_normal(x0.shape))
        loss = consistency_loss(None, None, x0, s, i, z, cfg, denoiser=identity).item()
        expected = 1.0 * (s.t(i + 1) - s.t(i)) ** 2 * float((z ** 2).mean())
        worst = max(worst, abs(loss - expected))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    assert record_acceptance(4, "closed-form consistency loss", ok, f"max abs err {worst:.1e} over 20 draws, {elapsed:.2f}s")


# ------------------------------------------------------------------ 5
def _use_backend(monkeypatch, name):
    for k in KERNELS:
        monkeypatch.setattr(_kernels, k, getattr(_kernels, f"{k}_{name}"))


def test_criterion_5_metric_oracles(monkeypatch):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    images = [rng.integers(0, 256, (16, 16)).astype(np.float64) for _ in range(50)]
    triples = [tuple(images[(k + j) % 50] for j in range(3)) for k in range(50)]
    single = {
        "en": (metrics.entropy, oracles.entropy),
        "sf": (metrics.spatial_frequency, oracles.spatial_frequency),
        "ag": (metrics.average_gradient, oracles.average_gradient),
        "sd": (metrics.std_dev, oracles.std_dev),
    }
    worst = {}
    for backend in ("numba", "numpy"):
        _use_backend(monkeypatch, backend)
        for name, (fn, ref) in single.items():
            for img in images:
                worst[name] = max(worst.get(name, 0.0), abs(fn(img) - ref(img.tolist())))
        for a, b, f in triples:
            lists = (a.tolist(), b.tolist(), f.tolist())
            worst["qabf"] = max(worst.get("qabf", 0.0), abs(metrics.qabf(a, b, f) - oracles.qabf(*lists)))
            worst["ssim"] = max(worst.get("ssim", 0.0), abs(metrics.ssim_fusion(a, b, f) - oracles.ssim_fusion(*lists)))
    uniform = np.arange(256, dtype=np.float64).reshape(16, 16)
    checker = (np.indices((16, 16)).sum(axis=0) % 2).astype(np.float64)
    yy, xx = np.mgrid[:16, :16]
    textured = 128 + 60 * np.sin(0.7 * xx + 0.3 * yy)
    anchors = {
        "EN(uniform)=8": metrics.entropy(uniform) == 8.0,
        "SSIM(x,x)=1": metrics.ssim(images[0], images[0]) == 1.0,
        "Qabf(a,a,a)=1": abs(metrics.qabf(textured, textured, textured) - 1.0) <= 1e-6,
        "SF(checker)=sqrt2": abs(metrics.spatial_frequency(checker) - math.sqrt(2)) <= 1e-9,
    }
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and all(anchors.values()) and elapsed < 60
    failed = [k for k, v in anchors.items() if not v]
    detail = f"max oracle err {max(worst.values()):.1e} (both backends), anchors failed: {failed or 'none'}, {elapsed:.1f}s"
    assert record_acceptance(5, "metric oracles and anchors", ok, detail)


# ------------------------------------------------------------------ 6, 7
@pytest.fixture(scope="module")
def stage1():
    pairs = make_pairs(200, 64, 64, seed=0)
    cfg = CMTrainConfig(batch_size=15, crop=64, steps=500, seed=0)
    start = time.perf_counter()
    result = train_consistency(pairs, cfg, make_schedule())
    return result, cfg, pairs, time.perf_counter() - start


def test_criterion_6_stage1_smoke(stage1):
    result, cfg, pairs, elapsed = stage1
    hist = np.asarray(result.history)
    first, last = hist[:50].mean(), hist[-50:].mean()
    # determinism: an independent rerun reproduces the same loss sequence (checked on a prefix)
    rerun = train_consistency(pairs, CMTrainConfig(batch_size=15, crop=64, steps=60, seed=0), make_schedule())
    deterministic = np.allclose(rerun.history, hist[:60], rtol=0, atol=1e-6)
    ok = len(hist) == 500 and last < 0.5 * first and deterministic and elapsed <= 600
    detail = (f"first-50 mean {first:.4f}, last-50 mean {last:.4f}, ratio {last / first:.3f} (need < 0.5), "
              f"deterministic={deterministic}, {elapsed:.0f}s")
    assert record_acceptance(6, "stage-1 smoke training", ok, detail)


def test_criterion_7_stage2_semantics(stage1):
    cm = stage1[0].net
    # 2 epochs at lr 1e-4 and batch 15 move a fresh head far enough only when each epoch
    # holds several hundred batches (the head escapes a L_pvs ~ 1.2 plateau after roughly
    # 900 steps), so the toy set is sized like a small real training set: 683 batches per epoch
    pairs = make_pairs(10240, 64, 64, seed=1)
    schedule = make_schedule()
    cfg = FusionTrainConfig(epochs=2, lr=1e-4, batch_size=15, crop=64, seed=0)
    torch.manual_seed(0)
    head = FusionNetwork()
    start = time.perf_counter()
    result = train_fusion(pairs, cm, head, cfg, schedule)
    stats = fusion_stats(pairs, cm, head, schedule)
    elapsed = time.perf_counter() - start
    ok = stats["mean_g_fused"] > stats["mean_g_redundant"] and stats["mean_pvs"] < 1 and elapsed <= 600
    detail = (f"{len(result.history)} steps, mean g_f {stats['mean_g_fused']:.4f}, mean g_r "
              f"{stats['mean_g_redundant']:.4f}, mean L_pvs {stats['mean_pvs']:.3f}, {elapsed:.0f}s")
    assert record_acceptance(7, "stage-2 loss semantics", ok, detail)


# ------------------------------------------------------------------ 8
def test_criterion_8_frozen_backbone_and_ema():
    torch.manual_seed(8)
    cm = ConsistencyNetwork()
    before = {k: v.clone() for k, v in cm.state_dict().items()}
    head = FusionNetwork()
    head_before = [p.clone() for p in head.parameters()]
    train_fusion(make_pairs(6, 32, 32, seed=8), cm, head, FusionTrainConfig(epochs=1, batch_size=3, crop=32), make_schedule())
    frozen = all(torch.equal(before[k], v) for k, v in cm.state_dict().items())
    head_moved = any(not torch.equal(a, b) for a, b in zip(head_before, head.parameters()))
    grads_clear = all(p.grad is None for p in cm.parameters())

    theta, ema = ConsistencyNetwork(), ConsistencyNetwork()
    ema_update(ema, theta, 0.0)
    copied = all(torch.equal(a, b) for a, b in zip(ema.state_dict().values(), theta.state_dict().values()))
    ok = frozen and head_moved and grads_clear and copied
    detail = f"backbone bitwise unchanged={frozen}, head trained={head_moved}, no backbone grads={grads_clear}, mu=0 copy exact={copied}"
    assert record_acceptance(8, "frozen backbone and EMA", ok, detail)


# ------------------------------------------------------------------ 9
def test_criterion_9_cli_end_to_end(tmp_path):
    start = time.perf_counter()
    ir, vis = write_dataset(tmp_path / "data", 3, 64, 64, seed=9)
    run = tmp_path / "run"
    common = ["--ir-dir", str(ir), "--vis-dir", str(vis)]
    codes = {}
    codes["train-cm"] = cli_main(["train-cm", *common, "--steps", "30", "--set", "cm_crop=64",
                                  "--set", "cm_batch_size=3", "--out", str(run)])
    checks = {}
    for source in ("encoder", "decoder"):
        out = run / source
        codes[f"train-fusion/{source}"] = cli_main(
            ["train-fusion", "--cm", str(run / "cm.safetensors"), *common, "--feature-source", source,
             "--set", "fusion_crop=64", "--set", "fusion_batch_size=3", "--out", str(out)])
        fused = out / "fused"
        codes[f"fuse/{source}"] = cli_main(
            ["fuse", "--cm", str(run / "cm.safetensors"), "--fusion", str(out / "fusion.safetensors"),
             "--ir", str(ir), "--vis", str(vis), "--out", str(fused)])
        report = out / "report.json"
        codes[f"evaluate/{source}"] = cli_main(
            ["evaluate", "--fused-dir", str(fused), "--vis-dir", str(vis), "--ir-dir", str(ir), "--out", str(report)])
        sizes = [Image.open(p).size for p in sorted(fused.glob("*.png"))]
        doc = json.loads(report.read_text())
        jsonschema.validate(doc, metrics.REPORT_SCHEMA)
        bounded = all(
            0 <= r["en"] <= 8 and 0 <= r["qabf"] <= 1 and -1 <= r["ssim"] <= 1
            and min(r["sf"], r["ag"], r["sd"]) >= 0 and all(math.isfinite(r[m]) for m in metrics.METRICS)
            for r in doc["records"]
        )
        checks[source] = sizes == [(64, 64)] * 3 and len(doc["records"]) == 3 and bounded
    elapsed = time.perf_counter() - start
    ok = all(c == 0 for c in codes.values()) and all(checks.values()) and elapsed <= 900
    bad = [k for k, c in codes.items() if c != 0]
    detail = f"nonzero exits: {bad or 'none'}, outputs ok: {checks}, {elapsed:.0f}s"
    assert record_acceptance(9, "end-to-end CLI", ok, detail)
