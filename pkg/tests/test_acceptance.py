"""Acceptance criteria 1-9; a summary line per criterion is printed at the end of the run."""
import filecmp
import os
import time

import numpy as np
import pytest
import torch

import oracles
from partseg import cli
from partseg.attention import aggregate_cross, aggregate_self, compose_was, stack_was
from partseg.backbone import ToyBackbone
from partseg.data.pascal import RawImage, RawObject, prepare_pascal_part
from partseg.data.synthetic import two_region_sample
from partseg.eval import iou
from partseg.inference import coverage_map, segment
from partseg.losses import ce_loss, ldm_loss, mse_loss, resize_mask
from partseg.optimize import OptimizationConfig, assemble, compute_losses, optimize


def _random_stochastic(rng, shape, axis_size):
    x = rng.random(shape + (axis_size,)) + 1e-3
    return x / x.sum(-1, keepdims=True)


def _random_self(rng, h, w):
    return _random_stochastic(rng, (h, w), h * w).reshape(h, w, h, w)


# ---- 1 -----------------------------------------------------------------------

@pytest.mark.acceptance(1)
def test_attention_normalization(toy):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_cross = worst_self = 0.0
    for i in range(100):
        image = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
        t = int(rng.integers(0, toy.descriptor.t_max + 1))
        k = int(rng.integers(1, 8))
        if i % 2:
            emb = toy.encode_prompt("RANDOM", k, seed=i)
        else:
            emb = toy.encode_prompt(" ".join(["part"] * k), k)
        latent = toy.encode_image(image)
        sample = toy.add_noise(latent, t, generator=torch.Generator().manual_seed(i))
        with torch.no_grad():
            probes = toy.denoise_with_probes(sample, emb)
        a_ca = aggregate_cross(probes, (64, 64))
        a_sa = aggregate_self(probes)
        worst_cross = max(worst_cross, float((a_ca.sum(-1) - 1).abs().max()))
        worst_self = max(worst_self, float((a_sa.sum(dim=(2, 3)) - 1).abs().max()))
    elapsed = time.perf_counter() - start
    print(f"max |token sum - 1| = {worst_cross:.2e}, max |key sum - 1| = {worst_self:.2e}, {elapsed:.1f}s")
    assert worst_cross < 1e-4
    assert worst_self < 1e-4
    assert elapsed < 30


# ---- 2 -----------------------------------------------------------------------

@pytest.mark.acceptance(2)
def test_was_mass_conservation():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    for _ in range(100):
        H = int(rng.integers(4, 17))
        h = int(rng.integers(2, 9))
        a_ca = torch.from_numpy(rng.random((H, H)) * 0.8 + 0.21)  # max > 0.2: passes the gate
        a_sa = torch.from_numpy(_random_self(rng, h, h))
        s, passed = compose_was(a_ca, a_sa)
        assert passed
        r = torch.nn.functional.interpolate(a_ca[None, None], size=(h, h), mode="bilinear",
                                            align_corners=False)[0, 0]
        assert abs(float(s.sum() - r.sum())) < 1e-4
        identity = torch.eye(h * h, dtype=torch.float64).reshape(h, h, h, h)
        s_id, _ = compose_was(a_ca, identity)
        assert float((s_id - r).abs().max()) < 1e-9
    assert time.perf_counter() - start < 10


# ---- 3 -----------------------------------------------------------------------

@pytest.mark.acceptance(3)
def test_oracle_equivalence():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for n in range(60):
        H, W = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        h = int(rng.integers(2, 6))
        k = int(rng.integers(1, 5))
        T = k + int(rng.integers(0, 4))
        labels = rng.integers(0, k, (H, W))
        a_ca = _random_stochastic(rng, (H, W), T)
        a_sa = _random_self(rng, h, h)
        gate = float(rng.uniform(0.0, 0.6))

        # compose_was / stack_was
        for c in range(k):
            got, _ = compose_was(torch.from_numpy(a_ca[..., c]), torch.from_numpy(a_sa), gate)
            worst = max(worst, np.abs(got.numpy() - oracles.was(a_ca[..., c], a_sa, gate)).max())
        stack = stack_was(torch.from_numpy(a_ca), torch.from_numpy(a_sa), k, gate)
        ref = np.stack([oracles.was(a_ca[..., c], a_sa, gate) for c in range(k)])
        worst = max(worst, np.abs(stack.maps.numpy() - ref).max())

        # ce_loss
        mask = resize_mask(labels, k, (H, W))
        got = float(ce_loss(torch.from_numpy(a_ca), mask, k))
        worst = max(worst, abs(got - oracles.ce(a_ca, labels, k)))

        # mse_loss, both reductions
        maps = rng.random((k, h, h))
        for red in ("sum", "mean"):
            got = float(mse_loss(torch.from_numpy(maps), mask, red))
            worst = max(worst, abs(got - oracles.mse(maps, labels, k, red)))

        # ldm_loss
        pred, noise = rng.normal(size=(3, h, h)), rng.normal(size=(3, h, h))
        for red in ("sum", "mean"):
            got = float(ldm_loss(torch.from_numpy(pred), torch.from_numpy(noise), red))
            worst = max(worst, abs(got - oracles.ldm(pred, noise, red)))

        # iou
        pred_l = rng.integers(0, k, (H, W))
        np.testing.assert_allclose(iou(pred_l, labels, k), oracles.iou(pred_l, labels, k), atol=1e-8)
    elapsed = time.perf_counter() - start
    print(f"max abs error vs oracles {worst:.2e} over 60 instances, {elapsed:.1f}s")
    assert worst < 1e-8
    assert elapsed < 60


# ---- 4 -----------------------------------------------------------------------

@pytest.mark.acceptance(4)
def test_gradient_check(toy64):
    start = time.perf_counter()
    k = 8
    base = two_region_sample()
    labels = np.repeat(np.arange(64) // 8, 64).reshape(64, 64).T  # eight vertical stripes
    config = OptimizationConfig()
    init = toy64.encode_prompt(" ".join(["part"] * k), k)
    frozen = init.embeddings.detach().clone()
    latent = toy64.encode_image(base.image)
    mask = resize_mask(labels, k, config.target_size)
    noise = torch.randn(latent.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    t = 40

    def total(trainable):
        emb = init.with_embeddings(assemble(frozen, trainable, k))
        return compute_losses(emb, latent, mask, toy64, config, t, noise)[1]

    x = frozen[1:k].clone().requires_grad_(True)
    grad = torch.autograd.grad(total(x), x)[0].reshape(-1)

    # finite differences are only meaningful away from the (step-function) gate
    with torch.no_grad():
        probes = toy64.denoise_with_probes(toy64.add_noise(latent, t, noise=noise), init)
    peaks = aggregate_cross(probes)[..., :k].reshape(-1, k).max(dim=0).values
    assert float((peaks - config.gate).abs().min()) > 1e-3

    rng = np.random.default_rng(3)
    coords = rng.choice(x.numel(), size=200, replace=False)
    eps = 1e-6
    worst = 0.0
    with torch.no_grad():
        for idx in coords:
            e = torch.zeros(x.numel(), dtype=x.dtype)
            e[idx] = eps
            e = e.reshape(x.shape)
            fd = (float(total(x.detach() + e)) - float(total(x.detach() - e))) / (2 * eps)
            an = float(grad[idx])
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    elapsed = time.perf_counter() - start
    print(f"max relative error {worst:.2e} over 200 coordinates, {elapsed:.1f}s")
    assert worst < 1e-3
    assert elapsed < 120


# ---- 5 -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def overfit(toy):
    sample = two_region_sample()
    start = time.perf_counter()
    result = optimize([sample], toy, OptimizationConfig(epochs=50, seed=0))
    return sample, result, time.perf_counter() - start


def _miou(res, mask):
    return float(np.nanmean(iou(res.labels, mask, 2)))


@pytest.mark.acceptance(5)
def test_toy_overfit(toy, overfit):
    sample, result, elapsed = overfit
    with_was = _miou(segment(sample.image, result.embeddings, toy, use_was=True), sample.mask)
    without = _miou(segment(sample.image, result.embeddings, toy, use_was=False), sample.mask)
    print(f"training-image mIoU: WAS {with_was:.4f}, cross attention only {without:.4f}, {elapsed:.1f}s")
    assert with_was >= 0.8
    assert with_was >= without
    assert elapsed < 300


# ---- 6 -----------------------------------------------------------------------

@pytest.mark.acceptance(6)
@pytest.mark.parametrize("options", [dict(epochs=3), dict(epochs=2, lr=0.0), dict(epochs=2, use_was=False),
                                     dict(epochs=2, prompt="random", seed=5)])
def test_frozen_state(toy, options):
    sample = two_region_sample(seed=1)
    config = OptimizationConfig(**options)
    before = toy.parameter_digest()
    init = toy.encode_prompt({"random": "RANDOM"}.get(config.prompt, "part part"), 2, sample.class_names,
                             seed=config.seed)
    result = optimize([sample], toy, config, init=init)
    assert toy.parameter_digest() == before
    got, ref = result.embeddings.embeddings, init.embeddings
    assert torch.equal(got[0], ref[0])
    assert torch.equal(got[2:], ref[2:])


@pytest.mark.acceptance(6)
def test_frozen_state_overfit_run(toy, overfit):
    sample, result, _ = overfit
    init = toy.encode_prompt("part part", 2, sample.class_names)
    assert torch.equal(result.embeddings.embeddings[0], init.embeddings[0])
    assert torch.equal(result.embeddings.embeddings[2:], init.embeddings[2:])
    assert result.embeddings.backbone_digest == toy.descriptor.digest
    assert toy.parameter_digest() == toy.descriptor.parameter_digest


# ---- 7 -----------------------------------------------------------------------

def _raw(image_id, boxes, category="car", size=(300, 300)):
    objects = []
    for x0, y0, x1, y1 in boxes:
        m = np.zeros(size, bool)
        m[y0:y1, x0:x1] = True
        objects.append(RawObject(category, m, {"wheel_1": m}))
    return RawImage(image_id, np.zeros(size + (3,), np.uint8), objects)


@pytest.mark.acceptance(7)
def test_data_prep_fixtures():
    start = time.perf_counter()
    # A and B overlap by 10x100 = 1000 px = 10% of each box; both go. C touches nothing.
    raw = _raw("img", [(0, 0, 100, 100), (90, 0, 190, 100), (200, 200, 260, 260)])
    samples, stats = prepare_pascal_part([raw], "car")
    assert [s.source_id for s in samples] == ["img_2"]
    assert stats["removed_overlap"] == 2
    # exactly 5% of own area is not "more than 5%"
    raw = _raw("edge", [(0, 0, 100, 100), (95, 0, 195, 100)])
    assert len(prepare_pascal_part([raw], "car")[0]) == 2

    # strict size filter
    assert len(prepare_pascal_part([_raw("a", [(0, 0, 49, 50)])], "car")[0]) == 0
    assert len(prepare_pascal_part([_raw("b", [(0, 0, 50, 49)])], "car")[0]) == 0
    assert len(prepare_pascal_part([_raw("c", [(0, 0, 50, 50)])], "car")[0]) == 1
    assert len(prepare_pascal_part([_raw("d", [(0, 0, 32, 32)], "horse")], "horse")[0]) == 1
    assert len(prepare_pascal_part([_raw("e", [(0, 0, 31, 32)], "horse")], "horse")[0]) == 0

    # patch coverage equals a geometric count over the four 400x400 patches
    cov = coverage_map(512, 400)
    ref = np.zeros((512, 512), int)
    for r0 in (0, 112):
        for c0 in (0, 112):
            for r in range(512):
                if r0 <= r < r0 + 400:
                    ref[r, c0:c0 + 400] += 1
    np.testing.assert_array_equal(cov, ref)
    assert cov[0, 0] == cov[0, -1] == cov[-1, 0] == cov[-1, -1] == 1
    assert cov[256, 256] == 4
    assert time.perf_counter() - start < 10


# ---- 8 -----------------------------------------------------------------------

def _pipeline(root, data):
    ckpt = os.path.join(root, "emb.ckpt")
    assert cli.main(["optimize", "--backbone", "toy", "--train", data, "--out", ckpt, "--epochs", "5"]) == 0
    assert cli.main(["segment", "--ckpt", ckpt, "--images", data, "--out", os.path.join(root, "seg")]) == 0
    assert cli.main(["evaluate", "--ckpt", ckpt, "--test", data, "--seeds", "0,1",
                     "--out", os.path.join(root, "eval")]) == 0


@pytest.mark.acceptance(8)
def test_reproducibility(tmp_path):
    data = str(tmp_path / "data")
    assert cli.main(["synth", "--out", data, "--count", "2"]) == 0
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    _pipeline(a, data)
    _pipeline(b, data)
    files = ["emb.ckpt", "emb.ckpt.manifest.json", "emb.ckpt.loss.csv",
             "seg/two_region_000.mask.png", "seg/two_region_001.mask.png", "seg/two_region_000.json",
             "eval/reports/report.json", "eval/reports/report.md", "eval/reports/report.csv"]
    for f in files:
        assert filecmp.cmp(os.path.join(a, f), os.path.join(b, f), shallow=False), f


# ---- 9 -----------------------------------------------------------------------

@pytest.mark.acceptance(9)
@pytest.mark.skipif(not (os.environ.get("PARTSEG_WEIGHTS") and torch.cuda.is_available()),
                    reason="needs SD 2.1 weights (PARTSEG_WEIGHTS) and a GPU")
def test_sd21_table_reproduction():
    pytest.skip("hours-long GPU run; use `partseg ablate` with the SD 2.1 backbone on prepared PASCAL-Part car")
