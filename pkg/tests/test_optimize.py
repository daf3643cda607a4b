import numpy as np
import pytest
import torch

from partseg.backbone import ToyBackbone
from partseg.data.augment import PRESETS
from partseg.data.synthetic import multi_region_sample, two_region_sample
from partseg.errors import ClassCountError, ConfigurationError, DivergenceError
from partseg.optimize import OptimizationConfig, optimize, prompt_text_for


def test_defaults_match_published_setting():
    c = OptimizationConfig()
    assert (c.epochs, c.lr, c.optimizer, c.batch_size) == (200, 0.1, "adam", 1)
    assert (c.alpha, c.beta, c.t_opt_range, c.target_size, c.gate) == (1.0, 0.005, (5, 100), (64, 64), 0.2)
    assert c.t_test == 100 and c.use_was and c.prompt == "part"


@pytest.mark.parametrize("kw", [dict(epochs=-1), dict(lr=-0.1), dict(optimizer="sgd"), dict(batch_size=2),
                                dict(t_opt_range=(50, 10)), dict(t_opt_range=(-1, 10))])
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        OptimizationConfig(**kw)


def test_t_range_beyond_scheduler(toy):
    with pytest.raises(ConfigurationError):
        optimize([two_region_sample()], toy, OptimizationConfig(epochs=1, t_opt_range=(5, 1000)))


def test_prompt_presets():
    names = ["background", "Body", "Front Light"]
    assert prompt_text_for("part", names) == "part part part"
    assert prompt_text_for("empty", names) == ""
    assert prompt_text_for("names", names) == "background body front_light"
    assert prompt_text_for("random", names) == "RANDOM"
    assert prompt_text_for("a photo of a car", names) == "a photo of a car"


def test_lr_zero_keeps_initialization(toy):
    s = two_region_sample()
    init = toy.encode_prompt("part part", 2, s.class_names)
    out = optimize([s], toy, OptimizationConfig(epochs=3, lr=0.0), init=init)
    assert torch.equal(out.embeddings.embeddings, init.embeddings)


def test_zero_epochs(toy):
    s = two_region_sample()
    out = optimize([s], toy, OptimizationConfig(epochs=0))
    assert torch.equal(out.embeddings.embeddings, toy.encode_prompt("part part", 2).embeddings)
    assert out.history == [] and out.manifest["final_loss"] is None


def test_seeded_reproducibility(toy):
    s = two_region_sample()
    a = optimize([s], toy, OptimizationConfig(epochs=4, seed=3))
    b = optimize([s], toy, OptimizationConfig(epochs=4, seed=3))
    c = optimize([s], toy, OptimizationConfig(epochs=4, seed=4))
    assert torch.equal(a.embeddings.embeddings, b.embeddings.embeddings)
    assert a.manifest == b.manifest
    assert not torch.equal(a.embeddings.embeddings, c.embeddings.embeddings)


def test_history_and_t_draws(toy):
    out = optimize([two_region_sample()], toy, OptimizationConfig(epochs=30, seed=1))
    t = out.manifest["t_draws"]
    assert len(t) == 30 and all(5 <= v <= 100 for v in t) and len(set(t)) > 10
    for row in out.history:
        assert row["total"] == row["l_ce"] + row["alpha"] * row["l_mse"] + row["beta"] * row["l_ldm"]
    assert out.manifest["reductions"] == {"mse": "mean", "ldm": "mean", "ce": "pixel_mean"}


def test_monotone_overfit(toy):
    out = optimize([two_region_sample()], toy, OptimizationConfig(epochs=50, seed=0))
    assert out.history[49]["total"] < out.history[0]["total"]
    first = np.mean([r["total"] for r in out.history[:5]])
    last = np.mean([r["total"] for r in out.history[-5:]])
    assert last < 0.5 * first


def test_few_shot_steps(toy):
    samples = [two_region_sample(seed=0, source_id="a"), two_region_sample(seed=1, source_id="b")]
    out = optimize(samples, toy, OptimizationConfig(epochs=2))
    assert [(r["epoch"], r["sample"]) for r in out.history] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert out.manifest["train_ids"] == ["a", "b"]


def test_mismatched_classes(toy):
    with pytest.raises(ClassCountError):
        optimize([two_region_sample(), multi_region_sample()], toy, OptimizationConfig(epochs=1))
    with pytest.raises(ConfigurationError):
        optimize([], toy)


def test_validation_selects_best_epoch(toy):
    s = multi_region_sample()
    val = [multi_region_sample(seed=5, source_id="val")]
    cfg = OptimizationConfig(epochs=8, seed=2)
    out = optimize([s], toy, cfg, validation=val)
    best = out.manifest["best_validation"]
    scores = [r["val_miou"] for r in out.history]
    assert best["miou"] == max(scores) and best["epoch"] == scores.index(max(scores))
    # replaying the same trajectory up to the best epoch gives the returned embeddings
    replay = optimize([s], toy, OptimizationConfig(epochs=best["epoch"] + 1, seed=2))
    assert torch.equal(out.embeddings.embeddings, replay.embeddings.embeddings)


def test_augmented_run(toy):
    out = optimize([two_region_sample()], toy, OptimizationConfig(epochs=3, augmentation=PRESETS["car"]))
    assert all(np.isfinite(r["total"]) for r in out.history)
    assert out.manifest["config"]["augmentation"]["crop_ratio_range"] == (0.5, 1.0)


def test_without_was_term(toy):
    out = optimize([two_region_sample()], toy, OptimizationConfig(epochs=2, use_was=False))
    assert all(r["l_mse"] == 0.0 for r in out.history)


def test_beta_recorded_for_ablation(toy):
    runs = {b: optimize([two_region_sample()], toy, OptimizationConfig(epochs=3, beta=b)) for b in (0.005, 0.5)}
    for b, r in runs.items():
        assert r.manifest["final_loss"]["beta"] == b
        assert r.manifest["config"]["beta"] == b


class NaNBackbone(ToyBackbone):
    def denoise_with_probes(self, sample, prompt):
        probes = super().denoise_with_probes(sample, prompt)
        probes.predicted_noise = probes.predicted_noise * float("nan")
        return probes


def test_divergence_raises_with_state():
    with pytest.raises(DivergenceError) as err:
        optimize([two_region_sample()], NaNBackbone(), OptimizationConfig(epochs=2))
    assert err.value.exit_code == 3
    assert err.value.state["epoch"] == 0 and "losses" in err.value.state
