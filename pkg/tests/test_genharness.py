import math

import numpy as np
import pytest
import torch

from vtp.checkpoint import module_hash
from vtp.data import synth_dataset
from vtp.evaluation import train_feature_extractor
from vtp.genharness import (DiT, DiTConfig, FlowState, build_dit, rf_loss,
                            sample, timestep_embedding, train_and_score)
from vtp.model import build_model

from conftest import tiny_model_config

TINY_DIT = dict(depth=1, width=16, heads=2, latent_dim=4, grid=2,
                num_classes=4, sampler_steps=10, train_steps=40, batch=16)


class _FieldStub:
    """Callable velocity field with just enough surface for sample()."""

    def __init__(self, fn, **cfg_over):
        self.cfg = DiTConfig(**{**TINY_DIT, **cfg_over})
        self.fn = fn

    def __call__(self, x_t, t, y):
        return self.fn(x_t, t, y)


# -- config -------------------------------------------------------------------

def test_dit_config_guards():
    with pytest.raises(ValueError, match="divisible"):
        DiTConfig(**{**TINY_DIT, "width": 15}).validate()
    with pytest.raises(ValueError, match="guidance"):
        DiTConfig(**{**TINY_DIT, "cfg_scale": 1.5}).validate()
    with pytest.raises(ValueError, match="positive"):
        DiTConfig(**{**TINY_DIT, "depth": 0}).validate()


def test_dit_config_sha_tracks_content():
    a = DiTConfig(**TINY_DIT).sha()
    assert a == DiTConfig(**TINY_DIT).sha()
    assert a != DiTConfig(**{**TINY_DIT, "train_steps": 41}).sha()


def test_build_dit_deterministic():
    assert module_hash(build_dit(DiTConfig(**TINY_DIT))) \
        == module_hash(build_dit(DiTConfig(**TINY_DIT)))


# -- forward ------------------------------------------------------------------

def test_dit_forward_shape_and_zero_init():
    dit = build_dit(DiTConfig(**TINY_DIT))
    x = torch.randn(3, 4, 2, 2)
    v = dit(x, torch.tensor([0.1, 0.5, 0.9]), torch.tensor([0, 1, 2]))
    assert v.shape == (3, 4, 2, 2)
    # zero-initialized output projection: initial field is exactly zero
    assert torch.equal(v, torch.zeros_like(v))


def test_dit_forward_latent_mismatch():
    dit = build_dit(DiTConfig(**TINY_DIT))
    with pytest.raises(ValueError, match="does not match harness"):
        dit(torch.randn(2, 8, 2, 2), torch.tensor([0.5, 0.5]), torch.tensor([0, 1]))


def test_timestep_embedding_contract():
    t = torch.tensor([0.0, 0.25, 0.9])
    e = timestep_embedding(t, 16)
    assert e.shape == (3, 16)
    assert torch.isfinite(e).all()
    assert not torch.equal(e[0], e[1])
    assert timestep_embedding(t, 15).shape == (3, 15)


# -- rectified flow loss --------------------------------------------------------

def test_rf_loss_zero_field_matches_replayed_target():
    dit = _FieldStub(lambda x_t, t, y: torch.zeros_like(x_t))
    latents = torch.from_numpy(
        np.random.default_rng(1).standard_normal((64, 4, 2, 2))).float()
    labels = torch.zeros(64, dtype=torch.long)
    loss = rf_loss(dit, latents, labels, np.random.default_rng(42))

    rng = np.random.default_rng(42)  # replay the exact same draw
    t = torch.from_numpy(rng.uniform(0.0, 1.0, size=64)).float()
    x0 = torch.from_numpy(rng.standard_normal(latents.shape)).float()
    expect = ((latents - x0) ** 2).mean()
    assert float(loss) == pytest.approx(float(expect), rel=1e-6)
    # standardized latents + unit noise: population value is Var+Var = 2
    assert float(loss) == pytest.approx(2.0, abs=0.15)


def test_rf_loss_perfect_predictor_is_zero():
    # with x1 = 0 the target velocity is -x0 and x_t = (1-t) x0
    dit = _FieldStub(lambda x_t, t, y:
                     -x_t / (1.0 - t.reshape(-1, 1, 1, 1)))
    latents = torch.zeros(32, 4, 2, 2)
    loss = rf_loss(dit, latents, torch.zeros(32, dtype=torch.long),
                   np.random.default_rng(7))
    assert float(loss) < 1e-10


def test_flow_state_interpolation():
    x0 = torch.zeros(2, 1, 1, 1)
    x1 = torch.ones(2, 1, 1, 1)
    fs = FlowState(t=torch.tensor([0.25, 0.75]), x0=x0, x1=x1)
    assert torch.allclose(fs.x_t.flatten(), torch.tensor([0.25, 0.75]))
    assert torch.equal(fs.velocity, x1 - x0)


# -- sampler ------------------------------------------------------------------

def test_sample_zero_field_returns_initial_noise():
    dit = _FieldStub(lambda x_t, t, y: torch.zeros_like(x_t))
    labels = torch.zeros(6, dtype=torch.long)
    out = sample(dit, labels, steps=7, rng=np.random.default_rng(3))
    expect = torch.from_numpy(
        np.random.default_rng(3).standard_normal((6, 4, 2, 2))).float()
    assert torch.equal(out, expect)


def test_sample_constant_field_integrates_exactly():
    c = 0.8
    dit = _FieldStub(lambda x_t, t, y: torch.full_like(x_t, c))
    labels = torch.zeros(4, dtype=torch.long)
    out = sample(dit, labels, steps=50, rng=np.random.default_rng(5))
    x0 = torch.from_numpy(
        np.random.default_rng(5).standard_normal((4, 4, 2, 2))).float()
    assert torch.allclose(out, x0 + c, atol=1e-5)


def test_sample_euler_error_halves_with_steps():
    # v(x) = -x integrates to x0/e; Euler error scales as 1/steps
    dit = _FieldStub(lambda x_t, t, y: -x_t)
    labels = torch.zeros(8, dtype=torch.long)
    errs = {}
    for steps in (50, 100):
        out = sample(dit, labels, steps=steps, rng=np.random.default_rng(9))
        x0 = torch.from_numpy(
            np.random.default_rng(9).standard_normal((8, 4, 2, 2))).float()
        errs[steps] = float((out - x0 * math.exp(-1.0)).abs().mean())
    ratio = errs[50] / errs[100]
    assert 1.5 < ratio < 2.5


def test_sample_rejects_bad_steps():
    dit = _FieldStub(lambda x_t, t, y: torch.zeros_like(x_t))
    with pytest.raises(ValueError, match=">= 1"):
        sample(dit, torch.zeros(2, dtype=torch.long), steps=0,
               rng=np.random.default_rng(0))


# -- end to end ---------------------------------------------------------------

@pytest.fixture(scope="module")
def harness_setup(tmp_path_factory):
    model = build_model(tiny_model_config(), seed=21)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    ds = synth_dataset(31, 256, 4, 16)
    extractor = train_feature_extractor(
        16, num_classes=4, steps=120,
        cache_dir=str(tmp_path_factory.mktemp("cache")))
    return model, ds, extractor


def _tiny_dit_cfg(model):
    return DiTConfig(**{**TINY_DIT, "latent_dim": model.cfg.latent_dim,
                        "grid": model.cfg.token_grid})


def test_train_and_score_contract(harness_setup):
    model, ds, extractor = harness_setup
    out = train_and_score(model, ds, _tiny_dit_cfg(model), extractor,
                          n_score=160, heldout_seed=123)
    assert out["frechet_gen"] >= 0.0
    assert out["rf_loss_final"] < out["rf_loss_init"]
    assert out["dit_sha"] == _tiny_dit_cfg(model).sha()
    assert out["tokenizer_sha"] == module_hash(model)
    assert out["extractor_sha"] == extractor.sha
    assert len(out["latent_mean"]) == model.cfg.latent_dim

    again = train_and_score(model, ds, _tiny_dit_cfg(model), extractor,
                            n_score=160, heldout_seed=123)
    assert again["frechet_gen"] == out["frechet_gen"]


def test_train_and_score_latent_dim_guard(harness_setup):
    model, ds, extractor = harness_setup
    bad = DiTConfig(**{**TINY_DIT, "latent_dim": model.cfg.latent_dim + 1,
                       "grid": model.cfg.token_grid})
    with pytest.raises(ValueError, match="harness expects"):
        train_and_score(model, ds, bad, extractor, n_score=160)


def test_train_and_score_class_count_guard(harness_setup):
    model, ds, extractor = harness_setup
    bad = DiTConfig(**{**TINY_DIT, "latent_dim": model.cfg.latent_dim,
                       "grid": model.cfg.token_grid, "num_classes": 7})
    with pytest.raises(ValueError, match="classes"):
        train_and_score(model, ds, bad, extractor, n_score=160)


def test_train_and_score_drift_guard(harness_setup):
    model, ds, extractor = harness_setup
    # stats from a different tokenizer no longer standardize these latents
    with pytest.raises(ValueError, match="not standardized"):
        train_and_score(model, ds, _tiny_dit_cfg(model), extractor,
                        n_score=160,
                        stats=([5.0] * model.cfg.latent_dim,
                               [0.01] * model.cfg.latent_dim))
