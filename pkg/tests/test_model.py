import copy

import pytest
import torch

from vtp.model import (EmaTeacher, LatentGrid, ModelConfig, build_model, count_flops,
                       count_params, dino_logits, ema_update, patchify, unpatchify)

from conftest import tiny_model_config


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_model_config(image_size=20).validate()   # not divisible by patch
    with pytest.raises(ValueError):
        tiny_model_config(encoder_width=30, encoder_heads=4).validate()
    with pytest.raises(ValueError):
        tiny_model_config(latent_dim=0).validate()
    assert tiny_model_config().validate().token_grid == 2


def test_encode_shapes_full_scale():
    cfg = ModelConfig(image_size=256, patch_size=16, latent_dim=64,
                      encoder_width=32, encoder_depth=1, encoder_heads=2,
                      decoder_width=32, decoder_blocks=1, decoder_heads=2,
                      text_width=16, text_depth=1, text_heads=2)
    model = build_model(cfg, seed=0)
    z = model.encode(torch.zeros(3, 256, 256))
    assert tuple(z.values.shape) == (64, 16, 16)

    cfg64 = ModelConfig(image_size=64, patch_size=16, latent_dim=16,
                        encoder_width=32, encoder_depth=1, encoder_heads=2,
                        decoder_width=32, decoder_blocks=1, decoder_heads=2,
                        text_width=16, text_depth=1, text_heads=2)
    model64 = build_model(cfg64, seed=0)
    z64 = model64.encode(torch.zeros(3, 64, 64))
    assert tuple(z64.values.shape) == (16, 4, 4)

    with pytest.raises(ValueError):
        model.encode(torch.zeros(3, 250, 256))


def test_decode_shape_inverse(tiny_model, tiny_cfg):
    g = tiny_cfg.token_grid
    z = LatentGrid(values=torch.randn(tiny_cfg.latent_dim, g, g))
    img = tiny_model.decode(z)
    assert tuple(img.shape) == (3, tiny_cfg.image_size, tiny_cfg.image_size)
    assert img.abs().max() <= 1.0  # tanh head

    x = torch.rand(2, 3, tiny_cfg.image_size, tiny_cfg.image_size) * 2 - 1
    assert tiny_model.decode(tiny_model.encode(x)).shape == x.shape

    with pytest.raises(ValueError):
        tiny_model.decode(torch.randn(tiny_cfg.latent_dim * 2, g, g))


def test_patchify_roundtrip():
    x = torch.randn(2, 3, 16, 16)
    tokens = patchify(x, 8)
    assert tokens.shape == (2, 4, 3 * 64)
    assert torch.equal(unpatchify(tokens, 8, 2, 2), x)


def test_clip_image_embedding_contract(tiny_model, tiny_cfg):
    x = torch.rand(3, 16, 16) * 2 - 1
    with torch.no_grad():
        v = tiny_model.embed_image_clip(x)
        assert v.shape == (tiny_cfg.clip_embed_dim,)
        assert abs(float(v.norm()) - 1.0) < 1e-6
        assert torch.equal(v, tiny_model.embed_image_clip(x.clone()))

    # zero projection: epsilon floor keeps the output finite
    broken = build_model(tiny_cfg, seed=0)
    with torch.no_grad():
        broken.clip_image_proj.weight.zero_()
        v0 = broken.embed_image_clip(x)
    assert torch.isfinite(v0).all()


def test_clip_text_embedding_contract(tiny_model):
    with torch.no_grad():
        ids = torch.tensor([1, 5, 6, 2, 0, 0, 0, 0])
        v = tiny_model.embed_text_clip(ids)
        assert abs(float(v.norm()) - 1.0) < 1e-6
        assert torch.equal(v, tiny_model.embed_text_clip(ids.clone()))

        # empty caption = BOS/EOS only, still a valid unit vector
        v_empty = tiny_model.embed_text_clip(torch.tensor([1, 2, 0, 0, 0, 0, 0, 0]))
        assert abs(float(v_empty.norm()) - 1.0) < 1e-6

        with pytest.raises(ValueError):
            tiny_model.embed_text_clip(torch.tensor([1, 10_000, 2, 0, 0, 0, 0, 0]))


def test_ema_update_arithmetic(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    teacher = EmaTeacher(model)

    before = [p.clone() for p in teacher.parameters()]
    ema_update(teacher, model, m=1.0)
    assert all(torch.equal(a, b) for a, b in zip(before, teacher.parameters()))

    ema_update(teacher, model, m=0.0)
    for pt, ps in zip(teacher.vision_encoder.parameters(),
                      model.vision_encoder.parameters()):
        assert torch.equal(pt, ps)

    with torch.no_grad():
        for p in teacher.parameters():
            p.zero_()
        for p in model.vision_encoder.parameters():
            p.fill_(2.0)
        for p in model.dino_head.parameters():
            p.fill_(2.0)
    ema_update(teacher, model, m=0.5)
    for p in teacher.parameters():
        assert torch.allclose(p, torch.ones_like(p))

    with pytest.raises(ValueError):
        ema_update(teacher, model, m=1.5)


def test_ema_contraction(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    teacher = EmaTeacher(build_model(tiny_cfg, seed=1))

    def dist():
        with torch.no_grad():
            return sum(float((pt - ps).norm() ** 2) for pt, ps in zip(
                teacher.vision_encoder.parameters(), model.vision_encoder.parameters()))

    d0 = dist()
    ema_update(teacher, model, m=0.7)
    assert dist() < d0


def test_teacher_outside_gradient_tape(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    teacher = EmaTeacher(model)
    assert all(not p.requires_grad for p in teacher.parameters())

    x = torch.rand(2, 3, 16, 16) * 2 - 1
    feats = teacher.forward_branch(x, from_bottleneck=True)
    student = model.vision_encoder(x)[1]
    loss = (student - feats).pow(2).mean()
    loss.backward()
    assert all(p.grad is None for p in teacher.parameters())
    assert any(p.grad is not None for p in model.vision_encoder.parameters())


def test_dino_logits_oracles(tiny_model):
    head = tiny_model.dino_head
    feats = torch.randn(3, head.fc1.in_features)
    out = dino_logits(feats, head)
    assert out.shape == (3, tiny_model.cfg.dino_prototypes)
    assert torch.equal(out, dino_logits(feats.clone(), head))  # reproducible

    with pytest.raises(ValueError):
        dino_logits(torch.randn(3, head.fc1.in_features + 1), head)

    # linear head with identity weights passes features through unchanged
    class _Probe:
        def __init__(self, d):
            self.fc1 = torch.nn.Linear(d, d, bias=False)
            with torch.no_grad():
                self.fc1.weight.copy_(torch.eye(d))

        def __call__(self, x):
            return self.fc1(x)

    probe = _Probe(4)
    f = torch.randn(2, 4)
    assert torch.allclose(dino_logits(f, probe), f)
    with torch.no_grad():
        probe.fc1.weight.zero_()
    assert torch.equal(dino_logits(f, probe), torch.zeros(2, 4))


def test_count_params_matches_enumeration():
    for cfg in [tiny_model_config(),
                tiny_model_config(encoder_depth=3, decoder_blocks=2, use_qknorm=False),
                ModelConfig()]:
        model = build_model(cfg, seed=0)
        actual = sum(p.numel() for p in model.vision_encoder.parameters())
        actual += sum(p.numel() for p in model.pixel_decoder.parameters())
        assert count_params(cfg) == actual


def test_count_params_monotone_in_depth():
    a = count_params(tiny_model_config(encoder_depth=1))
    b = count_params(tiny_model_config(encoder_depth=2))
    assert b > a
    assert count_flops(tiny_model_config(encoder_depth=2)) > \
        count_flops(tiny_model_config(encoder_depth=1))


def test_qknorm_unit_vectors(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    attn = model.vision_encoder.blocks[0].attn
    attn.capture_qk = True
    model.encode(torch.rand(2, 3, 16, 16) * 2 - 1)
    qn = attn.last_q.norm(dim=-1)
    kn = attn.last_k.norm(dim=-1)
    assert float((qn - 1).abs().max()) < 1e-5
    assert float((kn - 1).abs().max()) < 1e-5

    plain = build_model(tiny_model_config(use_qknorm=False), seed=0)
    attn2 = plain.vision_encoder.blocks[0].attn
    attn2.capture_qk = True
    plain.encode(torch.rand(2, 3, 16, 16) * 2 - 1)
    assert float((attn2.last_q.norm(dim=-1) - 1).abs().max()) > 1e-3


def test_build_model_deterministic(tiny_cfg):
    a = build_model(tiny_cfg, seed=7)
    b = build_model(tiny_cfg, seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)
    c = build_model(tiny_cfg, seed=8)
    assert any(not torch.equal(pa, pc)
               for pa, pc in zip(a.parameters(), c.parameters()))


def test_encoder_mask_token_changes_output(tiny_cfg):
    model = build_model(tiny_cfg, seed=0)
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    mask = torch.zeros(1, 4, dtype=torch.bool)
    mask[0, 1] = True
    _, z_masked = model.vision_encoder(x, mask=mask)
    _, z_clean = model.vision_encoder(x)
    assert not torch.allclose(z_masked, z_clean)
