import math

import pytest
import torch

from vtp.checkpoint import module_hash
from vtp.trainer import (NonFiniteLossError, TrainConfig, Trainer,
                         load_tokenizer, schedule, step_flops)

from conftest import tiny_train_dict


def make_trainer(out_dir=None, **over):
    cfg = TrainConfig.from_dict(tiny_train_dict(**over)).validate()
    return Trainer(cfg, out_dir=out_dir)


# -- schedules ----------------------------------------------------------------

def test_lr_schedule_warmup_and_cosine():
    cfg = TrainConfig.from_dict(tiny_train_dict(
        lr_peak=2e-3, lr_floor=2e-4, warmup_frac=0.1))
    total = 100
    assert schedule("lr", 0, total, cfg) == 0.0
    assert schedule("lr", 5, total, cfg) == pytest.approx(1e-3)
    assert schedule("lr", 10, total, cfg) == pytest.approx(2e-3)
    # cosine midpoint sits exactly halfway between peak and floor
    mid = 10 + (total - 10) // 2
    assert schedule("lr", mid, total, cfg) == pytest.approx(
        2e-4 + (2e-3 - 2e-4) * 0.5, rel=1e-12)
    assert schedule("lr", total, total, cfg) == pytest.approx(2e-4, abs=1e-18)


def test_lr_schedule_no_warmup():
    cfg = TrainConfig.from_dict(tiny_train_dict(lr_peak=1e-3, warmup_frac=0.0))
    assert schedule("lr", 0, 10, cfg) == pytest.approx(1e-3)
    assert schedule("lr", 10, 10, cfg) == pytest.approx(0.0, abs=1e-18)


def test_ema_schedule_endpoints_and_midpoint():
    cfg = TrainConfig.from_dict(tiny_train_dict(ema_start=0.9, ema_end=1.0))
    assert schedule("ema", 0, 40, cfg) == pytest.approx(0.9)
    assert schedule("ema", 40, 40, cfg) == pytest.approx(1.0)
    assert schedule("ema", 20, 40, cfg) == pytest.approx(0.95)
    # monotone non-decreasing along the run
    vals = [schedule("ema", s, 40, cfg) for s in range(41)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_teacher_temp_schedule():
    cfg = TrainConfig.from_dict(tiny_train_dict(
        teacher_temp_start=0.04, teacher_temp_end=0.07, temp_warmup_frac=0.5))
    total = 10
    assert schedule("teacher_temp", 0, total, cfg) == pytest.approx(0.04)
    assert schedule("teacher_temp", 5, total, cfg) == pytest.approx(0.07)
    assert schedule("teacher_temp", 9, total, cfg) == pytest.approx(0.07)
    # linear in the warmup window
    assert schedule("teacher_temp", 2, total, cfg) == pytest.approx(
        0.04 + (0.07 - 0.04) * 2 / 5)


def test_schedule_guards():
    cfg = TrainConfig.from_dict(tiny_train_dict())
    with pytest.raises(ValueError):
        schedule("lr", -1, 10, cfg)
    with pytest.raises(ValueError):
        schedule("lr", 11, 10, cfg)
    with pytest.raises(ValueError):
        schedule("mystery", 0, 10, cfg)


# -- config validation --------------------------------------------------------

def test_config_rejects_bad_values():
    bad = [
        dict(stage="deploy"),
        dict(total_samples=0),
        dict(batch_ssl=99),
        dict(batch_rec=0),
        dict(warmup_frac=1.0),
        dict(lr_peak=0.0),
        dict(lr_floor=2.0, lr_peak=1.0),
        dict(ema_start=0.9, ema_end=0.5),
        dict(teacher_temp_start=0.2, teacher_temp_end=0.1),
        dict(mask_ratio=1.0),
        dict(enable_clip=False, enable_ssl=False, enable_rec=False),
    ]
    for over in bad:
        with pytest.raises(ValueError):
            TrainConfig.from_dict(tiny_train_dict(**over)).validate()


def test_config_rejects_dataset_size_mismatch():
    d = tiny_train_dict()
    d["dataset"]["image_size"] = 32
    with pytest.raises(ValueError, match="image_size"):
        TrainConfig.from_dict(d).validate()


def test_config_dict_roundtrip():
    cfg = TrainConfig.from_dict(tiny_train_dict())
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


# -- batches ------------------------------------------------------------------

def test_build_batch_is_pure_in_seed_and_step():
    t1 = make_trainer()
    t2 = make_trainer()
    b1, p1 = t1.build_batch(5)
    b2, p2 = t2.build_batch(5)
    assert torch.equal(b1["images"], b2["images"])
    assert b1["captions"] == b2["captions"]
    assert p1.ssl_indices.tolist() == p2.ssl_indices.tolist()
    assert p1.rec_indices.tolist() == p2.rec_indices.tolist()

    b3, _ = t1.build_batch(6)
    assert not torch.equal(b1["images"], b3["images"])


def test_build_batch_differs_across_seeds():
    a, _ = make_trainer(seed=0).build_batch(0)
    b, _ = make_trainer(seed=1).build_batch(0)
    assert not torch.equal(a["images"], b["images"])


def test_rec_only_batch_skips_disabled_branches():
    t = make_trainer(enable_clip=False, enable_ssl=False)
    batch, plan = t.build_batch(0)
    assert "token_ids" not in batch
    assert "views" not in batch
    rep = t.pretrain_step(batch, plan)
    assert rep.mim == rep.dino == rep.clip == 0.0
    assert rep.n_ssl == rep.n_clip == 0
    assert rep.l1 > 0.0
    # text tower never touched, so it accumulates no grad
    assert all(p.grad is None for p in t.model.text_encoder.parameters())


# -- optimization -------------------------------------------------------------

def test_loss_decreases_on_small_run():
    t = make_trainer(enable_clip=False, enable_ssl=False, total_samples=96,
                     batch_size=4, batch_rec=4, lr_peak=3e-3, warmup_frac=0.0,
                     augment=False)
    first = t.train_step().total
    last = [t.train_step().total for _ in range(t.total_steps - 1)][-1]
    assert last < first


def test_flops_ledger_matches_analytic_rate():
    t = make_trainer()
    per = step_flops(t.cfg)
    assert per > 0
    for _ in range(3):
        rep = t.train_step()
    assert t.state.flops_cum == 3 * per
    assert rep.flops_cum == 3 * per


def test_flops_budget_overrides_samples():
    per = step_flops(TrainConfig.from_dict(tiny_train_dict()))
    t = make_trainer(total_flops=int(3.5 * per))
    assert t.total_steps == 3
    t2 = make_trainer(total_flops=0, total_samples=16, batch_size=4,
                      batch_ssl=2, batch_rec=2)
    assert t2.total_steps == 4


def test_step_flops_drops_disabled_terms():
    full = step_flops(TrainConfig.from_dict(tiny_train_dict()))
    rec = step_flops(TrainConfig.from_dict(
        tiny_train_dict(enable_clip=False, enable_ssl=False)))
    no_rec = step_flops(TrainConfig.from_dict(tiny_train_dict(enable_rec=False)))
    assert 0 < rec < full
    assert rec + no_rec == full


def test_teacher_follows_student_at_zero_momentum():
    t = make_trainer(ema_start=0.0, ema_end=0.0)
    t.train_step()
    for pt, ps in zip(t.teacher.vision_encoder.parameters(),
                      t.model.vision_encoder.parameters()):
        assert torch.equal(pt, ps)
    for pt, ps in zip(t.teacher.dino_head.parameters(),
                      t.model.dino_head.parameters()):
        assert torch.equal(pt, ps)


def test_teacher_frozen_at_unit_momentum():
    t = make_trainer(ema_start=1.0, ema_end=1.0)
    before = module_hash(t.teacher)
    t.train_step()
    t.train_step()
    assert module_hash(t.teacher) == before
    assert module_hash(t.model) != before


# -- stage 2 ------------------------------------------------------------------

def test_stage2_keeps_encoder_frozen():
    t = make_trainer(stage="gan_finetune", total_samples=16, batch_rec=4)
    enc_before = module_hash(t.model.vision_encoder)
    dec_before = module_hash(t.model.pixel_decoder)
    for _ in range(4):
        rep = t.train_step()
        for name, p in t.model.named_parameters():
            if not name.startswith("pixel_decoder"):
                assert p.grad is None or float(p.grad.abs().max()) == 0.0, name
    assert module_hash(t.model.vision_encoder) == enc_before
    assert module_hash(t.model.pixel_decoder) != dec_before
    assert rep.gan_d > 0.0
    assert rep.mim == rep.dino == rep.clip == 0.0


def test_stage2_discriminator_learns_separation():
    t = make_trainer(stage="gan_finetune", total_samples=4096, batch_size=8,
                     batch_rec=8,
                     dataset={"kind": "synth", "seed": 3, "n": 32,
                              "num_classes": 4, "image_size": 16})
    for _ in range(30):
        t.train_step()
    batch, _ = t.build_batch(999)
    x = batch["images"]
    with torch.no_grad():
        x_rec = t.model.decode(t.model.encode(x).values)
        d_real = float(t.disc(x).mean())
        d_fake = float(t.disc(x_rec).mean())
    assert d_real > d_fake


# -- persistence --------------------------------------------------------------

def test_save_restore_roundtrip_bitwise(tmp_path):
    t = make_trainer()
    for _ in range(2):
        t.train_step()
    path = str(tmp_path / "ckpt")
    t.save(path)

    t2 = make_trainer()
    t2.restore(path)
    assert module_hash(t2.model) == module_hash(t.model)
    assert module_hash(t2.teacher) == module_hash(t.teacher)
    assert torch.equal(t2.dino_state.center, t.dino_state.center)
    assert t2.state.step == t.state.step
    assert t2.state.flops_cum == t.state.flops_cum
    s1, s2 = t.opt.state_dict()["state"], t2.opt.state_dict()["state"]
    assert set(s1) == set(s2)
    for pid in s1:
        for k in s1[pid]:
            a, b = s1[pid][k], s2[pid][k]
            assert torch.equal(a, b) if torch.is_tensor(a) else a == b


def test_restore_rejects_config_mismatch(tmp_path):
    t = make_trainer()
    path = str(tmp_path / "ckpt")
    t.save(path)
    other = make_trainer(lr_peak=5e-4)
    with pytest.raises(ValueError, match="different train config"):
        other.restore(path)


def test_resume_is_bitwise_identical(tmp_path):
    full = make_trainer(total_samples=24, batch_size=4, batch_ssl=2, batch_rec=2)
    mid = str(tmp_path / "mid")
    for _ in range(3):
        full.train_step()
    full.save(mid)
    for _ in range(3):
        full.train_step()

    resumed = make_trainer(total_samples=24, batch_size=4, batch_ssl=2,
                           batch_rec=2)
    resumed.restore(mid)
    for _ in range(3):
        resumed.train_step()

    assert module_hash(resumed.model) == module_hash(full.model)
    assert module_hash(resumed.teacher) == module_hash(full.teacher)
    assert resumed.last_report.total == full.last_report.total
    assert resumed.state.flops_cum == full.state.flops_cum


def test_run_writes_metrics_and_final_checkpoint(tmp_path):
    out = str(tmp_path / "run")
    cfg = TrainConfig.from_dict(tiny_train_dict(
        total_samples=12, batch_size=4, batch_ssl=2, batch_rec=2))
    Trainer(cfg, out_dir=out).run()
    model, manifest = load_tokenizer(f"{out}/final")
    assert manifest["step"] == 3
    assert model.training is False
    assert all(not p.requires_grad for p in model.parameters())
    lines = open(f"{out}/metrics.jsonl").read().strip().splitlines()
    assert len(lines) == 3


def test_nonfinite_loss_aborts_with_snapshot(tmp_path):
    out = str(tmp_path / "run")
    t = make_trainer(out_dir=out, enable_clip=False, enable_ssl=False)
    with torch.no_grad():
        next(t.model.pixel_decoder.parameters()).fill_(math.nan)
    with pytest.raises(NonFiniteLossError) as ei:
        t.train_step()
    snap = ei.value.snapshot_path
    assert snap is not None
    model, manifest = load_tokenizer(snap)
    assert manifest["abort"]["step"] == 0


def test_nonfinite_loss_without_out_dir_still_raises():
    t = make_trainer(enable_clip=False, enable_ssl=False)
    with torch.no_grad():
        next(t.model.pixel_decoder.parameters()).fill_(math.inf)
    with pytest.raises(NonFiniteLossError) as ei:
        t.train_step()
    assert ei.value.snapshot_path is None
