"""Two-stage training driver. Stage 1 jointly optimizes the weighted total over
per-objective sub-batches with an EMA teacher; stage 2 fine-tunes the pixel
decoder adversarially with everything else frozen. All randomness derives from
(seed, step), which is what makes interrupted runs resume bitwise-identically."""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint, state_dict_tensors
from .data import (AugConfig, build_vocab, dataset_from_manifest, grammar_corpus,
                   make_views, plan_batch, tokenize_batch)
from .losses import (DinoState, LossReport, LossWeights, PatchDiscriminator,
                     PerceptualNet, clip_loss, dino_loss, mim_loss, rec_loss,
                     total_loss)
from .model import (EmaTeacher, ModelConfig, build_model, decoder_macs,
                    dino_logits, ema_update, encoder_macs, head_macs, text_macs)

STAGES = ("pretrain", "gan_finetune")


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    enable_clip: bool = True
    enable_ssl: bool = True
    enable_rec: bool = True
    batch_size: int = 64        # B; the contrastive term always sees all of it
    batch_ssl: int = 16
    batch_rec: int = 8
    total_samples: int = 65536  # budget in batch-level samples; steps = budget // B
    total_flops: int = 0        # if > 0, overrides total_samples as the budget
    lr_peak: float = 1e-3
    lr_floor: float = 0.0
    warmup_frac: float = 0.05
    weight_decay: float = 0.04
    ema_start: float = 0.996
    ema_end: float = 1.0
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    temp_warmup_frac: float = 0.3
    student_temp: float = 0.1
    center_momentum: float = 0.9
    mask_ratio: float = 0.3
    local_views: int = 4
    augment: bool = True
    dataset: dict = field(default_factory=lambda: {
        "kind": "synth", "seed": 0, "n": 4096, "num_classes": 16, "image_size": 64})
    seed: int = 0
    stage: str = "pretrain"
    eval_every: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    disc_base: int = 32
    disc_lr: float = 1e-3

    def effective_weights(self) -> LossWeights:
        return LossWeights(
            lambda_rec=self.weights.lambda_rec if self.enable_rec else 0.0,
            lambda_ssl=self.weights.lambda_ssl if self.enable_ssl else 0.0,
            lambda_clip=self.weights.lambda_clip if self.enable_clip else 0.0,
        )

    def validate(self):
        self.model.validate()
        self.weights.validate()
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.total_samples <= 0 and self.total_flops <= 0:
            raise ValueError("a positive samples or FLOPs budget is required")
        if self.batch_ssl > self.batch_size or self.batch_rec > self.batch_size:
            raise ValueError("sub-batch sizes cannot exceed batch_size")
        if min(self.batch_size, self.batch_ssl, self.batch_rec) <= 0:
            raise ValueError("batch sizes must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")
        if self.lr_peak <= 0 or self.lr_floor < 0 or self.lr_floor > self.lr_peak:
            raise ValueError("need 0 <= lr_floor <= lr_peak and lr_peak > 0")
        if self.ema_start > self.ema_end or not (0 <= self.ema_start <= 1 and self.ema_end <= 1):
            raise ValueError("ema schedule must be non-decreasing within [0, 1]")
        if self.teacher_temp_start > self.teacher_temp_end:
            raise ValueError("teacher temp schedule must be non-decreasing")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        w = self.effective_weights()
        if self.stage == "pretrain" and w.lambda_rec == w.lambda_ssl == w.lambda_clip == 0:
            raise ValueError("no objective enabled")
        ds_size = self.dataset.get("image_size")
        if ds_size is not None and ds_size != self.model.image_size:
            raise ValueError(
                f"dataset image_size {ds_size} != model image_size {self.model.image_size}")
        if w.lambda_ssl > 0 and self.local_views > 0 \
                and (self.model.image_size // 2) % self.model.patch_size != 0:
            raise ValueError("local view size (image_size // 2) not divisible by patch size")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelConfig(**d.get("model", {}))
        d["weights"] = LossWeights(**d.get("weights", {}))
        if "dataset" in d:
            ds = dict(d["dataset"])
            if ds.get("kind", "synth") == "synth":
                base = {"kind": "synth", "seed": 0, "n": 4096, "num_classes": 16,
                        "image_size": 64}
            else:
                base = {"kind": "folder", "image_size": 64}
            base.update(ds)
            d["dataset"] = base
        return cls(**d)


@dataclass
class RunState:
    step: int = 0
    samples_seen: int = 0
    flops_cum: int = 0


def schedule(name: str, step: int, total: int, cfg: TrainConfig) -> float:
    """Scheduled scalar at `step` of a `total`-step run. lr: linear warmup to
    peak then cosine to floor; ema: cosine start -> end; teacher_temp: linear
    warmup then constant at end."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if name == "lr":
        warmup = round(cfg.warmup_frac * total)
        if step < warmup:
            return cfg.lr_peak * step / warmup
        if total == warmup:
            return cfg.lr_peak
        u = (step - warmup) / (total - warmup)
        return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * u))
    if name == "ema":
        u = step / total if total else 1.0
        return cfg.ema_end + (cfg.ema_start - cfg.ema_end) * 0.5 * (1.0 + math.cos(math.pi * u))
    if name == "teacher_temp":
        warm = round(cfg.temp_warmup_frac * total)
        if warm == 0 or step >= warm:
            return cfg.teacher_temp_end
        return cfg.teacher_temp_start \
            + (cfg.teacher_temp_end - cfg.teacher_temp_start) * step / warm
    raise ValueError(f"unknown schedule {name!r}")


def step_flops(cfg: TrainConfig) -> int:
    """Analytic FLOPs charged per training step (2*MACs; gradient-bearing
    forwards count x3, no-grad forwards x1). The run ledger is exactly this
    value times the number of steps."""
    mc = cfg.model
    S = mc.image_size
    w = cfg.effective_weights()
    macs = 0
    if cfg.stage == "gan_finetune":
        perc = PerceptualNet().macs(S)
        disc = PatchDiscriminator(base=cfg.disc_base).macs(S)
        macs += cfg.batch_rec * (encoder_macs(mc, S)            # frozen encode
                                 + 3 * decoder_macs(mc, S)
                                 + 4 * perc                      # target x1 + rec x3
                                 + 9 * disc)                     # real, fake, g-pass
        return 2 * macs
    if w.lambda_rec > 0:
        perc = PerceptualNet().macs(S)
        macs += cfg.batch_rec * (3 * (encoder_macs(mc, S) + decoder_macs(mc, S)) + 4 * perc)
    if w.lambda_clip > 0:
        macs += cfg.batch_size * 3 * (encoder_macs(mc, S) + text_macs(mc, mc.text_max_len))
    if w.lambda_ssl > 0:
        local = encoder_macs(mc, S // 2) if cfg.local_views > 0 else 0
        # masked forward + two clean global forwards + local forwards
        student = (1 + 2) * encoder_macs(mc, S) + cfg.local_views * local
        student += (3 + cfg.local_views) * head_macs(mc, S)
        teacher = 2 * encoder_macs(mc, S) + 3 * head_macs(mc, S)
        macs += cfg.batch_ssl * (3 * student + teacher)
    return 2 * macs


def _flat_opt_state(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    out = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v):
                out[f"{pid}.{k}"] = v
    return out


def _unflatten_opt_state(tensors: dict, param_groups: list) -> dict:
    state = {}
    for key, t in tensors.items():
        pid, k = key.split(".", 1)
        state.setdefault(int(pid), {})[k] = t
    return {"state": state, "param_groups": param_groups}


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir: str | None = None):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = out_dir
        self.model = build_model(cfg.model, cfg.seed)
        self.teacher = EmaTeacher(self.model, momentum=cfg.ema_start)
        self.perceptual = PerceptualNet()
        self.dino_state = DinoState(
            center=torch.zeros(cfg.model.dino_prototypes),
            teacher_temp=cfg.teacher_temp_start, student_temp=cfg.student_temp,
            center_momentum=cfg.center_momentum).validate()
        self.dataset = dataset_from_manifest(cfg.dataset)
        if cfg.dataset.get("kind") == "synth":
            corpus = grammar_corpus(cfg.dataset["num_classes"])
        else:
            corpus = [self.dataset[i].caption for i in range(len(self.dataset))]
        self.vocab = build_vocab(corpus, max_size=cfg.model.vocab_size)
        self.state = RunState()
        self.last_report = None
        self._metrics_fh = None

        if cfg.stage == "gan_finetune":
            # decoder is the only trainable part of the tokenizer in stage 2
            for name, p in self.model.named_parameters():
                p.requires_grad_(name.startswith("pixel_decoder"))
            self.disc = PatchDiscriminator(base=cfg.disc_base, seed=cfg.seed + 1)
            self.opt = torch.optim.AdamW(self.model.pixel_decoder.parameters(),
                                         lr=cfg.lr_peak, betas=(0.9, 0.95),
                                         weight_decay=cfg.weight_decay)
            self.opt_d = torch.optim.AdamW(self.disc.parameters(), lr=cfg.disc_lr,
                                           betas=(0.9, 0.95), weight_decay=0.0)
        else:
            self.disc = None
            self.opt_d = None
            self.opt = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr_peak,
                                         betas=(0.9, 0.95),
                                         weight_decay=cfg.weight_decay)

        self._per_step_flops = step_flops(cfg)
        if cfg.total_flops > 0:
            self.total_steps = max(1, cfg.total_flops // self._per_step_flops)
        else:
            self.total_steps = max(1, cfg.total_samples // cfg.batch_size)

        mc = cfg.model
        self.aug = AugConfig(
            global_size=mc.image_size, local_size=mc.image_size // 2,
            local_views=cfg.local_views, mask_ratio=cfg.mask_ratio,
            token_grid=mc.token_grid, enabled=cfg.augment)

    # -- data ---------------------------------------------------------------

    def build_batch(self, step: int):
        """Batch and plan for `step`, a pure function of (cfg.seed, step)."""
        rng = np.random.default_rng([self.cfg.seed, step])
        n = len(self.dataset)
        B = self.cfg.batch_rec if self.cfg.stage == "gan_finetune" else self.cfg.batch_size
        idx = rng.choice(n, size=B, replace=n < B)
        samples = [self.dataset[int(i)] for i in idx]
        batch = {
            "images": torch.stack([s.image for s in samples]),
            "captions": [s.caption for s in samples],
            "class_ids": torch.tensor([s.class_id for s in samples]),
        }
        if self.cfg.stage == "gan_finetune":
            return batch, None
        plan = plan_batch(B, self.cfg.batch_ssl, self.cfg.batch_rec, rng)
        w = self.cfg.effective_weights()
        if w.lambda_clip > 0:
            batch["token_ids"] = tokenize_batch(batch["captions"], self.vocab,
                                                self.cfg.model.text_max_len)
        if w.lambda_ssl > 0:
            batch["views"] = [make_views(samples[int(i)], self.aug, rng)
                              for i in plan.ssl_indices]
        return batch, plan

    # -- steps --------------------------------------------------------------

    def _ssl_terms(self, views):
        model, teacher = self.model, self.teacher
        from_b = self.cfg.model.heads_from_bottleneck
        g0 = torch.stack([v.global_views[0] for v in views])
        g1 = torch.stack([v.global_views[1] for v in views])
        masks = torch.stack([v.mim_mask.reshape(-1) for v in views])

        # masked-token branch: student sees mask embeddings, teacher the full crop
        wt, zt = model.vision_encoder(g0, mask=masks)
        stu_mim = dino_logits(model.branch_tokens(wt, zt), model.dino_head)
        with torch.no_grad():
            t0 = teacher.forward_branch(g0, from_b)
            t1 = teacher.forward_branch(g1, from_b)
            tea_mim = dino_logits(t0, teacher.dino_head)
            tea_pooled = torch.stack([
                dino_logits(t0.mean(dim=1), teacher.dino_head),
                dino_logits(t1.mean(dim=1), teacher.dino_head),
            ])
        mim = mim_loss(stu_mim, tea_mim, masks, self.dino_state)

        # self-distillation branch: clean student forwards on every view
        student_inputs = [g0, g1]
        if views[0].local_views.shape[0] > 0:
            locals_ = torch.stack([v.local_views for v in views])
            student_inputs += [locals_[:, j] for j in range(locals_.shape[1])]
        stu_pooled = []
        for inp in student_inputs:
            w_tok, z_tok = model.vision_encoder(inp)
            pooled = model.branch_tokens(w_tok, z_tok).mean(dim=1)
            stu_pooled.append(dino_logits(pooled, model.dino_head))
        dino = dino_loss(torch.stack(stu_pooled), tea_pooled, self.dino_state)
        return mim, dino

    def pretrain_step(self, batch: dict, plan) -> LossReport:
        cfg = self.cfg
        step = self.state.step
        self.dino_state.teacher_temp = schedule("teacher_temp", step, self.total_steps, cfg)
        w = cfg.effective_weights()
        rep = LossReport(step=step)
        rec_term = ssl_term = clip_term = None

        if w.lambda_rec > 0:
            x = batch["images"][plan.rec_indices]
            x_rec = self.model.decode(self.model.encode(x))
            l1, perc = rec_loss(x, x_rec, self.perceptual)
            rec_term = l1 + perc
            rep.l1, rep.perceptual = float(l1.detach()), float(perc.detach())
            rep.n_rec = len(plan.rec_indices)
        if w.lambda_ssl > 0:
            mim, dino = self._ssl_terms(batch["views"])
            ssl_term = mim + dino
            rep.mim, rep.dino = float(mim.detach()), float(dino.detach())
            rep.n_ssl = len(plan.ssl_indices)
        if w.lambda_clip > 0:
            img = self.model.embed_image_clip(batch["images"])
            txt = self.model.embed_text_clip(batch["token_ids"])
            clip = clip_loss(img, txt, self.model.temperature)
            clip_term = clip
            rep.clip, rep.n_clip = float(clip.detach()), batch["images"].shape[0]

        total = total_loss(w, rec=rec_term, ssl=ssl_term, clip=clip_term)
        self._abort_if_nonfinite(total, rep)
        lr = schedule("lr", step, self.total_steps, cfg)
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        ema_update(self.teacher, self.model, schedule("ema", step, self.total_steps, cfg))

        self.state.step += 1
        self.state.samples_seen += batch["images"].shape[0]
        self.state.flops_cum += self._per_step_flops
        rep.total = float(total.detach())
        rep.flops_cum = self.state.flops_cum
        self.last_report = rep
        return rep

    def gan_finetune_step(self, batch: dict) -> LossReport:
        cfg = self.cfg
        step = self.state.step
        rep = LossReport(step=step, n_rec=batch["images"].shape[0])
        x = batch["images"]
        with torch.no_grad():
            z = self.model.encode(x).values
        x_rec = self.model.decode(z)

        # discriminator phase: hinge on (real, detached fake)
        d_real = self.disc(x)
        d_fake = self.disc(x_rec.detach())
        gan_d = torch.relu(1.0 - d_real).mean() + torch.relu(1.0 + d_fake).mean()
        self._abort_if_nonfinite(gan_d, rep)
        self.opt_d.zero_grad(set_to_none=True)
        gan_d.backward()
        self.opt_d.step()

        # generator phase: fresh pass through the updated discriminator,
        # reconstruction terms stay active alongside the adversarial push
        gan_g = -self.disc(x_rec).mean()
        l1, perc = rec_loss(x, x_rec, self.perceptual)
        g_total = l1 + perc + gan_g
        self._abort_if_nonfinite(g_total, rep)
        self.opt.zero_grad(set_to_none=True)
        g_total.backward()
        self.opt.step()

        self.state.step += 1
        self.state.samples_seen += x.shape[0]
        self.state.flops_cum += self._per_step_flops
        rep.l1, rep.perceptual = float(l1.detach()), float(perc.detach())
        rep.gan_g, rep.gan_d = float(gan_g.detach()), float(gan_d.detach())
        rep.total = float(g_total.detach())
        rep.flops_cum = self.state.flops_cum
        self.last_report = rep
        return rep

    def train_step(self) -> LossReport:
        batch, plan = self.build_batch(self.state.step)
        if self.cfg.stage == "gan_finetune":
            return self.gan_finetune_step(batch)
        return self.pretrain_step(batch, plan)

    def _abort_if_nonfinite(self, loss, rep: LossReport):
        if torch.isfinite(loss).all():
            return
        snap = None
        if self.out_dir:
            snap = os.path.join(self.out_dir, f"abort-step{self.state.step}")
            self.save(snap, extra={"abort": {"step": self.state.step,
                                             "report": json.loads(rep.to_jsonl())}})
        raise NonFiniteLossError(
            f"non-finite loss at step {self.state.step}"
            + (f"; diagnostic snapshot at {snap}" if snap else ""),
            snapshot_path=snap)

    # -- persistence ----------------------------------------------------------

    def save(self, path: str, extra: dict | None = None):
        manifest = {
            "kind": "vtp-checkpoint",
            "stage": self.cfg.stage,
            "step": self.state.step,
            "samples_seen": self.state.samples_seen,
            "flops_cum": str(self.state.flops_cum),
            "total_steps": self.total_steps,
            "train_config": self.cfg.to_dict(),
            "vocab": self.vocab.word_to_id,
            "optimizer_param_groups": _jsonable_param_groups(self.opt),
            "metrics": json.loads(self.last_report.to_jsonl()) if self.last_report else None,
        }
        if extra:
            manifest.update(extra)
        networks = {
            "model": state_dict_tensors(self.model),
            "teacher": state_dict_tensors(self.teacher),
            "optimizer": _flat_opt_state(self.opt),
            "extras": {"dino.center": self.dino_state.center,
                       "rng.torch": torch.get_rng_state()},
        }
        if self.disc is not None:
            networks["disc"] = state_dict_tensors(self.disc)
            networks["opt_d"] = _flat_opt_state(self.opt_d)
            manifest["opt_d_param_groups"] = _jsonable_param_groups(self.opt_d)
        save_checkpoint(path, manifest, networks)

    def restore(self, path: str):
        manifest, nets = load_checkpoint(path)
        saved_cfg = TrainConfig.from_dict(manifest["train_config"])
        if saved_cfg.to_dict() != self.cfg.to_dict():
            raise ValueError("checkpoint was produced by a different train config")
        self.model.load_state_dict(nets["model"])
        self.teacher.load_state_dict(nets["teacher"])
        self.opt.load_state_dict(_unflatten_opt_state(
            nets["optimizer"], manifest["optimizer_param_groups"]))
        if self.disc is not None and "disc" in nets:
            self.disc.load_state_dict(nets["disc"])
            self.opt_d.load_state_dict(_unflatten_opt_state(
                nets["opt_d"], manifest["opt_d_param_groups"]))
        self.dino_state.center = nets["extras"]["dino.center"]
        torch.set_rng_state(nets["extras"]["rng.torch"].to(torch.uint8))
        self.state = RunState(step=manifest["step"],
                              samples_seen=manifest["samples_seen"],
                              flops_cum=int(manifest["flops_cum"]))
        metrics = manifest.get("metrics")
        if metrics:
            self.last_report = LossReport(**{k: metrics[k] for k in (
                "step", "l1", "perceptual", "mim", "dino", "clip",
                "gan_g", "gan_d", "total", "flops_cum")})
        return self

    def load_weights(self, path: str):
        """Initialize model (and teacher when present) from a prior checkpoint,
        keeping fresh optimizer state; the stage-2 entry point."""
        manifest, nets = load_checkpoint(path)
        self.model.load_state_dict(nets["model"])
        if "teacher" in nets:
            self.teacher.load_state_dict(nets["teacher"])
        return self

    # -- loop -----------------------------------------------------------------

    def run(self, resume: str | None = None, eval_fn=None, metrics_path: str | None = None):
        if resume:
            self.restore(resume)
        fh = None
        if metrics_path or self.out_dir:
            mp = metrics_path or os.path.join(self.out_dir, "metrics.jsonl")
            os.makedirs(os.path.dirname(os.path.abspath(mp)), exist_ok=True)
            fh = open(mp, "a")
        try:
            while self.state.step < self.total_steps:
                rep = self.train_step()
                if fh and self.cfg.log_every and rep.step % self.cfg.log_every == 0:
                    fh.write(rep.to_jsonl() + "\n")
                    fh.flush()
                if eval_fn and self.cfg.eval_every \
                        and self.state.step % self.cfg.eval_every == 0:
                    eval_fn(self)
                if self.out_dir and self.cfg.checkpoint_every \
                        and self.state.step % self.cfg.checkpoint_every == 0 \
                        and self.state.step < self.total_steps:
                    self.save(os.path.join(self.out_dir, f"step{self.state.step}"))
        finally:
            if fh:
                fh.close()
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "final"))
        return self.last_report


def _jsonable_param_groups(opt: torch.optim.Optimizer) -> list:
    groups = []
    for g in opt.state_dict()["param_groups"]:
        groups.append({k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()})
    return groups


def load_tokenizer(path: str):
    """Rebuild a frozen TokenizerModel (+ its train config) from a checkpoint."""
    manifest, nets = load_checkpoint(path)
    cfg = TrainConfig.from_dict(manifest["train_config"])
    model = build_model(cfg.model, cfg.seed)
    model.load_state_dict(nets["model"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, manifest
