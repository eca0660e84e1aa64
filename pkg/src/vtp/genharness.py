"""Fixed-protocol generative scoring: a small class-conditional diffusion
transformer trained with a rectified-flow objective on frozen, standardized
tokenizer latents, then sampled and decoded for a Fréchet-proxy score. Every
tokenizer comparison must run under an identical (config + seed) harness hash."""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import module_hash
from .evaluation import frechet, latent_stats
from .model import Block, trunc_normal_


@dataclass
class DiTConfig:
    depth: int = 6
    width: int = 256
    heads: int = 4
    latent_dim: int = 16       # must equal the scored tokenizer's d
    grid: int = 4              # latent grid side; 1x1 patching, one token per cell
    num_classes: int = 16
    cfg_scale: float = 0.0     # the fixed protocol runs without guidance
    sampler_steps: int = 50
    train_steps: int = 600
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0

    def validate(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.cfg_scale != 0.0:
            raise ValueError("the fixed protocol runs without guidance (cfg_scale 0)")
        if min(self.depth, self.latent_dim, self.grid, self.num_classes,
               self.sampler_steps, self.train_steps, self.batch) < 1:
            raise ValueError("DiTConfig sizes must be positive")
        return self

    def sha(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class FlowState:
    """Linear interpolant between noise x0 and standardized latent x1."""
    t: torch.Tensor            # [B] in [0, 1]
    x0: torch.Tensor
    x1: torch.Tensor

    @property
    def x_t(self) -> torch.Tensor:
        t = self.t.reshape(-1, *([1] * (self.x0.dim() - 1)))
        return (1.0 - t) * self.x0 + t * self.x1

    @property
    def velocity(self) -> torch.Tensor:
        return self.x1 - self.x0


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of continuous t in [0,1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / max(half - 1, 1))
    ang = t.reshape(-1, 1) * freqs.reshape(1, -1) * 1000.0
    emb = torch.cat([ang.sin(), ang.cos()], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class DiT(nn.Module):
    """Latent-grid transformer velocity model: 1x1 patching, learned positions,
    time and class conditioning added token-wise."""

    def __init__(self, cfg: DiTConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        w = cfg.width
        self.in_proj = nn.Linear(cfg.latent_dim, w)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.grid * cfg.grid, w))
        self.t_mlp = nn.Sequential(nn.Linear(w, w), nn.GELU(), nn.Linear(w, w))
        self.y_embed = nn.Embedding(cfg.num_classes, w)
        self.blocks = nn.ModuleList([Block(w, cfg.heads) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(w)
        self.out_proj = nn.Linear(w, cfg.latent_dim)
        trunc_normal_(self.in_proj.weight)
        nn.init.zeros_(self.in_proj.bias)
        trunc_normal_(self.pos_embed)
        trunc_normal_(self.y_embed.weight)
        # zero-init output so the initial velocity field is exactly 0
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        B, d, h, w = x_t.shape
        if d != cfg.latent_dim or h != cfg.grid or w != cfg.grid:
            raise ValueError(
                f"latent [{d},{h},{w}] does not match harness [{cfg.latent_dim},{cfg.grid},{cfg.grid}]")
        if torch.is_tensor(t) and t.dim() == 0:
            t = t.expand(B)
        elif not torch.is_tensor(t):
            t = torch.full((B,), float(t), dtype=x_t.dtype)
        tok = self.in_proj(x_t.flatten(2).transpose(1, 2)) + self.pos_embed
        cond = self.t_mlp(timestep_embedding(t.to(x_t.dtype), cfg.width)) + self.y_embed(y)
        tok = tok + cond.unsqueeze(1)
        for blk in self.blocks:
            tok = blk(tok)
        v = self.out_proj(self.norm(tok))
        return v.transpose(1, 2).reshape(B, d, h, w)


def build_dit(cfg: DiTConfig) -> DiT:
    torch.manual_seed(cfg.seed)
    return DiT(cfg)


def rf_loss(dit, latents: torch.Tensor, labels: torch.Tensor, rng) -> torch.Tensor:
    """MSE between the predicted velocity v(x_t, t, y) and the straight-line
    target x1 - x0, with t ~ U[0,1] and x0 ~ N(0,I) drawn from rng."""
    B = latents.shape[0]
    t = torch.from_numpy(rng.uniform(0.0, 1.0, size=B)).to(latents.dtype)
    x0 = torch.from_numpy(rng.standard_normal(latents.shape)).to(latents.dtype)
    flow = FlowState(t=t, x0=x0, x1=latents)
    v = dit(flow.x_t, t, labels)
    return F.mse_loss(v, flow.velocity)


def check_standardized(latents: torch.Tensor, mean_tol: float = 0.1,
                       std_lo: float = 0.8, std_hi: float = 1.25):
    """Stats-drift guard on channel statistics of a standardized latent set."""
    flat = latents.permute(0, 2, 3, 1).reshape(-1, latents.shape[1]).double()
    mu = flat.mean(dim=0)
    sd = flat.std(dim=0)
    if mu.abs().max() >= mean_tol or sd.min() <= std_lo or sd.max() >= std_hi:
        raise ValueError(
            f"latents are not standardized: |mean| max {float(mu.abs().max()):.3f}, "
            f"std range [{float(sd.min()):.3f}, {float(sd.max()):.3f}]")


@torch.no_grad()
def sample(dit, labels: torch.Tensor, steps: int, rng, batch: int = 256) -> torch.Tensor:
    """Euler integration of the learned field from noise (t=0) to data (t=1)."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    cfg = dit.cfg
    out = []
    for i in range(0, labels.shape[0], batch):
        y = labels[i:i + batch]
        x = torch.from_numpy(rng.standard_normal(
            (y.shape[0], cfg.latent_dim, cfg.grid, cfg.grid))).float()
        for k in range(steps):
            t = torch.full((y.shape[0],), k / steps)
            x = x + dit(x, t, y) / steps
        out.append(x)
    return torch.cat(out)


def train_and_score(model, dataset, dit_cfg: DiTConfig, extractor,
                    n_score: int = 512, heldout_seed: int = 7700,
                    stats=None) -> dict:
    """Train the fixed DiT on the tokenizer's standardized latents, sample,
    decode, and score against held-out real images. Returns the gFID-proxy
    record with every hash needed for comparability auditing. `stats` lets a
    caller supply (mean, std) from a checkpoint manifest; the drift guard then
    verifies they still standardize this tokenizer's training latents."""
    mc = model.cfg
    if dit_cfg.latent_dim != mc.latent_dim or dit_cfg.grid != mc.token_grid:
        raise ValueError(
            f"harness expects latents [{dit_cfg.latent_dim},{dit_cfg.grid},{dit_cfg.grid}], "
            f"tokenizer produces [{mc.latent_dim},{mc.token_grid},{mc.token_grid}]")
    num_classes = getattr(dataset, "num_classes", dit_cfg.num_classes)
    if num_classes != dit_cfg.num_classes:
        raise ValueError(f"dataset has {num_classes} classes, harness {dit_cfg.num_classes}")

    n_stats = min(len(dataset), 1024)
    if stats is None:
        mean, std = latent_stats(model, dataset, n_images=n_stats)
    else:
        mean, std = torch.as_tensor(stats[0]).float(), torch.as_tensor(stats[1]).float()
    mean_b = mean.reshape(1, -1, 1, 1)
    std_b = std.reshape(1, -1, 1, 1)
    dit = build_dit(dit_cfg)
    opt = torch.optim.AdamW(dit.parameters(), lr=dit_cfg.lr, betas=(0.9, 0.95),
                            weight_decay=0.01)

    def encode_std(indices, chunk: int = 128):
        indices = list(indices)
        zs, ys = [], []
        for i in range(0, len(indices), chunk):
            samples = [dataset[int(j)] for j in indices[i:i + chunk]]
            imgs = torch.stack([s.image for s in samples])
            ys.append(torch.tensor([s.class_id for s in samples]))
            with torch.no_grad():
                zs.append(model.encode(imgs).values)
        return (torch.cat(zs) - mean_b) / std_b, torch.cat(ys)

    # the tokenizer is frozen, so every latent is encoded exactly once up front
    all_z, all_y = encode_std(range(len(dataset)))

    # drift guard over the stats sample itself: exact for fresh stats, fires
    # when supplied stats no longer match this tokenizer
    check_standardized(all_z[:n_stats])

    probe_rng = np.random.default_rng([dit_cfg.seed, 999983])
    probe_idx = probe_rng.choice(len(dataset), size=min(dit_cfg.batch * 2, len(dataset)),
                                 replace=False)
    probe_z, probe_y = all_z[probe_idx], all_y[probe_idx]
    with torch.no_grad():
        loss_init = float(rf_loss(dit, probe_z, probe_y,
                                  np.random.default_rng([dit_cfg.seed, 999984])))

    for step in range(dit_cfg.train_steps):
        rng = np.random.default_rng([dit_cfg.seed, step])
        idx = rng.choice(len(dataset), size=dit_cfg.batch, replace=len(dataset) < dit_cfg.batch)
        z, y = all_z[idx], all_y[idx]
        loss = rf_loss(dit, z, y, rng)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite rf loss at harness step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    dit.eval()
    with torch.no_grad():
        loss_final = float(rf_loss(dit, probe_z, probe_y,
                                   np.random.default_rng([dit_cfg.seed, 999984])))

    labels = torch.arange(n_score) % dit_cfg.num_classes
    lat = sample(dit, labels, dit_cfg.sampler_steps,
                 np.random.default_rng([dit_cfg.seed, 424242]))
    with torch.no_grad():
        decoded = []
        for i in range(0, n_score, 64):
            z = lat[i:i + 64] * std_b + mean_b
            decoded.append(model.decode(z))
        decoded = torch.cat(decoded)

    from .data import synth_dataset
    held = synth_dataset(heldout_seed, n_score, dit_cfg.num_classes, mc.image_size,
                         variant=getattr(dataset, "variant", "plain"))
    real = torch.stack([held[i].image for i in range(n_score)])
    score = frechet(extractor.extract(real), extractor.extract(decoded))
    return {
        "frechet_gen": score,
        "n_samples": n_score,
        "dit_sha": dit_cfg.sha(),
        "tokenizer_sha": module_hash(model),
        "extractor_sha": extractor.sha,
        "rf_loss_init": loss_init,
        "rf_loss_final": loss_final,
        "latent_mean": mean.tolist(),
        "latent_std": std.tolist(),
    }
