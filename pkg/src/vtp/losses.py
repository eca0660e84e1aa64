"""Training objectives: reconstruction (L1 + perceptual), masked-token and
self-distillation cross-entropies over prototype logits, symmetric image-text
InfoNCE, hinge adversarial pair, and the weighted total."""

import json
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class LossWeights:
    lambda_rec: float = 0.1
    lambda_ssl: float = 1.0
    lambda_clip: float = 1.0

    def validate(self):
        for name, v in [("lambda_rec", self.lambda_rec), ("lambda_ssl", self.lambda_ssl),
                        ("lambda_clip", self.lambda_clip)]:
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        return self


@dataclass
class LossReport:
    """Per-step scalars plus how many samples fed each term. Serializes to one
    JSONL line; counts stay out of the line by contract."""

    step: int = 0
    l1: float = 0.0
    perceptual: float = 0.0
    mim: float = 0.0
    dino: float = 0.0
    clip: float = 0.0
    gan_g: float = 0.0
    gan_d: float = 0.0
    total: float = 0.0
    n_clip: int = 0
    n_ssl: int = 0
    n_rec: int = 0
    flops_cum: int = 0

    def to_jsonl(self) -> str:
        return json.dumps({
            "step": self.step, "l1": self.l1, "perceptual": self.perceptual,
            "mim": self.mim, "dino": self.dino, "clip": self.clip,
            "gan_g": self.gan_g, "gan_d": self.gan_d, "total": self.total,
            "flops_cum": self.flops_cum,
        })


# DINOv2-style defaults; the teacher must never be softer than the student.
@dataclass
class DinoState:
    center: torch.Tensor = field(default_factory=lambda: torch.zeros(1024))
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    center_momentum: float = 0.9

    def validate(self):
        if self.teacher_temp <= 0 or self.student_temp <= 0:
            raise ValueError("temperatures must be positive")
        if self.teacher_temp > self.student_temp:
            raise ValueError(
                f"teacher_temp {self.teacher_temp} must be <= student_temp {self.student_temp}"
            )
        if not (0.0 <= self.center_momentum <= 1.0):
            raise ValueError("center_momentum must lie in [0, 1]")
        if not torch.isfinite(self.center).all():
            raise ValueError("center contains non-finite values")
        return self


class PerceptualNet(nn.Module):
    """Frozen 4-layer strided conv pyramid with fixed-seed random weights; the
    perceptual distance is the mean MSE between activations tapped at two depths.
    Callable as net(a, b) -> scalar, so any pretrained substitute with the same
    call shape plugs in."""

    def __init__(self, channels: int = 32, seed: int = 7):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        chans = [3, channels, channels * 2, channels * 2, channels * 4]
        self.convs = nn.ModuleList()
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            conv = nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                w = torch.randn(conv.weight.shape, generator=g)
                conv.weight.copy_(w * (2.0 / (c_in * 9)) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
        self.taps = (1, 3)  # pyramid levels fed to the distance
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list:
        feats = []
        for i, conv in enumerate(self.convs):
            x = torch.tanh(conv(x))
            if i in self.taps:
                feats.append(x)
        return feats

    def macs(self, image_size: int) -> int:
        """Multiply-accumulates for one image through the pyramid."""
        total, s = 0, image_size
        for conv in self.convs:
            s = (s + 1) // 2
            total += s * s * conv.in_channels * conv.out_channels * 9
        return total

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa, fb = self.features(a), self.features(b)
        return torch.stack([F.mse_loss(u, v) for u, v in zip(fa, fb)]).mean()


def rec_loss(x: torch.Tensor, x_rec: torch.Tensor, perceptual_net) -> tuple:
    """Mean absolute error plus pyramid-feature MSE. Returns (l1, perceptual)."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    l1 = (x - x_rec).abs().mean()
    return l1, perceptual_net(x, x_rec)


def _teacher_probs(logits: torch.Tensor, state: DinoState) -> torch.Tensor:
    return F.softmax((logits.detach() - state.center.to(logits.dtype)) / state.teacher_temp, dim=-1)


def mim_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
             mask: torch.Tensor, state: DinoState) -> torch.Tensor:
    """Cross-entropy from the centered, sharpened, stop-gradient teacher to the
    student, averaged over masked positions only (per image, then over batch).

    student_logits/teacher_logits: [B, T, K] prototype logits where the student
    saw mask embeddings at masked positions and the teacher saw the full view.
    mask: [B, T] bool, True = masked.
    """
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student/teacher logit shapes differ")
    if mask.shape != student_logits.shape[:2]:
        raise ValueError("mask shape does not match token grid")
    counts = mask.sum(dim=1)
    if (counts == 0).any():
        raise ValueError("mim_loss requires >=1 masked token per image")
    p = _teacher_probs(teacher_logits, state)
    logq = F.log_softmax(student_logits / state.student_temp, dim=-1)
    ce = -(p * logq).sum(dim=-1)
    per_image = (ce * mask).sum(dim=1) / counts
    return per_image.mean()


def dino_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
              state: DinoState) -> torch.Tensor:
    """Mean cross-entropy over (teacher global view, student view) pairs,
    skipping same-view pairs; mutates state.center by EMA toward the batch mean
    of teacher logits.

    student_logits: [V_s, B, K] pooled logits, global views first.
    teacher_logits: [V_t, B, K] pooled logits of the global views (V_t >= 2).
    """
    if teacher_logits.dim() != 3 or teacher_logits.shape[0] < 2:
        raise ValueError("dino_loss requires >=2 teacher global views")
    if student_logits.shape[0] < teacher_logits.shape[0]:
        raise ValueError("student must include every global view")
    p = _teacher_probs(teacher_logits, state)
    logq = F.log_softmax(student_logits / state.student_temp, dim=-1)
    terms = []
    for i in range(teacher_logits.shape[0]):
        for j in range(student_logits.shape[0]):
            if j == i:
                continue
            terms.append(-(p[i] * logq[j]).sum(dim=-1).mean())
    loss = torch.stack(terms).mean()
    batch_mean = teacher_logits.detach().reshape(-1, teacher_logits.shape[-1]).mean(dim=0)
    state.center = state.center_momentum * state.center.to(batch_mean.dtype) \
        + (1.0 - state.center_momentum) * batch_mean
    return loss


def clip_loss(image_embeds: torch.Tensor, text_embeds: torch.Tensor,
              temperature) -> torch.Tensor:
    """Symmetric InfoNCE over the pairwise similarity matrix; row i of each
    input is a matched pair. Embeddings are expected unit-norm."""
    if image_embeds.shape != text_embeds.shape:
        raise ValueError("image/text embedding shapes differ")
    tau = temperature if torch.is_tensor(temperature) else torch.tensor(float(temperature))
    if float(tau.detach()) <= 0:
        raise ValueError(f"temperature must be positive, got {float(tau.detach())}")
    logits = image_embeds @ text_embeds.t() / tau
    targets = torch.arange(logits.shape[0], device=logits.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))


class PatchDiscriminator(nn.Module):
    """4-layer strided conv stack ending in a 1-channel patch logit map."""

    def __init__(self, base: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        chans = [3, base, base * 2, base * 4]
        layers = []
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.GELU()]
        layers.append(nn.Conv2d(chans[-1], 1, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def macs(self, image_size: int) -> int:
        total, s = 0, image_size
        for layer in self.net:
            if not isinstance(layer, nn.Conv2d):
                continue
            if layer.stride[0] == 2:
                s = s // 2
            k = layer.kernel_size[0]
            total += s * s * layer.in_channels * layer.out_channels * k * k
        return total


def gan_losses(x: torch.Tensor, x_rec: torch.Tensor, discriminator) -> tuple:
    """Hinge pair. gan_d sees x_rec detached; gan_g backs through x_rec only."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    d_real = discriminator(x)
    d_fake = discriminator(x_rec.detach())
    gan_d = F.relu(1.0 - d_real).mean() + F.relu(1.0 + d_fake).mean()
    gan_g = -discriminator(x_rec).mean()
    return gan_g, gan_d


def total_loss(weights: LossWeights, rec=None, ssl=None, clip=None) -> torch.Tensor:
    """Weighted sum; a term whose weight is zero must not have been computed, so
    None is the only valid value there and a missing term under a positive
    weight is an error."""
    weights.validate()
    total = torch.tensor(0.0)
    for w, term, name in [(weights.lambda_rec, rec, "rec"),
                          (weights.lambda_ssl, ssl, "ssl"),
                          (weights.lambda_clip, clip, "clip")]:
        if w == 0:
            if term is not None:
                raise ValueError(
                    f"{name} has weight 0 but a computed term; disabled branches must not run")
            continue
        if term is None:
            raise ValueError(f"{name} has weight {w} but no computed term")
        total = total + w * term
    return total
