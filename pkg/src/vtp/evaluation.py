"""Three-axis evaluation: reconstruction quality (PSNR, Fréchet proxy over a
pinned feature extractor), understanding (linear probe on bottleneck features,
zero-shot via the contrastive branches), and latent statistics for the
generation harness. Absolute Fréchet values are proxies tied to the pinned
extractor, comparable only across runs sharing its hash."""

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import module_hash, read_archive, write_archive
from .data import ZEROSHOT_TEMPLATES, class_parts, synth_dataset, tokenize_batch

METRICS_VERSION = 1


@dataclass
class MetricsRecord:
    psnr_mean: float = 0.0
    frechet_rec: float = 0.0
    linprobe_acc: float = 0.0
    zeroshot_acc: float = 0.0
    frechet_gen: float | None = None
    latent_mean: list = field(default_factory=list)
    latent_std: list = field(default_factory=list)
    extractor_sha: str = ""
    dit_sha: str | None = None
    n_eval: int = 0
    metrics_version: int = METRICS_VERSION

    def validate(self):
        for name, acc in [("linprobe_acc", self.linprobe_acc),
                          ("zeroshot_acc", self.zeroshot_acc)]:
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"{name} {acc} outside [0, 1]")
        for name, v in [("frechet_rec", self.frechet_rec), ("frechet_gen", self.frechet_gen)]:
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if not math.isfinite(self.psnr_mean):
            raise ValueError("psnr_mean must be finite")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(**d)


PSNR_CAP = 99.0


def psnr(x: torch.Tensor, x_rec: torch.Tensor) -> float:
    """Mean per-image PSNR in dB on the [0,1] scale; exact matches cap at 99."""
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    if x.dim() == 3:
        x, x_rec = x.unsqueeze(0), x_rec.unsqueeze(0)
    a = (x.double() + 1.0) / 2.0
    b = (x_rec.double() + 1.0) / 2.0
    mse = (a - b).pow(2).flatten(1).mean(dim=1)
    vals = torch.where(mse > 0, 10.0 * torch.log10(1.0 / mse.clamp(min=1e-12)),
                       torch.full_like(mse, PSNR_CAP))
    return float(vals.clamp(max=PSNR_CAP).mean())


def frechet(features_a, features_b) -> float:
    """||mu_a - mu_b||^2 + tr(Sa + Sb - 2(Sa Sb)^{1/2}), with the PSD square
    root taken by eigendecomposition of Sa^{1/2} Sb Sa^{1/2} and eigenvalues
    clamped at zero."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be [N, D] with matching D")
    dim = a.shape[1]
    for name, f in [("a", a), ("b", b)]:
        if f.shape[0] < dim + 1:
            raise ValueError(f"set {name} has {f.shape[0]} samples, need >= {dim + 1}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False)
    cb = np.cov(b, rowvar=False)

    wa, va = np.linalg.eigh((ca + ca.T) / 2.0)
    sa_half = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    inner = sa_half @ cb @ sa_half
    wi = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sqrt(np.clip(wi, 0.0, None)).sum()

    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def linear_probe(train_x, train_y, test_x, test_y, num_classes: int,
                 iters: int = 500, lr: float = 0.05, l2: float = 1e-4) -> float:
    """Full-batch multinomial logistic regression with a fixed recipe (zero
    init, Adam, 500 iterations, explicit L2 1e-4) so the accuracy is a pure
    function of the features. Features are standardized on train statistics."""
    train_y = torch.as_tensor(train_y, dtype=torch.long)
    test_y = torch.as_tensor(test_y, dtype=torch.long)
    if torch.unique(train_y).numel() < 2:
        raise ValueError("degenerate split: train labels contain a single class")
    x = torch.as_tensor(train_x, dtype=torch.float64)
    xt = torch.as_tensor(test_x, dtype=torch.float64)
    mu, sd = x.mean(dim=0), x.std(dim=0).clamp(min=1e-6)
    x, xt = (x - mu) / sd, (xt - mu) / sd

    W = torch.zeros(x.shape[1], num_classes, dtype=torch.float64, requires_grad=True)
    b = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([W, b], lr=lr)
    for _ in range(iters):
        loss = F.cross_entropy(x @ W + b, train_y) + l2 * W.square().sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (xt @ W + b).argmax(dim=1)
    return float((pred == test_y).double().mean())


def class_text_embeddings(model, vocab, num_classes: int, templates=None) -> torch.Tensor:
    """Per-class unit embedding: mean of the template-ensemble text embeddings."""
    if templates is None:
        templates = ZEROSHOT_TEMPLATES
    if len(templates) == 0:
        raise ValueError("zero_shot requires >= 1 prompt template")
    out = []
    with torch.no_grad():
        for cid in range(num_classes):
            shape, color = class_parts(cid, num_classes)
            prompts = [t.format(color=color, shape=shape) for t in templates]
            ids = tokenize_batch(prompts, vocab, model.cfg.text_max_len)
            emb = model.embed_text_clip(ids).mean(dim=0)
            out.append(emb / emb.norm().clamp(min=1e-8))
    return torch.stack(out)


def zero_shot(model, vocab, images: torch.Tensor, labels, num_classes: int,
              templates=None, batch: int = 64) -> float:
    """Argmax cosine similarity against per-class template-ensemble centroids."""
    centroids = class_text_embeddings(model, vocab, num_classes, templates)
    labels = torch.as_tensor(labels, dtype=torch.long)
    preds = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            emb = model.embed_image_clip(images[i:i + batch])
            preds.append((emb @ centroids.t()).argmax(dim=1))
    return float((torch.cat(preds) == labels).double().mean())


def bottleneck_features(model, images: torch.Tensor, batch: int = 64) -> torch.Tensor:
    """Mean-pooled bottleneck tokens per image (the probe's feature space)."""
    feats = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            z = model.encode(images[i:i + batch]).values
            feats.append(z.flatten(2).mean(dim=2))
    return torch.cat(feats)


def latent_stats(model, dataset, n_images: int | None = None, batch: int = 64) -> tuple:
    """Per-channel mean/std over all bottleneck tokens of the dataset sample;
    zero-variance channels are floored at 1e-6 with a warning."""
    mc = model.cfg
    tokens_per_image = mc.token_grid ** 2
    if n_images is None:
        n_images = min(len(dataset), max(1, math.ceil(1000 / tokens_per_image)))
    if n_images * tokens_per_image < 1000:
        n_images = min(len(dataset), math.ceil(1000 / tokens_per_image))
    if n_images * tokens_per_image < 1000:
        raise ValueError(
            f"{n_images} images x {tokens_per_image} tokens < 1000 latents required")
    toks = []
    with torch.no_grad():
        for i in range(0, n_images, batch):
            imgs = torch.stack([dataset[j].image for j in range(i, min(i + batch, n_images))])
            z = model.encode(imgs).values
            toks.append(z.permute(0, 2, 3, 1).reshape(-1, mc.latent_dim))
    all_tok = torch.cat(toks).double()
    mean = all_tok.mean(dim=0)
    std = all_tok.std(dim=0)
    if (std < 1e-6).any():
        warnings.warn("zero-variance latent channel(s); std floored at 1e-6")
        std = std.clamp(min=1e-6)
    return mean.float(), std.float()


# ---------------------------------------------------------------------------
# Pinned feature extractor (the Fréchet proxy's reference network)
# ---------------------------------------------------------------------------

EXTRACTOR_VERSION = 2
EXTRACTOR_SEED = 9001


class FeatureExtractor(nn.Module):
    """Small conv classifier trained once on synthetic data, then frozen and
    hash-pinned. features() concatenates average- and max-pooled activations of
    the last conv (the max path is what separates shapes)."""

    def __init__(self, num_classes: int = 16, width: int = 32):
        super().__init__()
        self.num_classes, self.width = num_classes, width
        self.conv1 = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(width, width * 2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(width * 2, width * 2, 3, stride=1, padding=1)
        self.conv4 = nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1)
        self.head = nn.Linear(width * 4, num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        x = F.gelu(self.conv3(x))
        x = F.gelu(self.conv4(x))
        return torch.cat([x.mean(dim=(2, 3)), x.amax(dim=(2, 3))], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    @property
    def sha(self) -> str:
        return module_hash(self)

    def extract(self, images: torch.Tensor, batch: int = 64) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, images.shape[0], batch):
                out.append(self.features(images[i:i + batch]).double().numpy())
        return np.concatenate(out)


def train_feature_extractor(image_size: int, num_classes: int = 16,
                            steps: int = 800, batch: int = 64,
                            cache_dir: str | None = None,
                            variant: str = "plain") -> FeatureExtractor:
    """Deterministic training of the pinned extractor; cached by version, size,
    class count, and data variant so every run sharing a cache shares the hash."""
    tag = "" if variant == "plain" else f"-{variant}"
    name = f"extractor-v{EXTRACTOR_VERSION}-s{image_size}-c{num_classes}{tag}.bin"
    cache = os.path.join(cache_dir, name) if cache_dir else None
    torch.manual_seed(EXTRACTOR_SEED)
    net = FeatureExtractor(num_classes=num_classes)
    if cache and os.path.exists(cache):
        net.load_state_dict(read_archive(cache))
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        return net
    ds = synth_dataset(EXTRACTOR_SEED, max(2048, num_classes * 64), num_classes, image_size,
                       variant=variant)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    for step in range(steps):
        rng = np.random.default_rng([EXTRACTOR_SEED, step])
        idx = rng.choice(len(ds), size=batch, replace=False)
        samples = [ds[int(i)] for i in idx]
        x = torch.stack([s.image for s in samples])
        y = torch.tensor([s.class_id for s in samples])
        loss = F.cross_entropy(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    if cache:
        os.makedirs(cache_dir, exist_ok=True)
        write_archive(cache, net.state_dict())
    return net


# ---------------------------------------------------------------------------
# End-to-end metrics over a checkpointed tokenizer
# ---------------------------------------------------------------------------

def reconstruct(model, images: torch.Tensor, batch: int = 32) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            out.append(model.decode(model.encode(images[i:i + batch])))
    return torch.cat(out)


def compute_metrics(model, dataset, vocab, extractor: FeatureExtractor,
                    n_eval: int = 256, split: float = 0.8,
                    batch: int = 32) -> MetricsRecord:
    """Evaluates a frozen tokenizer snapshot; asserts the model is unchanged
    afterwards (evaluation must never mutate weights)."""
    before = module_hash(model)
    n_eval = min(n_eval, len(dataset))
    num_classes = getattr(dataset, "num_classes", None)
    if num_classes is None:
        num_classes = max(dataset[i].class_id for i in range(n_eval)) + 1
    samples = [dataset[i] for i in range(n_eval)]
    images = torch.stack([s.image for s in samples])
    labels = torch.tensor([s.class_id for s in samples])

    recs = reconstruct(model, images, batch)
    psnr_mean = psnr(images, recs)
    frechet_rec = frechet(extractor.extract(images), extractor.extract(recs))

    feats = bottleneck_features(model, images, batch)
    n_train = int(split * n_eval)
    linprobe = linear_probe(feats[:n_train], labels[:n_train],
                            feats[n_train:], labels[n_train:], num_classes)
    zs = zero_shot(model, vocab, images[n_train:], labels[n_train:], num_classes)
    mean, std = latent_stats(model, dataset)

    if module_hash(model) != before:
        raise RuntimeError("evaluation mutated model parameters")
    return MetricsRecord(
        psnr_mean=psnr_mean, frechet_rec=frechet_rec, linprobe_acc=linprobe,
        zeroshot_acc=zs, latent_mean=mean.tolist(), latent_std=std.tolist(),
        extractor_sha=extractor.sha, n_eval=n_eval).validate()


def save_metrics(record: MetricsRecord, path: str):
    with open(path, "w") as fh:
        json.dump(record.to_dict(), fh, indent=2)
        fh.write("\n")
