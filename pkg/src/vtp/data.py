"""Synthetic captioned shapes, folder ingestion, multi-crop views, block masking,
word-level tokenization, and per-objective batch sub-sampling."""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

# palette kept inside [-0.85, 0.85] after the [0,1] -> [-1,1] map so a tanh
# output head can actually reach every target pixel
COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.85, 0.20),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.88, 0.85, 0.15),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.15, 0.82, 0.85),
    "orange": (0.90, 0.55, 0.12),
    "white": (0.92, 0.92, 0.92),
}
SHAPES = ("circle", "square", "triangle", "ring", "cross", "diamond")
COLOR_NAMES = tuple(COLORS)
MAX_CLASSES = len(SHAPES) * len(COLOR_NAMES)
GRAMMAR_VERSION = 1

# "plain" scenes have one axis-aligned shape on a flat background; "rich" adds
# rotation, stretch, gradient backgrounds, and small distractor shapes so a
# small sample badly undersamples the nuisance manifold. Both share the caption
# grammar: captions always describe the one foreground shape.
VARIANTS = ("plain", "rich")

ZEROSHOT_TEMPLATES = (
    "a {color} {shape}",
    "a small {color} {shape} on a dark background",
    "a large {color} {shape} on a light background",
)


def class_parts(class_id: int, num_classes: int) -> tuple:
    """class_id <-> (shape, color) bucket mapping shared by the renderer, the
    caption grammar, and the caption->class oracle."""
    if not 0 <= class_id < num_classes:
        raise ValueError(f"class_id {class_id} outside [0, {num_classes})")
    nc = min(num_classes, len(COLOR_NAMES))
    return SHAPES[class_id // nc], COLOR_NAMES[class_id % nc]


def caption_to_class(caption: str, num_classes: int) -> int:
    """Rule-based inverse of the caption grammar; raises if color or shape is absent."""
    words = set(normalize(caption).split())
    nc = min(num_classes, len(COLOR_NAMES))
    shape = [i for i, s in enumerate(SHAPES) if s in words]
    color = [i for i, c in enumerate(COLOR_NAMES[:nc]) if c in words]
    if len(shape) != 1 or len(color) != 1:
        raise ValueError(f"caption does not name exactly one shape and color: {caption!r}")
    return shape[0] * nc + color[0]


def class_prompts(class_id: int, num_classes: int) -> list:
    shape, color = class_parts(class_id, num_classes)
    return [t.format(color=color, shape=shape) for t in ZEROSHOT_TEMPLATES]


@dataclass
class Sample:
    image: torch.Tensor        # [3, H, W] in [-1, 1]
    caption: str
    class_id: int

    def validate(self, num_classes=None):
        if not self.caption:
            raise ValueError("caption must be nonempty")
        if num_classes is not None and not 0 <= self.class_id < num_classes:
            raise ValueError(f"class_id {self.class_id} outside [0, {num_classes})")
        return self


def _shape_mask(shape: str, S: int, cx: float, cy: float, r: float,
                rot: float = 0.0, aspect: float = 1.0) -> np.ndarray:
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float32)
    dx, dy = (xx - cx) / S, (yy - cy) / S
    if rot != 0.0 or aspect != 1.0:
        c, s = math.cos(rot), math.sin(rot)
        dx, dy = (c * dx + s * dy) / aspect, (c * dy - s * dx) * aspect
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r
    if shape == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) * 0.5)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        arm = 0.35 * r
        inside = np.maximum(np.abs(dx), np.abs(dy)) <= r
        return inside & ((np.abs(dx) <= arm) | (np.abs(dy) <= arm))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise ValueError(f"unknown shape {shape!r}")


def _render_plain(rng, S: int, shape: str, color: str):
    size_word = "small" if rng.random() < 0.5 else "large"
    bg_word = "dark" if rng.random() < 0.5 else "light"
    r = rng.uniform(0.14, 0.21) if size_word == "small" else rng.uniform(0.26, 0.36)
    margin = r * S + 1
    cx = rng.uniform(margin, S - margin)
    cy = rng.uniform(margin, S - margin)

    bg = rng.uniform(0.10, 0.25) if bg_word == "dark" else rng.uniform(0.72, 0.90)
    canvas = np.full((S, S, 3), bg, dtype=np.float32)
    canvas += rng.normal(0.0, 0.015, size=canvas.shape).astype(np.float32)

    base = np.asarray(COLORS[color], dtype=np.float32)
    jitter = rng.uniform(0.95, 1.05, size=3).astype(np.float32)
    canvas[_shape_mask(shape, S, cx, cy, r)] = base * jitter
    return canvas, size_word, bg_word


def _render_rich(rng, S: int, shape: str, color: str):
    size_word = "small" if rng.random() < 0.5 else "large"
    bg_word = "dark" if rng.random() < 0.5 else "light"

    # linear ramp between two levels of the brightness band, random direction
    lo, hi = (0.05, 0.42) if bg_word == "dark" else (0.58, 0.95)
    a, b = rng.uniform(lo, hi), rng.uniform(lo, hi)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float32)
    t = (xx / S - 0.5) * math.cos(theta) + (yy / S - 0.5) * math.sin(theta) + 0.5
    canvas = np.repeat((a + (b - a) * np.clip(t, 0.0, 1.0))[..., None], 3, axis=2)
    canvas += rng.normal(0.0, 0.015, size=canvas.shape).astype(np.float32)

    # small background shapes, drawn first so the captioned shape occludes them
    for _ in range(int(rng.integers(1, 4))):
        d_shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        d_color = COLOR_NAMES[int(rng.integers(0, len(COLOR_NAMES)))]
        dr = rng.uniform(0.05, 0.10)
        dm = dr * S + 1
        dcx, dcy = rng.uniform(dm, S - dm), rng.uniform(dm, S - dm)
        drot = rng.uniform(0.0, 2.0 * math.pi)
        dj = rng.uniform(0.85, 1.15, size=3).astype(np.float32)
        canvas[_shape_mask(d_shape, S, dcx, dcy, dr, rot=drot)] = \
            np.asarray(COLORS[d_color], dtype=np.float32) * dj

    r = rng.uniform(0.13, 0.20) if size_word == "small" else rng.uniform(0.25, 0.36)
    rot = rng.uniform(0.0, 2.0 * math.pi)
    aspect = rng.uniform(0.7, 1.45)
    # stretched large shapes can exceed the canvas; pin those near the center
    margin = min(r * max(aspect, 1.0 / aspect) * S + 1, S / 2 - 0.5)
    cx = rng.uniform(margin, S - margin)
    cy = rng.uniform(margin, S - margin)
    jitter = rng.uniform(0.92, 1.08, size=3).astype(np.float32)
    canvas[_shape_mask(shape, S, cx, cy, r, rot=rot, aspect=aspect)] = \
        np.asarray(COLORS[color], dtype=np.float32) * jitter
    return canvas.astype(np.float32), size_word, bg_word


def render_sample(seed: int, index: int, num_classes: int, image_size: int,
                  variant: str = "plain") -> Sample:
    """Bitwise-deterministic scene for (seed, index). Classes cycle round-robin
    over indices so every prefix of the dataset is near-balanced."""
    if num_classes > MAX_CLASSES:
        raise ValueError(f"num_classes {num_classes} exceeds {MAX_CLASSES} shape-color buckets")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    rng = np.random.default_rng([seed, index])
    class_id = index % num_classes
    shape, color = class_parts(class_id, num_classes)

    render = _render_rich if variant == "rich" else _render_plain
    canvas, size_word, bg_word = render(rng, image_size, shape, color)

    canvas = np.clip(canvas, 0.075, 0.925)
    image = torch.from_numpy(canvas.transpose(2, 0, 1)) * 2.0 - 1.0
    caption = f"a {size_word} {color} {shape} on a {bg_word} background"
    return Sample(image=image, caption=caption, class_id=class_id)


class SynthDataset:
    """Lazy deterministic sequence of rendered samples."""

    def __init__(self, seed: int, n: int, num_classes: int = 16, image_size: int = 64,
                 variant: str = "plain"):
        if n < num_classes:
            raise ValueError(f"n {n} must be >= num_classes {num_classes}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        self.seed, self.n = seed, n
        self.num_classes, self.image_size = num_classes, image_size
        self.variant = variant

    def __len__(self):
        return self.n

    def __getitem__(self, index: int) -> Sample:
        if not 0 <= index < self.n:
            raise IndexError(index)
        return render_sample(self.seed, index, self.num_classes, self.image_size,
                             self.variant)

    def manifest(self) -> dict:
        return {"kind": "synth", "seed": self.seed, "n": self.n,
                "num_classes": self.num_classes, "image_size": self.image_size,
                "variant": self.variant, "grammar_version": GRAMMAR_VERSION}


def synth_dataset(seed: int, n: int, num_classes: int = 16, image_size: int = 64,
                  variant: str = "plain") -> SynthDataset:
    return SynthDataset(seed, n, num_classes, image_size, variant)


# ---------------------------------------------------------------------------
# Views and masking
# ---------------------------------------------------------------------------

@dataclass
class AugConfig:
    global_size: int = 64
    local_size: int = 32
    local_views: int = 4          # m
    global_scale: tuple = (0.4, 1.0)
    local_scale: tuple = (0.1, 0.4)
    mask_ratio: float = 0.3
    token_grid: int = 4           # mask grid side for the masked global view
    hflip: bool = True
    jitter: float = 0.2           # multiplicative brightness range
    block_masking: bool = True
    enabled: bool = True          # False: identity resize, no flips or jitter


@dataclass
class ViewSet:
    global_views: torch.Tensor   # [2, 3, S, S]
    local_views: torch.Tensor    # [m, 3, s, s]
    mim_mask: torch.Tensor       # [g, g] bool over global view 1 (= index 0) tokens
    mask_ratio: float

    def validate(self):
        if self.global_views.shape[0] != 2:
            raise ValueError("exactly 2 global views required")
        if self.mask_ratio > 0 and int(self.mim_mask.sum()) < 1:
            raise ValueError("mask_ratio > 0 requires >=1 masked token")
        return self


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _resize(img: torch.Tensor, size: int) -> torch.Tensor:
    if img.shape[-1] == size and img.shape[-2] == size:
        return img
    return F.interpolate(img.unsqueeze(0), size=(size, size), mode="bilinear",
                         align_corners=False).squeeze(0)


def _random_crop(img: torch.Tensor, scale: tuple, out_size: int, rng) -> torch.Tensor:
    H = img.shape[-2]
    s = rng.uniform(scale[0], scale[1])
    side = max(1, min(H, round(math.sqrt(s) * H)))
    y0 = int(rng.integers(0, H - side + 1))
    x0 = int(rng.integers(0, img.shape[-1] - side + 1))
    return _resize(img[:, y0:y0 + side, x0:x0 + side], out_size)


def _augment(img: torch.Tensor, cfg: AugConfig, rng) -> torch.Tensor:
    if cfg.hflip and rng.random() < 0.5:
        img = torch.flip(img, dims=[-1])
    if cfg.jitter > 0:
        f = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter)
        img = (img * f).clamp(-1.0, 1.0)
    return img


def block_mask(h: int, w: int, ratio: float, rng, block: bool = True) -> torch.Tensor:
    """Boolean [h, w] grid with exactly round_half_up(ratio*h*w) True cells.

    Block mode places <=4 rectangles (row-major prefix of each rectangle's still
    unmasked cells) and grows the masked frontier for any remainder, so the True
    cells always form <=4 connected components.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1)")
    T = h * w
    target = round_half_up(ratio * T)
    mask = torch.zeros(h, w, dtype=torch.bool)
    if target == 0:
        return mask
    if not block:
        flat = rng.choice(T, size=target, replace=False)
        mask.view(-1)[torch.from_numpy(np.asarray(flat))] = True
        return mask

    k = int(rng.integers(1, 5))
    k = min(k, target)
    splits = sorted(rng.choice(target - 1, size=k - 1, replace=False) + 1) if k > 1 else []
    parts = np.diff([0, *splits, target]).tolist()

    remaining = target
    for want in parts:
        want = min(want, remaining)
        if want == 0:
            continue
        aspect = rng.uniform(0.5, 2.0)
        bw = max(1, min(w, round(math.sqrt(want * aspect))))
        bh = max(1, min(h, math.ceil(want / bw)))
        bw = min(w, math.ceil(want / bh))
        y0 = int(rng.integers(0, h - bh + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        took = 0
        for yy in range(y0, y0 + bh):
            for xx in range(x0, x0 + bw):
                if took == want:
                    break
                if not mask[yy, xx]:
                    mask[yy, xx] = True
                    took += 1
        remaining -= took
    # frontier growth: each added cell touches the mask, so no new components
    while remaining > 0:
        frontier = []
        idx = mask.nonzero()
        for y, x in idx.tolist():
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < h and 0 <= nx < w and not mask[ny, nx]:
                    frontier.append((ny, nx))
        if not frontier:
            break
        frontier = sorted(set(frontier))
        pick = frontier[int(rng.integers(0, len(frontier)))]
        mask[pick] = True
        remaining -= 1
    return mask


def make_views(sample: Sample, cfg: AugConfig, rng) -> ViewSet:
    """2 global crops + m local crops; the MIM mask rides on global view 1."""
    img = sample.image
    if cfg.enabled:
        globals_ = torch.stack([
            _augment(_random_crop(img, cfg.global_scale, cfg.global_size, rng), cfg, rng)
            for _ in range(2)
        ])
        locals_ = torch.stack([
            _augment(_random_crop(img, cfg.local_scale, cfg.local_size, rng), cfg, rng)
            for _ in range(cfg.local_views)
        ]) if cfg.local_views > 0 else torch.zeros(0, 3, cfg.local_size, cfg.local_size)
    else:
        g = _resize(img, cfg.global_size)
        globals_ = torch.stack([g, g.clone()])
        l = _resize(img, cfg.local_size)
        locals_ = torch.stack([l.clone() for _ in range(cfg.local_views)]) \
            if cfg.local_views > 0 else torch.zeros(0, 3, cfg.local_size, cfg.local_size)
    mask = block_mask(cfg.token_grid, cfg.token_grid, cfg.mask_ratio, rng,
                      block=cfg.block_masking)
    return ViewSet(global_views=globals_, local_views=locals_, mim_mask=mask,
                   mask_ratio=cfg.mask_ratio).validate()


# ---------------------------------------------------------------------------
# Batch planning
# ---------------------------------------------------------------------------

@dataclass
class BatchPlan:
    clip_indices: np.ndarray
    ssl_indices: np.ndarray
    rec_indices: np.ndarray

    def validate(self):
        B = len(self.clip_indices)
        for name, idx in [("ssl", self.ssl_indices), ("rec", self.rec_indices)]:
            if len(np.unique(idx)) != len(idx):
                raise ValueError(f"duplicate {name} indices")
            if len(idx) and (idx.min() < 0 or idx.max() >= B):
                raise ValueError(f"{name} indices escape the batch")
        return self


def plan_batch(B: int, B_ssl: int, B_rec: int, rng) -> BatchPlan:
    """All B samples feed the contrastive term; ssl and rec get independent
    uniform subsets drawn without replacement."""
    if B_ssl > B or B_rec > B:
        raise ValueError(f"sub-batch ({B_ssl}, {B_rec}) exceeds batch {B}")
    ssl = np.sort(rng.choice(B, size=B_ssl, replace=False))
    rec = np.sort(rng.choice(B, size=B_rec, replace=False))
    return BatchPlan(clip_indices=np.arange(B), ssl_indices=ssl, rec_indices=rec).validate()


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


def normalize(text: str) -> str:
    out = "".join(c if c.isalnum() else " " for c in text.lower())
    return " ".join(out.split())


@dataclass
class Vocab:
    word_to_id: dict
    id_to_word: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.id_to_word:
            self.id_to_word = {i: w for w, i in self.word_to_id.items()}

    def __len__(self):
        return len(self.word_to_id)


def build_vocab(corpus, max_size: int = 512) -> Vocab:
    words = sorted({w for text in corpus for w in normalize(text).split()})
    if len(words) + len(RESERVED) > max_size:
        raise ValueError(f"vocabulary {len(words) + len(RESERVED)} exceeds {max_size}")
    table = {w: i for i, w in enumerate(RESERVED)}
    for w in words:
        table[w] = len(table)
    return Vocab(word_to_id=table)


def tokenize(caption: str, vocab: Vocab) -> list:
    ids = [vocab.word_to_id.get(w, UNK) for w in normalize(caption).split()]
    return [BOS, *ids, EOS]


def detokenize(ids, vocab: Vocab) -> str:
    keep = [int(i) for i in ids if int(i) not in (PAD, BOS, EOS)]
    return " ".join(vocab.id_to_word.get(i, RESERVED[UNK]) for i in keep)


def tokenize_batch(captions, vocab: Vocab, max_len: int) -> torch.Tensor:
    """[B, max_len] LongTensor, PAD-filled; overlong captions keep BOS..EOS."""
    out = torch.full((len(captions), max_len), PAD, dtype=torch.long)
    for i, c in enumerate(captions):
        ids = tokenize(c, vocab)
        if len(ids) > max_len:
            ids = ids[: max_len - 1] + [EOS]
        out[i, : len(ids)] = torch.tensor(ids)
    return out


def grammar_corpus(num_classes: int) -> list:
    """Every caption the synthetic grammar can emit, for vocab construction."""
    caps = []
    for cid in range(num_classes):
        shape, color = class_parts(cid, num_classes)
        for size in ("small", "large"):
            for bg in ("dark", "light"):
                caps.append(f"a {size} {color} {shape} on a {bg} background")
        caps.extend(class_prompts(cid, num_classes))
    return caps


# ---------------------------------------------------------------------------
# Folder ingestion and manifests
# ---------------------------------------------------------------------------

class FolderDataset:
    def __init__(self, samples, path: str, image_size: int):
        self._samples = samples
        self.path, self.image_size = path, image_size
        self.num_classes = max((s.class_id for s in samples), default=0) + 1

    def __len__(self):
        return len(self._samples)

    def __getitem__(self, i):
        return self._samples[i]

    def manifest(self) -> dict:
        return {"kind": "folder", "path": self.path, "image_size": self.image_size}


def load_folder(path: str, image_size: int = 64) -> FolderDataset:
    """Directory of images plus captions.tsv (filename<TAB>caption[<TAB>class]).
    Samples come back center-cropped, resized, in lexicographic filename order."""
    from PIL import Image

    tsv = os.path.join(path, "captions.tsv")
    rows = {}
    if os.path.exists(tsv):
        with open(tsv) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) < 2:
                    raise ValueError(f"{tsv}:{ln}: expected filename<TAB>caption")
                rows[parts[0]] = (parts[1], int(parts[2]) if len(parts) > 2 else 0, ln)
    files = sorted(f for f in os.listdir(path)
                   if f.lower().endswith((".png", ".jpg", ".jpeg")))
    for name, (_, _, ln) in rows.items():
        if name not in files:
            raise FileNotFoundError(f"{tsv}:{ln}: no image file {name!r} in {path}")
    samples = []
    for name in files:
        if name not in rows:
            raise ValueError(f"image {name!r} has no caption row in {tsv}")
        caption, class_id, _ = rows[name]
        with Image.open(os.path.join(path, name)) as im:
            im = im.convert("RGB")
            side = min(im.size)
            left, top = (im.width - side) // 2, (im.height - side) // 2
            im = im.crop((left, top, left + side, top + side))
            im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
        image = torch.from_numpy(arr.transpose(2, 0, 1)) * 2.0 - 1.0
        samples.append(Sample(image=image, caption=caption, class_id=class_id).validate())
    return FolderDataset(samples, path, image_size)


def dataset_from_manifest(manifest: dict):
    kind = manifest.get("kind")
    if kind == "synth":
        return SynthDataset(manifest.get("seed", 0), manifest["n"],
                            manifest.get("num_classes", 16),
                            manifest.get("image_size", 64),
                            manifest.get("variant", "plain"))
    if kind == "folder":
        return load_folder(manifest["path"], manifest.get("image_size", 64))
    raise ValueError(f"unknown dataset kind {kind!r}")


def load_manifest(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_manifest(dataset, path: str):
    with open(path, "w") as fh:
        json.dump(dataset.manifest(), fh, indent=2)
        fh.write("\n")
