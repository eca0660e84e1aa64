"""ViT tokenizer architecture: encoder + latent bottleneck, pixel decoder with a
pixel-shuffle head, text encoder, projection heads, EMA teacher, and the analytic
parameter/FLOP cost model used by the training-compute ledger."""

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

# width, depth, heads for the three desk-scale encoder tiers
MODEL_TIERS = {"s": (128, 4, 4), "b": (256, 6, 4), "l": (512, 8, 8)}


@dataclass
class ModelConfig:
    patch_size: int = 16          # f; one token per f x f pixel block
    latent_dim: int = 64          # d; bottleneck channels per token
    image_size: int = 64
    encoder_depth: int = 6
    encoder_width: int = 256
    encoder_heads: int = 4
    decoder_blocks: int = 4
    decoder_width: int = 512
    decoder_heads: int = 8
    text_depth: int = 4
    text_width: int = 128
    text_heads: int = 4
    text_max_len: int = 32
    vocab_size: int = 512
    dino_prototypes: int = 1024   # K
    dino_hidden: int = 256
    clip_embed_dim: int = 128
    use_qknorm: bool = True
    # whether CLIP/DINO branches read the d-dim bottleneck tokens (default) or
    # the pre-bottleneck encoder-width tokens
    heads_from_bottleneck: bool = True

    def validate(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        for name, w, h in [
            ("encoder", self.encoder_width, self.encoder_heads),
            ("decoder", self.decoder_width, self.decoder_heads),
            ("text", self.text_width, self.text_heads),
        ]:
            if w % h != 0:
                raise ValueError(f"{name}_width {w} not divisible by its head count {h}")
        return self

    @property
    def token_grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def branch_dim(self) -> int:
        return self.latent_dim if self.heads_from_bottleneck else self.encoder_width


@dataclass
class LatentGrid:
    """Bottleneck output: [d, h, w] (or batched [B, d, h, w]) plus the pixel size
    of the image it came from."""

    values: torch.Tensor
    source_size: tuple = (0, 0)

    @property
    def batched(self) -> bool:
        return self.values.dim() == 4


def trunc_normal_(t: torch.Tensor, std=0.02):
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std)


class Attention(nn.Module):
    """Multi-head self-attention with optional per-head q/k L2 normalization
    (one learnable scalar logit scale per layer) and optional causal masking."""

    def __init__(self, width: int, heads: int, use_qknorm=False, causal=False):
        super().__init__()
        assert width % heads == 0
        self.heads = heads
        self.head_dim = width // heads
        self.causal = causal
        self.use_qknorm = use_qknorm
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        if use_qknorm:
            self.qk_scale = nn.Parameter(torch.tensor(10.0))
        trunc_normal_(self.qkv.weight)
        nn.init.zeros_(self.qkv.bias)
        trunc_normal_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.capture_qk = False  # test hook: stash normalized q/k when set
        self.last_q = None
        self.last_k = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, W = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.heads, self.head_dim).transpose(1, 2)
        if self.use_qknorm:
            q = F.normalize(q, dim=-1, eps=1e-8)
            k = F.normalize(k, dim=-1, eps=1e-8)
            scale = self.qk_scale
        else:
            scale = self.head_dim ** -0.5
        if self.capture_qk:
            self.last_q = q.detach().clone()
            self.last_k = k.detach().clone()
        logits = (q @ k.transpose(-2, -1)) * scale
        if self.causal:
            mask = torch.triu(torch.ones(T, T, dtype=torch.bool, device=x.device), diagonal=1)
            logits = logits.masked_fill(mask, float("-inf"))
        out = logits.softmax(dim=-1) @ v
        out = out.transpose(1, 2).reshape(B, T, W)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, width: int, ratio=4):
        super().__init__()
        self.fc1 = nn.Linear(width, ratio * width)
        self.fc2 = nn.Linear(ratio * width, width)
        trunc_normal_(self.fc1.weight)
        nn.init.zeros_(self.fc1.bias)
        trunc_normal_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-LN transformer block."""

    def __init__(self, width: int, heads: int, use_qknorm=False, causal=False):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads, use_qknorm=use_qknorm, causal=causal)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = Mlp(width)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _interp_pos(pos: torch.Tensor, base_grid: int, h: int, w: int) -> torch.Tensor:
    # pos: [1, base_grid*base_grid, W] -> [1, h*w, W]
    if (h, w) == (base_grid, base_grid):
        return pos
    W = pos.shape[-1]
    grid = pos.reshape(1, base_grid, base_grid, W).permute(0, 3, 1, 2)
    grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
    return grid.permute(0, 2, 3, 1).reshape(1, h * w, W)


def patchify(x: torch.Tensor, f: int) -> torch.Tensor:
    """[B, 3, H, W] -> [B, (H/f)(W/f), 3*f*f] row-major token order."""
    B, C, H, W = x.shape
    if H % f or W % f:
        raise ValueError(f"image size {H}x{W} not divisible by patch size {f}")
    h, w = H // f, W // f
    x = x.reshape(B, C, h, f, w, f)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(B, h * w, C * f * f)


def unpatchify(tokens: torch.Tensor, f: int, h: int, w: int) -> torch.Tensor:
    """Inverse of patchify: [B, h*w, 3*f*f] -> [B, 3, h*f, w*f] (depth-to-space)."""
    B = tokens.shape[0]
    x = tokens.reshape(B, h, w, 3, f, f)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(B, 3, h * f, w * f)


class VisionEncoder(nn.Module):
    """Patch embed -> ViT blocks -> final norm -> per-token linear bottleneck to d.

    Handles any input resolution divisible by the patch size; positional
    embeddings are bilinearly resampled away from the base grid.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        f, w = cfg.patch_size, cfg.encoder_width
        self.patch_embed = nn.Linear(3 * f * f, w)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.token_grid ** 2, w))
        self.mask_token = nn.Parameter(torch.zeros(1, 1, w))
        self.blocks = nn.ModuleList(
            [Block(w, cfg.encoder_heads, use_qknorm=cfg.use_qknorm) for _ in range(cfg.encoder_depth)]
        )
        self.norm = nn.LayerNorm(w)
        self.bottleneck = nn.Linear(w, cfg.latent_dim)
        trunc_normal_(self.patch_embed.weight)
        nn.init.zeros_(self.patch_embed.bias)
        trunc_normal_(self.pos_embed)
        trunc_normal_(self.mask_token)
        trunc_normal_(self.bottleneck.weight)
        nn.init.zeros_(self.bottleneck.bias)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        """x: [B, 3, H, W]; mask: optional [B, T] bool, True = replace token input
        with the learned mask embedding. Returns (width tokens, bottleneck tokens),
        both [B, T, *]."""
        f = self.cfg.patch_size
        h, w = x.shape[-2] // f, x.shape[-1] // f
        t = self.patch_embed(patchify(x, f))
        if mask is not None:
            t = torch.where(mask.unsqueeze(-1), self.mask_token.to(t.dtype), t)
        t = t + _interp_pos(self.pos_embed, self.cfg.token_grid, h, w)
        for blk in self.blocks:
            t = blk(t)
        t = self.norm(t)
        return t, self.bottleneck(t)


class PixelDecoder(nn.Module):
    """Linear lift d -> decoder width, ViT blocks, linear head to f*f*3 per token,
    depth-to-space, tanh to [-1, 1]."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        f, w = cfg.patch_size, cfg.decoder_width
        self.lift = nn.Linear(cfg.latent_dim, w)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.token_grid ** 2, w))
        self.blocks = nn.ModuleList(
            [Block(w, cfg.decoder_heads, use_qknorm=cfg.use_qknorm) for _ in range(cfg.decoder_blocks)]
        )
        self.norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, 3 * f * f)
        trunc_normal_(self.lift.weight)
        nn.init.zeros_(self.lift.bias)
        trunc_normal_(self.pos_embed)
        trunc_normal_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        """z: [B, d, h, w] -> [B, 3, h*f, w*f]."""
        B, d, h, w = z.shape
        if d != self.cfg.latent_dim:
            raise ValueError(f"latent has {d} channels, decoder expects {self.cfg.latent_dim}")
        t = self.lift(z.flatten(2).transpose(1, 2))
        t = t + _interp_pos(self.pos_embed, self.cfg.token_grid, h, w)
        for blk in self.blocks:
            t = blk(t)
        t = self.head(self.norm(t))
        return torch.tanh(unpatchify(t, self.cfg.patch_size, h, w))


class TextEncoder(nn.Module):
    """Causal transformer over word ids, pooled at the final non-pad token."""

    def __init__(self, cfg: ModelConfig, pad_id=0):
        super().__init__()
        self.cfg = cfg
        self.pad_id = pad_id
        w = cfg.text_width
        self.tok_embed = nn.Embedding(cfg.vocab_size, w)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.text_max_len, w))
        self.blocks = nn.ModuleList(
            [Block(w, cfg.text_heads, use_qknorm=cfg.use_qknorm, causal=True) for _ in range(cfg.text_depth)]
        )
        self.norm = nn.LayerNorm(w)
        trunc_normal_(self.tok_embed.weight)
        trunc_normal_(self.pos_embed)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids: [B, L] padded with pad_id -> pooled [B, text_width]."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        if ids.shape[1] > self.cfg.text_max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max {self.cfg.text_max_len}")
        if int(ids.max()) >= self.cfg.vocab_size or int(ids.min()) < 0:
            raise ValueError("token id outside vocabulary")
        x = self.tok_embed(ids) + self.pos_embed[:, : ids.shape[1]]
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        last = (ids != self.pad_id).sum(dim=1).clamp(min=1) - 1
        return x[torch.arange(ids.shape[0]), last]


class DinoHead(nn.Module):
    """Two-layer MLP to K prototype logits; shared shape between student and teacher."""

    def __init__(self, in_dim: int, hidden: int, prototypes: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, prototypes)
        trunc_normal_(self.fc1.weight)
        nn.init.zeros_(self.fc1.bias)
        trunc_normal_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def dino_logits(features: torch.Tensor, head: DinoHead) -> torch.Tensor:
    """Prototype logits for pooled ([B, D]) or per-token ([B, T, D]) features."""
    if features.shape[-1] != head.fc1.in_features:
        raise ValueError(
            f"feature dim {features.shape[-1]} does not match head input {head.fc1.in_features}"
        )
    return head(features)


class TokenizerModel(nn.Module):
    """The trainable networks: vision encoder + bottleneck, pixel decoder, text
    encoder, CLIP projections, prototype head, and the learnable contrastive
    temperature."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.vision_encoder = VisionEncoder(cfg)
        self.pixel_decoder = PixelDecoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.clip_image_proj = nn.Linear(cfg.branch_dim, cfg.clip_embed_dim, bias=False)
        self.clip_text_proj = nn.Linear(cfg.text_width, cfg.clip_embed_dim, bias=False)
        self.dino_head = DinoHead(cfg.branch_dim, cfg.dino_hidden, cfg.dino_prototypes)
        self.log_temp = nn.Parameter(torch.tensor(math.log(0.07)))
        trunc_normal_(self.clip_image_proj.weight)
        trunc_normal_(self.clip_text_proj.weight)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temp.exp()

    def branch_tokens(self, width_tokens, z_tokens):
        return z_tokens if self.cfg.heads_from_bottleneck else width_tokens

    def encode(self, image: torch.Tensor) -> LatentGrid:
        """[3, H, W] or [B, 3, H, W] in [-1, 1] -> latent grid [.., d, H/f, W/f]."""
        single = image.dim() == 3
        x = image.unsqueeze(0) if single else image
        f = self.cfg.patch_size
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ValueError(
                f"image size {x.shape[-2]}x{x.shape[-1]} not divisible by patch size {f}"
            )
        h, w = x.shape[-2] // f, x.shape[-1] // f
        _, z = self.vision_encoder(x)
        z = z.transpose(1, 2).reshape(x.shape[0], self.cfg.latent_dim, h, w)
        if single:
            z = z.squeeze(0)
        return LatentGrid(values=z, source_size=(x.shape[-2], x.shape[-1]))

    def decode(self, latent) -> torch.Tensor:
        """LatentGrid (or raw [.., d, h, w] tensor) -> image [.., 3, h*f, w*f]."""
        z = latent.values if isinstance(latent, LatentGrid) else latent
        single = z.dim() == 3
        if single:
            z = z.unsqueeze(0)
        out = self.pixel_decoder(z)
        return out.squeeze(0) if single else out

    def embed_image_clip(self, image: torch.Tensor) -> torch.Tensor:
        """Mean-pooled branch tokens, projected and L2-normalized (eps floor 1e-8)."""
        single = image.dim() == 3
        x = image.unsqueeze(0) if single else image
        width_tokens, z_tokens = self.vision_encoder(x)
        pooled = self.branch_tokens(width_tokens, z_tokens).mean(dim=1)
        v = self.clip_image_proj(pooled)
        v = v / v.norm(dim=-1, keepdim=True).clamp(min=1e-8)
        return v.squeeze(0) if single else v

    def embed_text_clip(self, ids: torch.Tensor) -> torch.Tensor:
        single = ids.dim() == 1
        pooled = self.text_encoder(ids)
        v = self.clip_text_proj(pooled)
        v = v / v.norm(dim=-1, keepdim=True).clamp(min=1e-8)
        return v.squeeze(0) if single else v


class EmaTeacher(nn.Module):
    """Gradient-free shadow of the vision encoder (+bottleneck) and prototype head,
    updated only through ema_update."""

    def __init__(self, model: TokenizerModel, momentum=0.996):
        super().__init__()
        self.momentum = momentum
        self.vision_encoder = copy.deepcopy(model.vision_encoder)
        self.dino_head = copy.deepcopy(model.dino_head)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward_branch(self, x: torch.Tensor, from_bottleneck: bool):
        width_tokens, z_tokens = self.vision_encoder(x)
        return z_tokens if from_bottleneck else width_tokens


@torch.no_grad()
def ema_update(teacher: EmaTeacher, model: TokenizerModel, m: float):
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"ema momentum {m} outside [0, 1]")
    pairs = list(
        zip(teacher.vision_encoder.parameters(), model.vision_encoder.parameters())
    ) + list(zip(teacher.dino_head.parameters(), model.dino_head.parameters()))
    for pt, ps in pairs:
        if pt.shape != ps.shape:
            raise ValueError(f"teacher/student shape mismatch: {pt.shape} vs {ps.shape}")
        pt.mul_(m).add_(ps.detach(), alpha=1.0 - m)


# ---------------------------------------------------------------------------
# Analytic cost model. count_params mirrors the builders above tensor-for-tensor
# (tested to match exact enumeration); count_flops uses the 2*MACs convention
# over matmuls only.
# ---------------------------------------------------------------------------

def _block_params(width: int, use_qknorm: bool) -> int:
    p = 4 * width                       # two layernorms
    p += 3 * width * width + 3 * width  # qkv
    p += width * width + width          # attn proj
    p += 8 * width * width + 5 * width  # mlp
    if use_qknorm:
        p += 1                          # logit scale
    return p


def count_params(cfg: ModelConfig) -> int:
    """Exact parameter count of vision encoder (+bottleneck) plus pixel decoder.

    This is the symmetric-AE accounting (text encoder and heads excluded): set
    decoder_blocks/width equal to the encoder's to cost a symmetric autoencoder.
    """
    f, d = cfg.patch_size, cfg.latent_dim
    T = cfg.token_grid ** 2
    w = cfg.encoder_width
    enc = 3 * f * f * w + w             # patch embed
    enc += T * w                        # pos embed
    enc += w                            # mask token
    enc += cfg.encoder_depth * _block_params(w, cfg.use_qknorm)
    enc += 2 * w                        # final norm
    enc += w * d + d                    # bottleneck
    wd = cfg.decoder_width
    dec = d * wd + wd                   # lift
    dec += T * wd                       # pos embed
    dec += cfg.decoder_blocks * _block_params(wd, cfg.use_qknorm)
    dec += 2 * wd                       # final norm
    dec += wd * 3 * f * f + 3 * f * f   # pixel-shuffle head
    return enc + dec


def _block_macs(width: int, tokens: int) -> int:
    return 12 * width * width * tokens + 2 * tokens * tokens * width


def encoder_macs(cfg: ModelConfig, image_size: int) -> int:
    f, w = cfg.patch_size, cfg.encoder_width
    T = (image_size // f) ** 2
    m = 3 * f * f * w * T
    m += cfg.encoder_depth * _block_macs(w, T)
    m += w * cfg.latent_dim * T
    return m


def decoder_macs(cfg: ModelConfig, image_size: int) -> int:
    f, wd = cfg.patch_size, cfg.decoder_width
    T = (image_size // f) ** 2
    m = cfg.latent_dim * wd * T
    m += cfg.decoder_blocks * _block_macs(wd, T)
    m += wd * 3 * f * f * T
    return m


def text_macs(cfg: ModelConfig, seq_len: int) -> int:
    w = cfg.text_width
    return cfg.text_depth * _block_macs(w, seq_len)


def head_macs(cfg: ModelConfig, image_size: int) -> int:
    # clip image projection (on the pooled token) + dino head per token
    T = (image_size // cfg.patch_size) ** 2
    b = cfg.branch_dim
    m = b * cfg.clip_embed_dim
    m += T * (b * cfg.dino_hidden + cfg.dino_hidden * cfg.dino_prototypes)
    return m


def count_flops(cfg: ModelConfig, image_size: int | None = None) -> int:
    """Forward FLOPs (2*MACs) of one image through encoder + decoder."""
    s = image_size if image_size is not None else cfg.image_size
    if s % cfg.patch_size != 0:
        raise ValueError(f"image_size {s} not divisible by patch size {cfg.patch_size}")
    return 2 * (encoder_macs(cfg, s) + decoder_macs(cfg, s))


def build_model(cfg: ModelConfig, seed: int = 0) -> TokenizerModel:
    """Seeded construction so runs are reproducible end to end."""
    torch.manual_seed(seed)
    return TokenizerModel(cfg)
