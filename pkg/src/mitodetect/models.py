"""Small stand-in backbones.

``SegUNet`` is a U-Net style encoder-decoder whose decoder blocks can carry
channel + spatial attention gates. ``ToyViT`` is a plain vision transformer
whose block layers are named ``qkv``, ``proj``, ``fc1`` and ``fc2`` so the
default LoRA targets bind.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, field

import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class SegModelConfig:
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    attention: bool = True
    input_size: int = 512
    reduction: int = 4
    seed: int = 0

    def __post_init__(self):
        if len(self.encoder_channels) < 3:
            raise ValueError(f"need >= 3 encoder stages, got {len(self.encoder_channels)}")
        if any(c < 1 for c in self.encoder_channels):
            raise ValueError("channel counts must be positive")
        if self.input_size % 2 ** (len(self.encoder_channels) - 1):
            raise ValueError("input_size must be divisible by 2**(stages - 1)")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class VitConfig:
    image_size: int = 224
    patch_size: int = 16
    depth: int = 4
    heads: int = 4
    dim: int = 192
    mlp_ratio: float = 4.0
    head_outputs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.head_outputs != 1:
            raise ValueError("the classification head has a single output")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_json(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# segmentation
# --------------------------------------------------------------------------

def _norm(channels: int) -> nn.GroupNorm:
    # GroupNorm: no train/eval gap at the tiny batch sizes used here
    return nn.GroupNorm(min(8, channels), channels)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        _norm(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        _norm(cout),
        nn.ReLU(inplace=True),
    )


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(
            nn.Linear(channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, channels)
        )

    def forward(self, x):
        gate = torch.sigmoid(self.mlp(x.mean(dim=(2, 3))))
        return x * gate[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


class DecoderBlock(nn.Module):
    """Upsample, concatenate the skip, gate (optional), then convolve."""

    def __init__(self, cin: int, cskip: int, cout: int, attention: bool, reduction: int = 4):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cin // 2 or 1, 2, stride=2)
        cat = (cin // 2 or 1) + cskip
        self.attention = (
            nn.Sequential(ChannelAttention(cat, reduction), SpatialAttention()) if attention else None
        )
        self.conv = _conv_block(cat, cout)

    def forward(self, x, skip):
        x = torch.cat([self.up(x), skip], dim=1)
        if self.attention is not None:
            x = self.attention(x)
        return self.conv(x)


class SegUNet(nn.Module):
    def __init__(self, config: SegModelConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        self.encoder = nn.ModuleList([_conv_block(3, ch[0])] + [
            _conv_block(ch[i - 1], ch[i]) for i in range(1, len(ch))
        ])
        self.decoder = nn.ModuleList([
            DecoderBlock(ch[i], ch[i - 1], ch[i - 1], config.attention, config.reduction)
            for i in range(len(ch) - 1, 0, -1)
        ])
        self.head = nn.Conv2d(ch[0], 1, 1)
        # foreground prior of ~5%: targets are sparse disks
        nn.init.constant_(self.head.bias, -3.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(N, 3, H, W)`` images to ``(N, 1, H, W)`` logits."""
        factor = 2 ** (len(self.encoder) - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {factor}")
        skips = []
        for i, block in enumerate(self.encoder):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.decoder:
            x = block(x, skips.pop())
        return self.head(x)


def build_seg_model(config: SegModelConfig) -> SegUNet:
    """Deterministically initialised segmentation model (seeded by ``config.seed``)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return SegUNet(config)


# --------------------------------------------------------------------------
# transformer
# --------------------------------------------------------------------------

class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        n, t, d = x.shape
        q, k, v = self.qkv(x).reshape(n, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(n, t, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ToyViT(nn.Module):
    def __init__(self, config: VitConfig):
        super().__init__()
        self.config = config
        self.patch_embed = nn.Conv2d(3, config.dim, config.patch_size, stride=config.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.dim))
        self.pos_embed = nn.Parameter(torch.randn(1, config.num_patches + 1, config.dim) * 0.02)
        self.blocks = nn.ModuleList(
            [Block(config.dim, config.heads, config.mlp_ratio) for _ in range(config.depth)]
        )
        self.norm = nn.LayerNorm(config.dim)
        self.head = nn.Linear(config.dim, config.head_outputs)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(N, 3, S, S)`` images to ``(N, 1)`` logits."""
        x = self.tokens(x)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x)[:, 0])


def build_toy_vit(config: VitConfig) -> ToyViT:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return ToyViT(config)
