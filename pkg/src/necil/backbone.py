"""Small vision transformer producing patch tokens and a [CLS] embedding.

Images are channels-last tensors, ``(H, W, C)`` or batched ``(B, H, W, C)``.
The encoder is a stack of pre-norm transformer blocks over ``[CLS] + patches``;
the decoder blocks let the [CLS] token cross-attend over the encoder output,
and a shared final LayerNorm maps both outputs into the same space so that
[CLS]-to-patch distances are meaningful.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalFailureError, RejectedInputError


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 32
    num_heads: int = 4
    num_encoder_blocks: int = 2
    num_decoder_blocks: int = 1
    num_classes_initial: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise RejectedInputError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise RejectedInputError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise RejectedInputError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_encoder_blocks < 1 or self.num_decoder_blocks < 0:
            raise RejectedInputError("need >= 1 encoder block and >= 0 decoder blocks")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def paper_scale(cls, image_size: int = 32, patch_size: int = 4, **kw) -> "ModelConfig":
        return cls(image_size=image_size, patch_size=patch_size, embed_dim=384, num_heads=12,
                   num_encoder_blocks=5, num_decoder_blocks=1, **kw)


class TokenSet(NamedTuple):
    """Final patch tokens ``(..., N, d)`` and [CLS] embedding ``(..., d)``."""

    patch_tokens: torch.Tensor
    cls_token: torch.Tensor


def _check_image(image: torch.Tensor, config: ModelConfig) -> None:
    expected = (config.image_size, config.image_size, config.in_channels)
    if image.dim() not in (3, 4) or tuple(image.shape[-3:]) != expected:
        raise RejectedInputError(
            f"expected image of shape (..., {expected[0]}, {expected[1]}, {expected[2]}), "
            f"got {tuple(image.shape)}")


def patchify(image: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """Split ``(..., H, W, C)`` into ``(..., N, K*K*C)`` row-major patches.

    Each patch is flattened in (row, col, channel) order.
    """
    _check_image(image, config)
    k, g = config.patch_size, config.grid_size
    lead = image.shape[:-3]
    x = image.reshape(*lead, g, k, g, k, config.in_channels)
    x = x.movedim(-4, -3)  # (..., g_row, g_col, k_row, k_col, C)
    return x.reshape(*lead, g * g, config.patch_dim)


def unpatchify(patches: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    k, g = config.patch_size, config.grid_size
    if tuple(patches.shape[-2:]) != (config.num_patches, config.patch_dim):
        raise RejectedInputError(f"unexpected patch tensor shape {tuple(patches.shape)}")
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, g, g, k, k, config.in_channels)
    x = x.movedim(-3, -4)
    return x.reshape(*lead, config.image_size, config.image_size, config.in_channels)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        h = self.num_heads
        q = self.q(x).reshape(b, n, h, d // h).transpose(1, 2)
        k, v = self.kv(context).reshape(b, context.shape[1], 2, h, d // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """[CLS] cross-attends over ``[CLS] + patch tokens``; patches pass through."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))

    def forward(self, cls: torch.Tensor, patches: torch.Tensor) -> torch.Tensor:
        ctx = self.norm1(torch.cat([cls, patches], dim=1))
        cls = cls + self.attn(ctx[:, :1], ctx)
        return cls + self.mlp(self.norm2(cls))


class ClassifierHead(nn.Module):
    """Linear classifier over all classes seen so far."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.weight = nn.Parameter(torch.zeros(num_classes, embed_dim))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.embed_dim:
            raise RejectedInputError(
                f"embedding dim {z.shape[-1]} does not match head dim {self.embed_dim}")
        return F.linear(z, self.weight, self.bias)

    def grown(self, new_class_count: int) -> "ClassifierHead":
        """New head with zero-initialized rows appended; old rows copied exactly."""
        if new_class_count < 1:
            raise RejectedInputError(f"new_class_count must be >= 1, got {new_class_count}")
        w, b = self.weight.detach(), self.bias.detach()
        head = ClassifierHead(self.embed_dim, self.num_classes + new_class_count)
        head.to(dtype=w.dtype, device=w.device)
        with torch.no_grad():
            head.weight.copy_(torch.cat([w, w.new_zeros(new_class_count, self.embed_dim)]))
            head.bias.copy_(torch.cat([b, b.new_zeros(new_class_count)]))
        return head


def grow_classifier(head: ClassifierHead, new_class_count: int) -> ClassifierHead:
    return head.grown(new_class_count)


def classify(z: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    """Softmax class probabilities for a [CLS] embedding or prototype."""
    return head(z).softmax(dim=-1)


def _check_finite(t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericalFailureError(where)


class VisionTransformer(nn.Module):
    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, config.num_patches + 1, d))
        self.encoder = nn.ModuleList(
            EncoderBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_encoder_blocks))
        self.decoder = nn.ModuleList(
            DecoderBlock(d, config.num_heads, config.mlp_ratio)
            for _ in range(config.num_decoder_blocks))
        self.norm = nn.LayerNorm(d)
        self.head = ClassifierHead(d, config.num_classes_initial)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04, generator=generator)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04, generator=generator)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def grow_classifier(self, new_class_count: int) -> None:
        self.head = self.head.grown(new_class_count)

    def forward(self, images: torch.Tensor) -> TokenSet:
        single = images.dim() == 3
        if single:
            images = images.unsqueeze(0)
        x = self.patch_embed(patchify(images, self.config))
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        _check_finite(x, "patch_embed")
        for i, block in enumerate(self.encoder):
            x = block(x)
            _check_finite(x, f"encoder.{i}")
        cls, patches = x[:, :1], x[:, 1:]
        for i, block in enumerate(self.decoder):
            cls = block(cls, patches)
            _check_finite(cls, f"decoder.{i}")
        tokens = TokenSet(self.norm(patches), self.norm(cls[:, 0]))
        _check_finite(tokens.cls_token, "norm")
        if single:
            tokens = TokenSet(tokens.patch_tokens[0], tokens.cls_token[0])
        return tokens

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self(images).cls_token)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32
                ) -> VisionTransformer:
    gen = torch.Generator().manual_seed(seed)
    return VisionTransformer(config, generator=gen).to(dtype)


def snapshot_model(model: nn.Module) -> nn.Module:
    """Deep, frozen, inference-only copy."""
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen
