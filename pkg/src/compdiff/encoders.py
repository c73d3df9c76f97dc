"""Latent autoencoder and the foreground encoder producing global/local embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .layers import Attention, Conv2d, FeedForward
from .numerics import Rng, check_finite

LATENT_CHANNELS = 4


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    latent_factor: int = 4
    ae_channels: int = 32
    fg_size: int = 32
    patch_size: int = 4
    vit_depth: int = 4
    vit_width: int = 64
    deep_layer_index: int = 4
    shallow_layer_index: int = 2
    mlp_layers: int = 5
    global_dim: int = 64
    use_pos_embed: bool = True
    train_fg_encoder: bool = True

    def __post_init__(self):
        if self.latent_factor not in (2, 4, 8):
            raise ConfigError(f"latent_factor must be 2, 4 or 8, got {self.latent_factor}")
        if self.image_size % self.latent_factor:
            raise ConfigError("image_size must be divisible by latent_factor")
        if self.fg_size % self.patch_size:
            raise ConfigError("fg_size must be divisible by patch_size")
        if not 1 <= self.shallow_layer_index < self.deep_layer_index <= self.vit_depth:
            raise ConfigError("need 1 <= shallow_layer_index < deep_layer_index <= vit_depth")
        if self.mlp_layers < 1:
            raise ConfigError("mlp_layers must be >= 1")

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_factor

    @property
    def num_patches(self) -> int:
        return (self.fg_size // self.patch_size) ** 2

    @property
    def local_dim(self) -> int:
        return self.vit_width


class LatentKind(str, Enum):
    COMPOSITE = "composite"
    BACKGROUND = "background"


@dataclass
class LatentCode:
    values: torch.Tensor
    source_kind: LatentKind = LatentKind.COMPOSITE

    def __post_init__(self):
        if self.values.dim() != 3 or self.values.shape[0] != LATENT_CHANNELS:
            raise ShapeError(f"latent must be [4,h,w], got {tuple(self.values.shape)}")


class AutoEncoder(nn.Module):
    """Deterministic convolutional autoencoder; ``f`` = 2**(number of stride-2 stages)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.ae_channels
        stages = int(math.log2(cfg.latent_factor))
        enc: list[nn.Module] = [Conv2d(3, ch), nn.SiLU()]
        for _ in range(stages):
            enc += [Conv2d(ch, ch, 3, stride=2), nn.SiLU(), Conv2d(ch, ch), nn.SiLU()]
        enc.append(Conv2d(ch, LATENT_CHANNELS))
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = [Conv2d(LATENT_CHANNELS, ch), nn.SiLU()]
        for _ in range(stages):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), Conv2d(ch, ch), nn.SiLU(), Conv2d(ch, ch), nn.SiLU()]
        dec.append(Conv2d(ch, 3))
        self.decoder = nn.Sequential(*dec)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        f = self.cfg.latent_factor
        if images.dim() != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected [N,3,H,W] images, got {tuple(images.shape)}")
        if images.shape[-2] % f or images.shape[-1] % f:
            raise ShapeError(f"image extents {tuple(images.shape[-2:])} not divisible by {f}")
        return self.encoder(images)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != LATENT_CHANNELS:
            raise ShapeError(f"expected [N,4,h,w] latents, got {tuple(z.shape)}")
        return self.decoder(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(-1.0, 1.0)


def ae_encode(ae: AutoEncoder, image: torch.Tensor, kind: LatentKind = LatentKind.COMPOSITE) -> LatentCode:
    if image.dim() != 3:
        raise ShapeError("ae_encode expects a single [3,H,W] image")
    return LatentCode(ae.encode(image[None])[0], kind)


def ae_decode(ae: AutoEncoder, z: LatentCode | torch.Tensor) -> torch.Tensor:
    values = z.values if isinstance(z, LatentCode) else z
    if values.dim() != 3 or values.shape[0] != LATENT_CHANNELS:
        raise ShapeError(f"ae_decode expects [4,h,w], got {tuple(values.shape)}")
    return ae.decode(values[None])[0]


def train_autoencoder(ae: AutoEncoder, images: torch.Tensor, steps: int = 500, lr: float = 2e-3,
                      batch: int = 8, seed: int = 0) -> list[float]:
    """Reconstruction pretraining (L1 + L2) on ``images[N,3,H,W]``; returns per-step loss."""
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    rng = Rng(seed, ("ae",))
    losses = []
    n = images.shape[0]
    for step in range(steps):
        idx = torch.from_numpy(rng.substream(step).permutation(n)[: min(batch, n)])
        x = images[idx]
        rec = ae.decode_raw(ae.encode(x))
        loss = F.l1_loss(rec, x) + F.mse_loss(rec, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


@dataclass
class ForegroundEmbeddings:
    """Batched foreground conditioning.

    ``global_embedding`` is ``[N, d_g]``, ``local_embeddings`` ``[N, n_p, d_l]``;
    ``tokens`` (``[N, 1 + n_p, d_g]``) is only populated for the all-token variant.
    """

    global_embedding: torch.Tensor
    local_embeddings: torch.Tensor
    null_global: torch.Tensor = None  # bool [N]
    tokens: torch.Tensor | None = None

    def __post_init__(self):
        if self.null_global is None:
            self.null_global = torch.zeros(self.global_embedding.shape[0], dtype=torch.bool)

    def context(self) -> torch.Tensor:
        """Cross-attention context ``[N, L, d_g]``."""
        if self.tokens is not None:
            return self.tokens
        return self.global_embedding[:, None, :]

    def with_null(self, null: torch.Tensor, drop: torch.Tensor) -> "ForegroundEmbeddings":
        """Replace the global conditioning of samples where ``drop`` is set by ``null``."""
        drop = torch.as_tensor(drop, dtype=torch.bool)
        if not bool(drop.any()):
            return self
        g = torch.where(drop[:, None], null[None, :].expand_as(self.global_embedding), self.global_embedding)
        tokens = None
        if self.tokens is not None:
            tokens = torch.where(drop[:, None, None], null[None, None, :].expand_as(self.tokens), self.tokens)
        return replace(self, global_embedding=g, tokens=tokens, null_global=self.null_global | drop)

    def select(self, idx) -> "ForegroundEmbeddings":
        return ForegroundEmbeddings(
            self.global_embedding[idx], self.local_embeddings[idx], self.null_global[idx],
            None if self.tokens is None else self.tokens[idx],
        )


class _ViTBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width)
        self.norm2 = nn.LayerNorm(width)
        self.ff = FeedForward(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))[0]
        return x + self.ff(self.norm2(x))


class ForegroundEncoder(nn.Module):
    """Toy ViT: class token + patch tokens, deep tap for E_g, shallow tap for E_l."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.vit_width
        self.patch_embed = nn.Linear(3 * cfg.patch_size ** 2, w)
        self.cls_token = nn.Parameter(torch.randn(w) * 0.02)
        if cfg.use_pos_embed:
            self.pos_embed = nn.Parameter(torch.randn(1 + cfg.num_patches, w) * 0.02)
        else:
            self.register_parameter("pos_embed", None)
        self.blocks = nn.ModuleList(_ViTBlock(w) for _ in range(cfg.deep_layer_index))
        self.final_norm = nn.LayerNorm(w)
        dims = [w] + [cfg.global_dim] * cfg.mlp_layers
        mlp: list[nn.Module] = []
        for i in range(cfg.mlp_layers):
            mlp.append(nn.Linear(dims[i], dims[i + 1]))
            if i < cfg.mlp_layers - 1:
                mlp.append(nn.GELU())
        self.mlp = nn.Sequential(*mlp)
        self.null_global = nn.Parameter(torch.zeros(cfg.global_dim))

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_size
        n, c, h, w = x.shape
        x = x.reshape(n, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5)
        return x.reshape(n, (h // p) * (w // p), c * p * p)

    def forward(self, fg: torch.Tensor, all_tokens: bool = False) -> ForegroundEmbeddings:
        s = self.cfg.fg_size
        if fg.dim() != 4 or tuple(fg.shape[1:]) != (3, s, s):
            raise ShapeError(f"foreground must be [N,3,{s},{s}], got {tuple(fg.shape)}")
        tok = self.patch_embed(self.patchify(fg))
        cls = self.cls_token.expand(fg.shape[0], 1, -1)
        x = torch.cat([cls, tok], dim=1)
        if self.pos_embed is not None:
            x = x + self.pos_embed
        local = None
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i == self.cfg.shallow_layer_index:
                local = x[:, 1:]
        deep = self.final_norm(x)
        tokens = self.mlp(deep) if all_tokens else None
        g = tokens[:, 0] if all_tokens else self.mlp(deep[:, 0])
        check_finite(g, "global embedding")
        return ForegroundEmbeddings(g, local, tokens=tokens)

    def null_global_embedding(self) -> torch.Tensor:
        return self.null_global


def fg_encode(encoder: ForegroundEncoder, foreground: torch.Tensor) -> ForegroundEmbeddings:
    """Single-image convenience wrapper; returns unbatched ``[d_g]`` / ``[n_p, d_l]`` tensors."""
    if foreground.dim() != 3:
        raise ShapeError("fg_encode expects [3,s,s]")
    e = encoder(foreground[None])
    return ForegroundEmbeddings(e.global_embedding[0], e.local_embeddings[0], torch.zeros((), dtype=torch.bool))


def null_global_embedding(encoder: ForegroundEncoder) -> torch.Tensor:
    return encoder.null_global_embedding()
