"""Controllable U-Net: 11-channel input, global fusion and local enhancement."""
from __future__ import annotations

import math
from collections import OrderedDict
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import LATENT_CHANNELS, ForegroundEmbeddings
from .errors import ConfigError, GeometryError, ShapeError
from .layers import Attention, Conv2d, FeedForward, GroupNorm, timestep_embedding, zero_
from .numerics import DTYPE, bilinear_sample_points, check_finite, group_norm, resize_bilinear

INPUT_CHANNELS = 11

# ---------------------------------------------------------------------------
# Conditioning types
# ---------------------------------------------------------------------------

TASK_NAMES = {
    (0, 0): "blend",
    (1, 0): "harmonize",
    (0, 1): "view",
    (1, 1): "compose",
}


@dataclass(frozen=True)
class Indicator:
    """First bit: change illumination; second bit: change pose."""

    illumination: int
    pose: int

    def __post_init__(self):
        if self.illumination not in (0, 1) or self.pose not in (0, 1):
            raise ConfigError(f"indicator bits must be 0/1, got ({self.illumination},{self.pose})")

    @classmethod
    def parse(cls, text: str) -> "Indicator":
        parts = [s.strip() for s in str(text).replace("(", "").replace(")", "").split(",")]
        if len(parts) != 2:
            raise ConfigError(f"indicator must look like '1,0', got {text!r}")
        try:
            return cls(int(parts[0]), int(parts[1]))
        except ValueError as exc:
            raise ConfigError(f"bad indicator {text!r}") from exc

    @property
    def task(self) -> str:
        return TASK_NAMES[self.as_tuple()]

    def as_tuple(self) -> tuple[int, int]:
        return (self.illumination, self.pose)

    def as_tensor(self) -> torch.Tensor:
        return torch.tensor([float(self.illumination), float(self.pose)], dtype=DTYPE)

    def __str__(self) -> str:
        return f"{self.illumination},{self.pose}"


ALL_INDICATORS = tuple(Indicator(*k) for k in ((0, 0), (1, 0), (0, 1), (1, 1)))


@dataclass(frozen=True)
class BoundingBox:
    """Box in normalised image coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError("non-finite box coordinates")
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise GeometryError(f"invalid box {vals}")

    @classmethod
    def parse(cls, text: str) -> "BoundingBox":
        try:
            vals = [float(s) for s in str(text).split(",")]
        except ValueError as exc:
            raise ConfigError(f"bad box {text!r}") from exc
        if len(vals) != 4:
            raise ConfigError(f"box needs four numbers, got {text!r}")
        return cls(*vals)

    @classmethod
    def from_pixels(cls, r0: int, r1: int, c0: int, c1: int, h: int, w: int) -> "BoundingBox":
        return cls(c0 / w, r0 / h, c1 / w, r1 / h)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def to_pixels(self, h: int, w: int) -> tuple[int, int, int, int]:
        """Rows/cols ``(r0, r1, c0, c1)`` whose pixel centres fall inside the box.

        Never empty: a box thinner than one pixel keeps the pixel nearest its edge.
        """
        def span(a: float, b: float, n: int) -> tuple[int, int]:
            lo = min(max(math.ceil(a * n - 0.5), 0), n - 1)
            hi = min(max(math.ceil(b * n - 0.5), 0), n)
            return lo, max(hi, lo + 1)

        r0, r1 = span(self.y0, self.y1, h)
        c0, c1 = span(self.x0, self.x1, w)
        return r0, r1, c0, c1

    def mask(self, h: int, w: int) -> torch.Tensor:
        r0, r1, c0, c1 = self.to_pixels(h, w)
        m = torch.zeros(1, h, w, dtype=DTYPE)
        m[:, r0:r1, c0:c1] = 1.0
        return m


class Ablation(str, Enum):
    GLOBAL_ALL_TOKENS = "global_only_all_tokens"
    GLOBAL_CLASS = "global_only_class"
    AUG = "+aug"
    LE_NO_FM = "+LE_no_FM"
    FULL = "full"

    @property
    def all_tokens(self) -> bool:
        return self is Ablation.GLOBAL_ALL_TOKENS

    @property
    def uses_augmentation(self) -> bool:
        """Rows without augmentation also train without the indicator."""
        return self not in (Ablation.GLOBAL_ALL_TOKENS, Ablation.GLOBAL_CLASS)

    @property
    def local_enhancement(self) -> bool:
        return self in (Ablation.LE_NO_FM, Ablation.FULL)

    @property
    def modulation(self) -> bool:
        return self is Ablation.FULL


@dataclass(frozen=True)
class GeneratorConfig:
    latent_size: int = 16
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_resolutions: tuple[int, ...] = (16, 8)
    le_resolutions: tuple[int, ...] = (16, 8)
    p: int = 8
    time_embed_dim: int = 128
    norm_groups: int = 8
    global_dim: int = 64
    local_dim: int = 64
    cfg_drop_prob: float = 0.2
    cfg_null_local: bool = False
    ablation: Ablation = Ablation.FULL

    def __post_init__(self):
        object.__setattr__(self, "ablation", Ablation(self.ablation))
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "attention_resolutions", tuple(self.attention_resolutions))
        object.__setattr__(self, "le_resolutions", tuple(self.le_resolutions))
        if not set(self.le_resolutions) <= set(self.attention_resolutions):
            raise ConfigError("le_resolutions must be a subset of attention_resolutions")
        if self.p < 2:
            raise ConfigError("p must be >= 2")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ConfigError("cfg_drop_prob must lie in [0, 1]")
        for m in self.channel_multipliers:
            if (self.base_channels * m) % self.norm_groups:
                raise ConfigError("norm_groups must divide every level's channel count")
        if self.latent_size % (2 ** max(len(self.channel_multipliers) - 1, 0)):
            raise ConfigError("latent_size not divisible by the U-Net's total downsampling")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = self.ablation.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)

    @property
    def level_resolutions(self) -> list[int]:
        return [self.latent_size // 2 ** i for i in range(len(self.channel_multipliers))]


@dataclass
class UNetInput:
    z_t: torch.Tensor
    bg_latent: torch.Tensor
    mask_ds: torch.Tensor
    indicator_map: torch.Tensor
    t: torch.Tensor

    def stacked(self) -> torch.Tensor:
        x = torch.cat([self.z_t, self.bg_latent, self.mask_ds, self.indicator_map], dim=-3)
        if x.shape[-3] != INPUT_CHANNELS:
            raise ShapeError(f"stacked input has {x.shape[-3]} channels")
        return x


def _as_list(x, n: int) -> list:
    if isinstance(x, (list, tuple)) and not isinstance(x, (Indicator, BoundingBox)):
        if len(x) != n:
            raise ShapeError(f"expected {n} entries, got {len(x)}")
        return list(x)
    return [x] * n


def indicator_matrix(indicators, n: int) -> torch.Tensor:
    if isinstance(indicators, torch.Tensor):
        if tuple(indicators.shape) != (n, 2):
            raise ShapeError("indicator tensor must be [N,2]")
        return indicators.to(DTYPE)
    return torch.stack([i.as_tensor() for i in _as_list(indicators, n)])


def assemble_input(z_t: torch.Tensor, bg_latent: torch.Tensor, box, indicator, t=0) -> UNetInput:
    """Build the U-Net input; accepts a single ``[4,h,w]`` sample or a batch ``[N,4,h,w]``.

    The mask channel is the box indicator sampled at latent pixel centres
    (nearest-neighbour, so it stays binary).
    """
    if z_t.shape != bg_latent.shape:
        raise ShapeError(f"z_t {tuple(z_t.shape)} and background latent {tuple(bg_latent.shape)} differ")
    single = z_t.dim() == 3
    z = z_t[None] if single else z_t
    bg = bg_latent[None] if single else bg_latent
    if z.dim() != 4 or z.shape[1] != LATENT_CHANNELS:
        raise ShapeError(f"latent must have {LATENT_CHANNELS} channels")
    n, _, h, w = z.shape
    boxes = _as_list(box, n)
    mask = torch.stack([b.mask(h, w) for b in boxes])
    ind = indicator_matrix(indicator, n)
    ind_map = ind[:, :, None, None].expand(n, 2, h, w)
    tt = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if tt.numel() == 1:
        tt = tt.expand(n)
    elif tt.numel() != n:
        raise ShapeError(f"expected {n} timesteps, got {tt.numel()}")
    if single:
        return UNetInput(z_t, bg_latent, mask[0], ind_map[0], tt)
    return UNetInput(z, bg, mask, ind_map, tt)


# ---------------------------------------------------------------------------
# RoIAlign and local enhancement
# ---------------------------------------------------------------------------


def roi_align(fmap: torch.Tensor, box: BoundingBox, p: int) -> torch.Tensor:
    """``p x p`` bin-centre bilinear samples of ``fmap[c,h,w]`` inside ``box`` (one sample per bin)."""
    _, h, w = fmap.shape
    x0, x1 = min(max(box.x0, 0.0), 1.0) * w, min(max(box.x1, 0.0), 1.0) * w
    y0, y1 = min(max(box.y0, 0.0), 1.0) * h, min(max(box.y1, 0.0), 1.0) * h
    if x1 <= x0 or y1 <= y0:
        raise GeometryError("degenerate box after clamping")
    k = torch.arange(p, dtype=DTYPE) + 0.5
    xs = x0 + k * ((x1 - x0) / p)
    ys = y0 + k * ((y1 - y0) / p)
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return bilinear_sample_points(fmap, xx, yy)


class FeatureModulation(nn.Module):
    """Spatially-aware scale/shift of normalised synthesized features.

    out = norm(F) * conv_gamma(E) + conv_beta(E), with E the attention-aligned
    local embedding map ``reshape(A @ E_l)``.
    """

    def __init__(self, channels: int, local_dim: int, groups: int):
        super().__init__()
        self.groups = groups
        self.conv_gamma = Conv2d(local_dim, channels, 3)
        self.conv_beta = Conv2d(local_dim, channels, 3)

    @staticmethod
    def aligned_embedding(attn: torch.Tensor, local: torch.Tensor, p: int) -> torch.Tensor:
        aligned = torch.matmul(attn, local)  # [N, p*p, d_l]
        return aligned.transpose(1, 2).reshape(aligned.shape[0], aligned.shape[2], p, p)

    def forward(self, ftilde: torch.Tensor, attn: torch.Tensor, local: torch.Tensor) -> torch.Tensor:
        e = self.aligned_embedding(attn, local, ftilde.shape[-1])
        return group_norm(ftilde, self.groups) * self.conv_gamma(e) + self.conv_beta(e)


def feature_modulation(module: FeatureModulation, ftilde: torch.Tensor, attn: torch.Tensor,
                       local: torch.Tensor) -> torch.Tensor:
    """Unbatched entry point: ``ftilde[c,p,p]``, ``attn[p*p,n_p]``, ``local[n_p,d_l]``."""
    if attn.shape[0] != ftilde.shape[-1] * ftilde.shape[-2] or attn.shape[1] != local.shape[0]:
        raise ShapeError("feature_modulation: inconsistent shapes")
    return module(ftilde[None], attn[None], local[None])[0]


class LocalEnhancement(nn.Module):
    def __init__(self, channels: int, local_dim: int, p: int, groups: int, modulation: bool = True):
        super().__init__()
        self.p = p
        self.fuse = Conv2d(channels + 2, channels, 3)
        self.cross = Attention(channels, local_dim)
        self.modulation = FeatureModulation(channels, local_dim, groups) if modulation else None
        self.out = zero_(Conv2d(channels, channels, 1))

    def synthesize(self, fmap: torch.Tensor, local: torch.Tensor, indicators: torch.Tensor,
                   boxes: Sequence[BoundingBox], with_modulation: bool | None = None):
        """Box-local synthesized features ``[N,c,p,p]`` and attention maps ``[N,p*p,n_p]``."""
        p = self.p
        n, c = fmap.shape[:2]
        rois = torch.stack([roi_align(fmap[i], boxes[i], p) for i in range(n)])
        ind_map = indicators[:, :, None, None].expand(n, 2, p, p)
        fused = self.fuse(torch.cat([rois, ind_map], dim=1))
        fbar = fused.flatten(2).transpose(1, 2)
        synth, attn = self.cross(fbar, local)
        ftilde = synth.transpose(1, 2).reshape(n, c, p, p)
        use_fm = self.modulation is not None if with_modulation is None else with_modulation
        if use_fm:
            if self.modulation is None:
                raise ConfigError("this module was built without feature modulation")
            ftilde = self.modulation(ftilde, attn, local)
        return self.out(ftilde), attn

    def forward(self, fmap: torch.Tensor, local: torch.Tensor, indicators: torch.Tensor,
                boxes: Sequence[BoundingBox], with_modulation: bool | None = None,
                return_attention: bool = False):
        h, w = fmap.shape[-2:]
        delta, attn = self.synthesize(fmap, local, indicators, boxes, with_modulation)
        out = fmap.clone()
        for i, box in enumerate(boxes):
            r0, r1, c0, c1 = box.to_pixels(h, w)
            patch = resize_bilinear(delta[i], (r1 - r0, c1 - c0))
            out[i, :, r0:r1, c0:c1] = out[i, :, r0:r1, c0:c1] + patch
        return (out, attn) if return_attention else out


def local_enhancement(module: LocalEnhancement, fmap: torch.Tensor, local: torch.Tensor, indicator: Indicator,
                      box: BoundingBox, with_modulation: bool | None = None):
    """Unbatched: ``fmap[c,h,w]``, ``local[n_p,d_l]``; returns ``(enhanced, attention[p*p,n_p])``."""
    out, attn = module(fmap[None], local[None], indicator.as_tensor()[None], [box], with_modulation,
                       return_attention=True)
    return out[0], attn[0]


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------


class GlobalFusion(nn.Module):
    """Cross-attention from feature tokens to the global embedding (context length 1)."""

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = Attention(channels, context_dim, zero_out=True)

    def forward(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        return tokens + self.attn(self.norm(tokens), context)[0]


def global_fusion(module: GlobalFusion, feat_tokens: torch.Tensor, global_embedding: torch.Tensor) -> torch.Tensor:
    """Unbatched: ``feat_tokens[hw,c]`` fused with ``global_embedding[d_g]``."""
    return module(feat_tokens[None], global_embedding.reshape(1, 1, -1))[0]


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = GroupNorm(groups, cin)
        self.conv1 = Conv2d(cin, cout)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = GroupNorm(groups, cout)
        self.conv2 = Conv2d(cout, cout)
        self.skip = Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + (x if self.skip is None else self.skip(x))


class TransformerBlock(nn.Module):
    """Self-attention, global fusion cross-attention, feed-forward."""

    def __init__(self, channels: int, context_dim: int, groups: int):
        super().__init__()
        self.norm = GroupNorm(groups, channels)
        self.proj_in = Conv2d(channels, channels, 1)
        self.norm1 = nn.LayerNorm(channels)
        self.self_attn = Attention(channels)
        self.fusion = GlobalFusion(channels, context_dim)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)
        self.proj_out = zero_(Conv2d(channels, channels, 1))

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        tok = self.proj_in(self.norm(x)).flatten(2).transpose(1, 2)
        tok = tok + self.self_attn(self.norm1(tok))[0]
        tok = self.fusion(tok, context)
        tok = tok + self.ff(self.norm3(tok))
        return x + self.proj_out(tok.transpose(1, 2).reshape(n, c, h, w))


class _Stage(nn.Module):
    """Residual block, optional transformer block, optional local enhancement."""

    def __init__(self, cin: int, cout: int, res: int, cfg: GeneratorConfig):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.time_embed_dim, cfg.norm_groups)
        self.tfm = TransformerBlock(cout, cfg.global_dim, cfg.norm_groups) if res in cfg.attention_resolutions else None
        self.le = None
        if cfg.ablation.local_enhancement and res in cfg.le_resolutions:
            self.le = LocalEnhancement(cout, cfg.local_dim, cfg.p, cfg.norm_groups, cfg.ablation.modulation)

    def forward(self, x, temb, context, local, indicators, boxes, le_mask=None):
        x = self.res(x, temb)
        if self.tfm is not None:
            x = self.tfm(x, context)
        if self.le is not None:
            enhanced = self.le(x, local, indicators, boxes)
            x = enhanced if le_mask is None else torch.where(le_mask[:, None, None, None], enhanced, x)
        return x


class UNet(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_channels
        ted = cfg.time_embed_dim
        self.time_embed = nn.Sequential(nn.Linear(base, ted), nn.SiLU(), nn.Linear(ted, ted))
        self.conv_in = Conv2d(INPUT_CHANNELS, base)
        chans = [base * m for m in cfg.channel_multipliers]
        res = cfg.level_resolutions
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = base
        for i, c in enumerate(chans):
            self.down.append(_Stage(prev, c, res[i], cfg))
            if i < len(chans) - 1:
                self.downsample.append(Conv2d(c, c, 3, stride=2))
            prev = c
        self.mid = _Stage(prev, prev, res[-1], cfg) if chans else None
        self.mid_res = ResBlock(prev, prev, ted, cfg.norm_groups) if chans else None
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(chans))):
            self.up.append(_Stage(2 * chans[i], chans[i], res[i], cfg))
            if i > 0:
                self.upsample.append(Conv2d(chans[i], chans[i - 1]))
        self.norm_out = GroupNorm(cfg.norm_groups, base)
        self.conv_out = zero_(Conv2d(base, LATENT_CHANNELS))

    def forward(self, x: torch.Tensor, t: torch.Tensor, emb: ForegroundEmbeddings, boxes: Sequence[BoundingBox],
                indicators: torch.Tensor, le_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != INPUT_CHANNELS:
            raise ShapeError(f"U-Net input must be [N,{INPUT_CHANNELS},h,w], got {tuple(x.shape)}")
        temb = self.time_embed(timestep_embedding(t, self.cfg.base_channels))
        context = emb.context()
        local = emb.local_embeddings
        h = self.conv_in(x)
        skips = []
        for i, stage in enumerate(self.down):
            h = stage(h, temb, context, local, indicators, boxes, le_mask)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        if self.mid is not None:
            h = self.mid(h, temb, context, local, indicators, boxes, le_mask)
            h = self.mid_res(h, temb)
        for j, stage in enumerate(self.up):
            h = stage(torch.cat([h, skips.pop()], dim=1), temb, context, local, indicators, boxes, le_mask)
            if j < len(self.upsample):
                h = self.upsample[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        out = self.conv_out(F.silu(self.norm_out(h)))
        return check_finite(out, "U-Net output")


def unet_forward(unet: UNet, inp: UNetInput, emb: ForegroundEmbeddings, box) -> torch.Tensor:
    """Predict noise for a single or batched :class:`UNetInput`."""
    x = inp.stacked()
    single = x.dim() == 3
    ind_map = inp.indicator_map
    if single:
        x, ind_map = x[None], ind_map[None]
    if emb.global_embedding.dim() == 1:
        emb = ForegroundEmbeddings(emb.global_embedding[None], emb.local_embeddings[None],
                                   emb.null_global.reshape(1), None if emb.tokens is None else emb.tokens[None])
    n = x.shape[0]
    boxes = _as_list(box, n)
    indicators = ind_map[:, :, 0, 0]
    out = unet(x, inp.t.reshape(-1).expand(n), emb, boxes, indicators)
    return out[0] if single else out


def parameter_census(module: nn.Module, depth: int = 1) -> "OrderedDict[str, int]":
    """Parameter counts grouped by the first ``depth`` components of the module path."""
    census: OrderedDict[str, int] = OrderedDict()
    for name, p in module.named_parameters():
        key = ".".join(name.split(".")[:depth])
        census[key] = census.get(key, 0) + p.numel()
    return census


def count_parameters(cfg: GeneratorConfig | nn.Module) -> int:
    module = UNet(cfg) if isinstance(cfg, GeneratorConfig) else cfg
    return sum(p.numel() for p in module.parameters())
