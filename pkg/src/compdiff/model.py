"""Full composition model (autoencoder + foreground encoder + U-Net) and checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .encoders import AutoEncoder, EncoderConfig, ForegroundEmbeddings, ForegroundEncoder
from .errors import ConfigError, ShapeError, StateError
from .generator import Ablation, GeneratorConfig, UNet, assemble_input, indicator_matrix
from .numerics import load_tensor_map, save_tensor_map

SCHEMA_VERSION = 1
WEIGHTS_FILE = "weights.cctm"
CONFIG_FILE = "config.json"


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        e, g = self.encoder, self.generator
        if g.latent_size != e.latent_size:
            raise ConfigError(f"generator latent_size {g.latent_size} != encoder latent size {e.latent_size}")
        if g.global_dim != e.global_dim:
            raise ConfigError("generator/encoder global_dim mismatch")
        if g.local_dim != e.local_dim:
            raise ConfigError("generator local_dim must equal the ViT width")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "encoder": asdict(self.encoder), "generator": self.generator.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        return cls(EncoderConfig(**d["encoder"]), GeneratorConfig.from_dict(d["generator"]))

    def with_ablation(self, ablation: str | Ablation) -> "ModelConfig":
        gen = GeneratorConfig.from_dict({**self.generator.to_dict(), "ablation": Ablation(ablation).value})
        return ModelConfig(self.encoder, gen)


def tiny_config(ablation: str | Ablation = Ablation.FULL) -> ModelConfig:
    """32x32 images, 8x8 latents, base 16 channels."""
    enc = EncoderConfig(image_size=32, latent_factor=4, ae_channels=16, fg_size=16, patch_size=4,
                        vit_depth=4, vit_width=32, deep_layer_index=4, shallow_layer_index=2, global_dim=32)
    gen = GeneratorConfig(latent_size=8, base_channels=16, channel_multipliers=(1, 2), attention_resolutions=(8, 4),
                          le_resolutions=(8, 4), p=4, time_embed_dim=64, norm_groups=4, global_dim=32, local_dim=32,
                          ablation=Ablation(ablation))
    return ModelConfig(enc, gen)


def default_config(ablation: str | Ablation = Ablation.FULL) -> ModelConfig:
    return ModelConfig().with_ablation(ablation)


PRESETS = {"tiny": tiny_config, "default": default_config}


class CompositionModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.autoencoder = AutoEncoder(self.cfg.encoder)
            self.fg_encoder = ForegroundEncoder(self.cfg.encoder)
            self.unet = UNet(self.cfg.generator)
        self.step = 0
        self.ready = False

    @property
    def ablation(self) -> Ablation:
        return self.cfg.generator.ablation

    def freeze_autoencoder(self) -> None:
        for p in self.autoencoder.parameters():
            p.requires_grad_(False)

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        out = {}
        for name, p in self.named_parameters():
            if name.startswith("autoencoder."):
                continue
            if name.startswith("fg_encoder.") and not self.cfg.encoder.train_fg_encoder:
                if name != "fg_encoder.null_global":
                    continue
            out[name] = p
        return out

    def encode_latents(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.autoencoder.encode(images)

    def embed(self, foregrounds: torch.Tensor) -> ForegroundEmbeddings:
        return self.fg_encoder(foregrounds, all_tokens=self.ablation.all_tokens)

    def null_embedding(self) -> torch.Tensor:
        return self.fg_encoder.null_global_embedding()

    def predict_noise(self, z_t: torch.Tensor, bg_latent: torch.Tensor, boxes, indicators, t: torch.Tensor,
                      emb: ForegroundEmbeddings, le_mask: torch.Tensor | None = None) -> torch.Tensor:
        n = z_t.shape[0]
        ind = indicator_matrix(indicators, n)
        if not self.ablation.uses_augmentation:
            ind = torch.zeros_like(ind)
        inp = assemble_input(z_t, bg_latent, boxes, ind, t)
        boxes = list(boxes) if isinstance(boxes, (list, tuple)) else [boxes] * n
        return self.unet(inp.stacked(), inp.t, emb, boxes, ind, le_mask)


# ---------------------------------------------------------------------------
# Checkpoints: directory holding a tensor map plus a JSON sidecar
# ---------------------------------------------------------------------------


def save_checkpoint(model: CompositionModel, path: str | Path, optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue
                n = names[id(p)]
                tensors[f"optim.{n}.exp_avg"] = state["exp_avg"]
                tensors[f"optim.{n}.exp_avg_sq"] = state["exp_avg_sq"]
                tensors[f"optim.{n}.step"] = torch.as_tensor(state["step"], dtype=torch.float64).reshape(1)
    save_tensor_map(path / WEIGHTS_FILE, tensors)
    meta = {"model": model.cfg.to_dict(), "step": model.step, "ready": model.ready, **(extra or {})}
    (path / CONFIG_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path, optimizer_factory=None):
    """Load a checkpoint directory; returns the model, or ``(model, optimizer)`` given a factory."""
    path = Path(path)
    if not (path / WEIGHTS_FILE).is_file() or not (path / CONFIG_FILE).is_file():
        raise StateError(f"no checkpoint at {path}")
    meta = json.loads((path / CONFIG_FILE).read_text())
    model = CompositionModel(ModelConfig.from_dict(meta["model"]))
    tensors = load_tensor_map(path / WEIGHTS_FILE)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    own = model.state_dict()
    if set(state) != set(own):
        raise ShapeError("checkpoint entries do not match the model layout")
    for k, v in state.items():
        if tuple(v.shape) != tuple(own[k].shape):
            raise ShapeError(f"checkpoint tensor {k} has shape {tuple(v.shape)}, expected {tuple(own[k].shape)}")
    model.load_state_dict(state)
    model.step = int(meta.get("step", 0))
    model.ready = bool(meta.get("ready", False))
    model.freeze_autoencoder()
    if optimizer_factory is None:
        return model
    opt = optimizer_factory(model)
    params = dict(model.named_parameters())
    for group in opt.param_groups:
        for p in group["params"]:
            n = next(k for k, v in params.items() if v is p)
            if f"optim.{n}.exp_avg" in tensors:
                opt.state[p] = {
                    "step": tensors[f"optim.{n}.step"].reshape(()).clone(),
                    "exp_avg": tensors[f"optim.{n}.exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"optim.{n}.exp_avg_sq"].clone(),
                }
    return model, opt
