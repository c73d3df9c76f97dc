"""Reusable experiment drivers shared by scripts/ and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .data_pipeline import TrainingTuple, build_tuples, make_sources
from .diffusion import Batch, SamplerConfig, fixed_loss, sample, train
from .encoders import train_autoencoder
from .generator import Indicator
from .model import CompositionModel, ModelConfig, save_checkpoint, tiny_config


def overfit_tuples(cfg: ModelConfig, seed: int = 0, n_sources: int = 2) -> list[TrainingTuple]:
    """``n_sources`` synthetic sources, four indicator tuples each."""
    e = cfg.encoder
    return build_tuples(make_sources(n_sources, seed, e.image_size), seed, e.fg_size)


def pretrain_autoencoder(model: CompositionModel, tuples: list[TrainingTuple], steps: int = 400,
                         seed: int = 0) -> list[float]:
    """Reconstruction pretraining on every image the generator will see, then freeze."""
    batch = Batch.from_tuples(tuples)
    images = torch.cat([batch.composite, batch.background])
    losses = train_autoencoder(model.autoencoder, images, steps=steps, seed=seed)
    model.freeze_autoencoder()
    return losses


@dataclass
class OverfitResult:
    initial_loss: float
    final_loss: float
    step_losses: list[float]
    sample_l2: float
    ae_mae: float
    seconds: float
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.final_loss / self.initial_loss


def overfit_run(steps: int = 2000, lr: float = 1e-3, seed: int = 0, cfg: ModelConfig | None = None,
                ae_steps: int = 400, sample_steps: int = 50, out_dir: str | Path | None = None,
                log_path: str | Path | None = None) -> OverfitResult:
    """Train the tiny model on 8 tuples and probe indicator control from one seed."""
    start = time.perf_counter()
    cfg = cfg or tiny_config()
    tuples = overfit_tuples(cfg, seed)
    model = CompositionModel(cfg, seed=seed)
    pretrain_autoencoder(model, tuples, ae_steps, seed)
    data = Batch.from_tuples(tuples).encode(model)
    with torch.no_grad():
        rec = model.autoencoder.decode(data.z0)
    ae_mae = float((rec - data.composite).abs().mean() / 2)  # in [0, 1] units

    initial = fixed_loss(model, data, seed)
    per_epoch = -(-len(data) // 8)
    result = train(model, data, epochs=-(-steps // per_epoch), lr=lr, batch=8, seed=seed, log_path=log_path)
    final = fixed_loss(model, data, seed)

    tp = tuples[0]
    bg = torch.from_numpy(tp.I_b) * 2 - 1
    fg = torch.from_numpy(tp.I_f) * 2 - 1
    sampler = SamplerConfig(ddim_steps=sample_steps)
    a = sample(model, bg, fg, tp.B, Indicator(0, 0), sampler, seed=seed)
    b = sample(model, bg, fg, tp.B, Indicator(1, 1), sampler, seed=seed)
    l2 = float(torch.linalg.vector_norm(a - b))
    ckpt = save_checkpoint(model, out_dir) if out_dir is not None else None
    return OverfitResult(initial, final, result.step_losses, l2, ae_mae, time.perf_counter() - start, ckpt)
