"""Noise schedule, noise-prediction objective, DDIM sampling with guidance, training loop."""
from __future__ import annotations

import hashlib
import json
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .encoders import LatentCode
from .errors import ConfigError, ShapeError, StateError, TrainingError
from .generator import BoundingBox, Indicator, indicator_matrix
from .model import CompositionModel
from .numerics import DTYPE, Rng, check_finite

log = logging.getLogger(__name__)


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    SCALED_LINEAR = "scaled_linear"


@dataclass(frozen=True)
class NoiseSchedule:
    betas: torch.Tensor
    alphas_cumprod: torch.Tensor
    kind: ScheduleKind = ScheduleKind.SCALED_LINEAR

    def __post_init__(self):
        b, a = self.betas, self.alphas_cumprod
        if b.dim() != 1 or b.numel() == 0 or a.shape != b.shape:
            raise ConfigError("betas/alphas_cumprod must be equal-length 1-d tensors")
        if not (bool((b > 0).all()) and bool((b < 1).all())):
            raise ConfigError("betas must lie in (0, 1)")
        if bool((b[1:] < b[:-1]).any()):
            raise ConfigError("betas must be non-decreasing")
        if not (bool((a > 0).all()) and bool((a <= 1).all())) or bool((a[1:] >= a[:-1]).any()):
            raise ConfigError("alphas_cumprod must be strictly decreasing in (0, 1]")

    @classmethod
    def from_betas(cls, betas, kind: ScheduleKind = ScheduleKind.LINEAR) -> "NoiseSchedule":
        b = torch.as_tensor(betas, dtype=DTYPE).reshape(-1)
        return cls(b, torch.cumprod(1.0 - b, dim=0), ScheduleKind(kind))

    @property
    def T(self) -> int:
        return self.betas.numel()

    def alpha_bar(self, t) -> torch.Tensor:
        """ᾱ at integer index ``t``; ``t == -1`` means the clean end (ᾱ = 1)."""
        tt = torch.as_tensor(t, dtype=torch.long)
        if bool((tt < -1).any()) or bool((tt >= self.T).any()):
            raise ConfigError(f"timestep {t} outside [0, {self.T})")
        padded = torch.cat([torch.ones(1, dtype=DTYPE), self.alphas_cumprod])
        return padded[tt + 1]


def make_schedule(kind: str | ScheduleKind = ScheduleKind.SCALED_LINEAR, T: int = 1000,
                  beta_start: float = 0.00085, beta_end: float = 0.012) -> NoiseSchedule:
    kind = ScheduleKind(kind)
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not 0 < beta_start < beta_end < 1:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if kind is ScheduleKind.LINEAR:
        betas = torch.linspace(beta_start, beta_end, T, dtype=DTYPE)
    else:
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=DTYPE) ** 2
    return NoiseSchedule.from_betas(betas, kind)


_DEFAULT_SCHEDULE: NoiseSchedule | None = None


def default_schedule() -> NoiseSchedule:
    global _DEFAULT_SCHEDULE
    if _DEFAULT_SCHEDULE is None:
        _DEFAULT_SCHEDULE = make_schedule()
    return _DEFAULT_SCHEDULE


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if v.dim() == 0:
        return v
    return v.reshape(-1, *([1] * (like.dim() - 1)))


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps; ``t`` scalar or one per batch row."""
    if isinstance(z0, LatentCode):
        z0 = z0.values
    if eps.shape != z0.shape:
        raise ShapeError("eps must match z0")
    tt = torch.as_tensor(t, dtype=torch.long)
    if bool((tt < 0).any()):
        raise ConfigError(f"timestep {t} outside [0, {sched.T})")
    a = _bcast(sched.alpha_bar(tt), z0)
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


def cfg_combine(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, s: float) -> torch.Tensor:
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError("guidance inputs differ in shape")
    return eps_uncond + s * (eps_cond - eps_uncond)


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int, sched: NoiseSchedule,
              eta: float = 0.0, noise: torch.Tensor | None = None) -> torch.Tensor:
    if t_prev >= t:
        raise ConfigError("t_prev must precede t")
    a_t = sched.alpha_bar(t)
    a_prev = sched.alpha_bar(t_prev)
    pred_x0 = (z_t - (1 - a_t).sqrt() * eps_hat) / a_t.sqrt()
    if eta == 0.0:
        return a_prev.sqrt() * pred_x0 + (1 - a_prev).sqrt() * eps_hat
    sigma = eta * ((1 - a_prev) / (1 - a_t)).sqrt() * (1 - a_t / a_prev).sqrt()
    if noise is None:
        raise ConfigError("eta > 0 needs a noise tensor")
    return a_prev.sqrt() * pred_x0 + (1 - a_prev - sigma ** 2).sqrt() * eps_hat + sigma * noise


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Descending, evenly spaced training timesteps starting at 0."""
    if not 1 <= steps <= T:
        raise ConfigError(f"ddim_steps must lie in [1, {T}]")
    stride = T // steps
    return [i * stride for i in range(steps)][::-1]


@dataclass(frozen=True)
class SamplerConfig:
    ddim_steps: int = 50
    guidance_scale: float = 5.0
    eta: float = 0.0


def initial_noise(seed: int, shape: Sequence[int]) -> torch.Tensor:
    return Rng(seed, ("sample", "z_T")).normal_tensor(shape)


@torch.no_grad()
def sample(model: CompositionModel | None, background: torch.Tensor, foreground: torch.Tensor, box: BoundingBox,
           indicator: Indicator, sampler: SamplerConfig = SamplerConfig(), seed: int = 0,
           sched: NoiseSchedule | None = None, return_latent: bool = False, trace: dict | None = None):
    """Guided DDIM sampling of one composite; images are ``[3,H,W]`` in [-1, 1].

    ``trace``, when given, receives the SHA-256 of the initial noise z_T.
    """
    if model is None or not model.ready:
        raise StateError("sampling needs a trained checkpoint")
    sched = sched or default_schedule()
    if background.dim() != 3 or foreground.dim() != 3:
        raise ShapeError("sample expects unbatched [3,H,W] images")
    bg_lat = model.encode_latents(background[None])
    emb = model.embed(foreground[None])
    null_emb = emb.with_null(model.null_embedding(), torch.tensor([True]))
    le_mask = torch.tensor([False]) if model.cfg.generator.cfg_null_local else None
    ind = indicator_matrix([indicator], 1)
    z = initial_noise(seed, bg_lat.shape)
    if trace is not None:
        trace["noise_sha256"] = hashlib.sha256(z.numpy().tobytes()).hexdigest()
    steps = ddim_timesteps(sched.T, sampler.ddim_steps)
    noise_rng = Rng(seed, ("sample", "eta"))
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else -1
        tt = torch.tensor([t])
        e_c = model.predict_noise(z, bg_lat, [box], ind, tt, emb)
        e_u = model.predict_noise(z, bg_lat, [box], ind, tt, null_emb, le_mask)
        eps = cfg_combine(e_u, e_c, sampler.guidance_scale)
        noise = noise_rng.substream(i).normal_tensor(z.shape) if sampler.eta else None
        z = ddim_step(z, eps, t, t_prev, sched, sampler.eta, noise)
    check_finite(z, "sampled latent")
    image = model.autoencoder.decode(z)[0]
    return (image, z[0]) if return_latent else image


# ---------------------------------------------------------------------------
# Objective and training
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Model-space tensors for a list of training tuples (images in [-1, 1])."""

    composite: torch.Tensor
    background: torch.Tensor
    foreground: torch.Tensor
    boxes: list[BoundingBox]
    indicators: torch.Tensor
    z0: torch.Tensor | None = None
    bg_latent: torch.Tensor | None = None

    @classmethod
    def from_tuples(cls, tuples: Sequence) -> "Batch":
        def stack(attr):
            return torch.stack([torch.as_tensor(np.asarray(getattr(tp, attr)), dtype=DTYPE) * 2 - 1 for tp in tuples])

        return cls(
            composite=stack("I_c"),
            background=stack("I_b"),
            foreground=stack("I_f"),
            boxes=[tp.B for tp in tuples],
            indicators=indicator_matrix([tp.S for tp in tuples], len(tuples)),
        )

    def __len__(self) -> int:
        return self.composite.shape[0]

    def encode(self, model: CompositionModel) -> "Batch":
        self.z0 = model.encode_latents(self.composite)
        self.bg_latent = model.encode_latents(self.background)
        return self

    def select(self, idx: Sequence[int]) -> "Batch":
        ix = torch.as_tensor(list(idx), dtype=torch.long)
        return Batch(self.composite[ix], self.background[ix], self.foreground[ix], [self.boxes[i] for i in idx],
                     self.indicators[ix], None if self.z0 is None else self.z0[ix],
                     None if self.bg_latent is None else self.bg_latent[ix])


def sample_cfg_drop(rng: Rng, n: int, p: float) -> torch.Tensor:
    return torch.from_numpy(rng.bernoulli(p, n))


def loss_g(model: CompositionModel, batch: Batch, t: torch.Tensor, eps: torch.Tensor, rng: Rng | None = None,
           drop: torch.Tensor | None = None, sched: NoiseSchedule | None = None,
           reduction: str = "mean") -> torch.Tensor:
    """Noise-prediction MSE with classifier-free dropout of the global embedding."""
    sched = sched or default_schedule()
    z0 = batch.z0 if batch.z0 is not None else model.encode_latents(batch.composite)
    bg = batch.bg_latent if batch.bg_latent is not None else model.encode_latents(batch.background)
    n = z0.shape[0]
    if drop is None:
        p = model.cfg.generator.cfg_drop_prob
        drop = sample_cfg_drop(rng, n, p) if rng is not None else torch.zeros(n, dtype=torch.bool)
    z_t = forward_noise(z0, t, eps, sched)
    emb = model.embed(batch.foreground).with_null(model.null_embedding(), drop)
    le_mask = ~drop if model.cfg.generator.cfg_null_local else None
    pred = model.predict_noise(z_t, bg, batch.boxes, batch.indicators, torch.as_tensor(t), emb, le_mask)
    err = ((eps - pred) ** 2).flatten(1).mean(dim=1)
    return err.mean() if reduction == "mean" else err


def balanced_order(indicators: Sequence[tuple[int, int]], rng: Rng) -> list[int]:
    """Round-robin over the four tasks, shuffled within each task."""
    groups: dict[tuple[int, int], list[int]] = {}
    for i, s in enumerate(indicators):
        groups.setdefault(tuple(s), []).append(i)
    queues = []
    for key in sorted(groups):
        idx = groups[key]
        queues.append([idx[j] for j in rng.substream(str(key)).permutation(len(idx))])
    order = []
    while any(queues):
        for q in queues:
            if q:
                order.append(q.pop(0))
    return order


@dataclass
class TrainResult:
    loss_curve: list[float]
    step_losses: list[float] = field(default_factory=list)


DIVERGENCE_LIMIT = 1e3


def train(model: CompositionModel, dataset: Sequence | Batch, epochs: int, lr: float = 1e-4, batch: int = 8,
          seed: int = 0, sched: NoiseSchedule | None = None, log_path: str | Path | None = None,
          optimizer: torch.optim.Optimizer | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on :func:`loss_g`; returns per-epoch mean loss (and per-step losses).

    Randomness for step ``k`` comes from the ``("train", k)`` sub-stream, so a
    resumed run draws exactly what an uninterrupted run would.
    """
    sched = sched or default_schedule()
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    data = dataset if isinstance(dataset, Batch) else Batch.from_tuples(dataset)
    model.freeze_autoencoder()
    if data.z0 is None:
        data.encode(model)
    params = list(model.trainable_parameters().values())
    opt = optimizer or torch.optim.Adam(params, lr=lr)
    root = Rng(seed, ("train",))
    ind_tuples = [tuple(int(v) for v in row) for row in data.indicators.tolist()]
    log_fh = open(log_path, "a") if log_path else None
    curve, step_losses = [], []
    start_epoch = model.step // max(1, -(-len(data) // batch))
    try:
        for epoch in range(start_epoch, start_epoch + epochs):
            order = balanced_order(ind_tuples, root.substream("epoch", epoch))
            epoch_losses = []
            for b0 in range(0, len(order), batch):
                idx = order[b0:b0 + batch]
                mb = data.select(idx)
                step_rng = root.substream("step", model.step)
                t = torch.from_numpy(step_rng.substream("t").integers(0, sched.T, len(idx)))
                eps = step_rng.substream("eps").normal_tensor(mb.z0.shape)
                per = loss_g(model, mb, t, eps, rng=step_rng.substream("drop"), sched=sched, reduction="none")
                loss = per.mean()
                value = loss.item()
                if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                    raise TrainingError(f"loss diverged at step {model.step}: {value}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                if log_fh is not None:
                    for key in sorted(set(ind_tuples[i] for i in idx)):
                        sel = [j for j, i in enumerate(idx) if ind_tuples[i] == key]
                        rec = {"step": model.step, "epoch": epoch, "loss": per[sel].mean().item(),
                               "task_indicator": list(key)}
                        log_fh.write(json.dumps(rec) + "\n")
                step_losses.append(value)
                epoch_losses.append(value)
                if on_step is not None:
                    on_step(model.step, value)
                model.step += 1
            curve.append(float(np.mean(epoch_losses)))
            log.debug("epoch %d loss %.5f", epoch, curve[-1])
    finally:
        if log_fh is not None:
            log_fh.close()
    model.ready = True
    return TrainResult(curve, step_losses)


def fixed_loss(model: CompositionModel, dataset: Sequence | Batch, seed: int = 0, draws: int = 32,
               sched: NoiseSchedule | None = None) -> float:
    """Mean conditional loss over a frozen set of ``(t, eps)`` draws per tuple.

    The draws depend only on ``seed`` so values before and after training are
    directly comparable.
    """
    sched = sched or default_schedule()
    data = dataset if isinstance(dataset, Batch) else Batch.from_tuples(dataset)
    if data.z0 is None:
        data.encode(model)
    rng = Rng(seed, ("fixed_loss",))
    n = len(data)
    total = 0.0
    with torch.no_grad():
        for d in range(draws):
            r = rng.substream(d)
            t = torch.from_numpy(r.substream("t").integers(0, sched.T, n))
            eps = r.substream("eps").normal_tensor(data.z0.shape)
            total += float(loss_g(model, data, t, eps, drop=torch.zeros(n, dtype=torch.bool), sched=sched))
    return total / draws
