"""Training: the autoencoder under standard augmentation, then each prior
under phased (or baseline) augmentation with per-phase optimizer resets."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, fields
from decimal import Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import augment
from .augment import PhaseSchedule, augment_batch, policy_for_iteration, scaled_length
from .checkpoint import Checkpoint
from .pixelcnn import PixelPrior, PriorConfig, nll_loss
from .seeding import derive_seed, numpy_rng, torch_generator
from .tensor_core import Adam, clip_grad_norm
from .vqvae import ConfigError, HierarchicalVQVAE, VQConfig, images_to_tensor

log = logging.getLogger(__name__)

VQVAE_ITERATIONS = 4000
METRICS_HEADER = ("iteration", "phase", "lr", "loss")


class TrainingError(RuntimeError):
    """Raised on a non-finite loss; carries a diagnostic checkpoint."""

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    batch_size: int = 32
    scale: float = 1.0
    vqvae_scale: float = 0.0
    lr_factors: tuple = (1, 10, 40, 100, 500, 1000)
    seed: int = 0
    aug_mode: str = "phased"
    resolution: int = 32
    in_channels: int = 3
    top_grid: int = 4
    num_codes: int = 256
    code_dim: int = 64
    vq_hidden: int = 32
    res_blocks: int = 2
    beta: float = 0.25
    gamma: float = 0.99
    epsilon_smoothing: float = 1e-5
    prior_channels: int = 32
    top_layers: int = 4
    bottom_layers: int = 6
    attention_every: int = 2
    dropout: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    grad_clip: float = 10.0

    def __post_init__(self):
        self.lr_factors = tuple(self.lr_factors)
        if len(self.lr_factors) != len(augment.DEFAULT_LENGTHS):
            raise ConfigError("lr_factors needs one entry per phase")
        if self.scale <= 0 or self.vqvae_scale < 0:
            raise ConfigError("scale must be positive")
        if self.aug_mode not in augment.MODES:
            raise ConfigError(f"aug_mode must be one of {augment.MODES}")
        if math.floor(sum(augment.DEFAULT_LENGTHS) * self.scale) < len(self.lr_factors):
            raise ConfigError("scaled prior iterations must cover every phase")

    @property
    def vqvae_iterations(self) -> int:
        return scaled_length(VQVAE_ITERATIONS, self.vqvae_scale or self.scale)

    @property
    def prior_iterations(self) -> int:
        return PhaseSchedule.for_mode(self.aug_mode, self.scale).total

    def vq_config(self) -> VQConfig:
        return VQConfig(resolution=self.resolution, in_channels=self.in_channels,
                        top_grid=self.top_grid, bottom_grid=2 * self.top_grid,
                        num_codes=self.num_codes, code_dim=self.code_dim, hidden=self.vq_hidden,
                        res_blocks=self.res_blocks, beta=self.beta, gamma=self.gamma,
                        epsilon_smoothing=self.epsilon_smoothing)

    def prior_config(self, level: str) -> PriorConfig:
        layers = self.top_layers if level == "top" else self.bottom_layers
        return PriorConfig.for_level(level, num_codes=self.num_codes, top_grid=self.top_grid,
                                     layers=layers, channels=self.prior_channels,
                                     dropout=self.dropout, attention=(level == "top"),
                                     attention_every=self.attention_every)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_factors"] = list(self.lr_factors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def lr_for_phase(cfg: TrainConfig, phase: int) -> float:
    if not 1 <= phase <= len(cfg.lr_factors):
        raise ConfigError(f"phase {phase} out of range")
    # decimal quotient, correctly rounded: 3e-4 / 10 == 3e-05 exactly
    return float(Decimal(repr(cfg.base_lr)) / Decimal(repr(cfg.lr_factors[phase - 1])))


def batch_indices(seed: int, stream: str, iteration: int, n: int, batch_size: int) -> np.ndarray:
    rng = numpy_rng(seed, "batch", stream, iteration)
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def write_metrics(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow([r["iteration"], r["phase"], repr(r["lr"]), repr(r["loss"])])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"iteration": int(r["iteration"]), "phase": int(r["phase"]),
                 "lr": float(r["lr"]), "loss": float(r["loss"])}
                for r in csv.DictReader(fh)]


def _optimizer(model: torch.nn.Module, cfg: TrainConfig, lr: float) -> Adam:
    return Adam(model.named_parameters(), lr=lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                epsilon=cfg.adam_epsilon)


def _pack(kind: str, prefix: str, model: torch.nn.Module, opt: Adam, cfg: TrainConfig,
          iteration: int, phase: int, extra: dict | None = None) -> Checkpoint:
    ckpt = Checkpoint()
    ckpt.add_module(prefix, model)
    for name, t in opt.state_tensors().items():
        ckpt.tensors[f"optim.{prefix}.{name}"] = t.detach().numpy().copy()
    ckpt.meta = {"kind": kind, "prefix": prefix, "model_config": model.config_dict(),
                 "train_config": cfg.to_dict(), "iteration": iteration, "phase": phase,
                 "optimizer": {"step": opt.step_count, "lr": opt.lr},
                 "rng": {"seed": cfg.seed, "next_iteration": iteration}}
    if extra:
        ckpt.meta.update(extra)
    return ckpt


def _as_array(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 4 or len(arr) == 0:
        raise ConfigError("dataset must be a non-empty N x H x W x C stack")
    return arr


def train_vqvae(images, cfg: TrainConfig, metrics_path: str | Path | None = None,
                callback: Callable[[dict], None] | None = None) -> Checkpoint:
    """Adam at the base learning rate on standard-augmented batches."""
    images = _as_array(images)
    model = HierarchicalVQVAE(cfg.vq_config(), torch_generator(cfg.seed, "init", "vqvae"))
    model.train()
    opt = _optimizer(model, cfg, cfg.base_lr)
    aug_seed = derive_seed(cfg.seed, "augment", "vqvae")
    metrics: list[dict] = []
    n_iter = cfg.vqvae_iterations
    for it in range(n_iter):
        idx = batch_indices(cfg.seed, "vqvae", it, len(images), cfg.batch_size)
        x = images_to_tensor(augment_batch(images[idx], augment.STANDARD_POLICY, aug_seed, it))
        out = model(x)
        loss = out["loss"]
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite VQ-VAE loss at iteration {it}",
                                _pack("vqvae", "vqvae", model, opt, cfg, it, 1))
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            clip_grad_norm(model.parameters(), cfg.grad_clip)
        opt.step()
        model.ema_update(out)
        row = {"iteration": it, "phase": 1, "lr": opt.lr, "loss": loss.item()}
        metrics.append(row)
        if callback:
            callback(row)
    log.info("vqvae: %d iterations, final loss %.5f", n_iter, metrics[-1]["loss"])
    ckpt = _pack("vqvae", "vqvae", model, opt, cfg, n_iter, 1)
    ckpt.metrics = metrics
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return ckpt


def load_vqvae(ckpt: Checkpoint) -> HierarchicalVQVAE:
    if ckpt.meta.get("kind") != "vqvae":
        raise ConfigError("checkpoint does not hold a VQ-VAE")
    model = HierarchicalVQVAE(VQConfig(**ckpt.meta["model_config"]))
    model.load_state_dict(ckpt.subset("vqvae"))
    return model.eval()


def load_prior(ckpt: Checkpoint) -> PixelPrior:
    if ckpt.meta.get("kind") != "prior":
        raise ConfigError("checkpoint does not hold a prior")
    model = PixelPrior(PriorConfig(**ckpt.meta["model_config"]))
    model.load_state_dict(ckpt.subset(ckpt.meta["prefix"]))
    return model.eval()


def train_prior(level: str, images, vqvae_ckpt: Checkpoint, cfg: TrainConfig,
                metrics_path: str | Path | None = None,
                callback: Callable[[dict], None] | None = None) -> Checkpoint:
    """Teacher-forced NLL training of one prior on freshly augmented, frozen-encoded batches.

    In phased mode the optimizer state is rebuilt and the learning rate
    lowered at every phase boundary.
    """
    if level not in ("top", "bottom"):
        raise ConfigError(f"unknown level {level!r}")
    images = _as_array(images)
    vq = load_vqvae(vqvae_ckpt)
    vq.requires_grad_(False)
    pcfg = cfg.prior_config(level)
    if vq.config.num_codes != pcfg.num_codes or vq.config.top_grid != cfg.top_grid:
        raise ConfigError("VQ-VAE checkpoint does not match the prior configuration")
    model = PixelPrior(pcfg, torch_generator(cfg.seed, "init", "prior", level))
    model.set_generator(torch_generator(cfg.seed, "dropout", level))
    model.train()

    schedule = PhaseSchedule.for_mode(cfg.aug_mode, cfg.scale)
    aug_seed = derive_seed(cfg.seed, "augment", "prior", level)
    phase = 1
    opt = _optimizer(model, cfg, lr_for_phase(cfg, phase))
    resets: list[int] = []
    metrics: list[dict] = []
    for it in range(schedule.total):
        new_phase, policy = policy_for_iteration(schedule, it)
        if new_phase != phase:
            if new_phase < phase:
                raise ConfigError("phase index went backwards")
            phase = new_phase
            opt.reset(lr_for_phase(cfg, phase))
            resets.append(it)
        idx = batch_indices(cfg.seed, f"prior-{level}", it, len(images), cfg.batch_size)
        x = images_to_tensor(augment_batch(images[idx], policy, aug_seed, it))
        with torch.no_grad():
            top, bottom = vq.encode_hierarchy(x)
        if level == "top":
            logits = model(top)
            loss = nll_loss(top, logits)
        else:
            logits = model(bottom, top)
            loss = nll_loss(bottom, logits)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite {level} prior loss at iteration {it}",
                                _pack("prior", f"prior.{level}", model, opt, cfg, it, phase))
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            clip_grad_norm(model.parameters(), cfg.grad_clip)
        opt.step()
        row = {"iteration": it, "phase": phase, "lr": opt.lr, "loss": loss.item()}
        metrics.append(row)
        if callback:
            callback(row)
    tail = [r["loss"] for r in metrics[-50:]]
    extra = {"level": level, "aug_mode": cfg.aug_mode, "resets": resets,
             "boundaries": schedule.boundaries, "final_nll": float(np.mean(tail))}
    log.info("%s prior: %d iterations, final nll %.4f", level, schedule.total, extra["final_nll"])
    ckpt = _pack("prior", f"prior.{level}", model, opt, cfg, schedule.total, phase, extra)
    ckpt.metrics = metrics
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return ckpt
