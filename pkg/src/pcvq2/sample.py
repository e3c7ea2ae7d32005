"""Hierarchical ancestral sampling.

Each latent grid starts from a uniformly random top-left index and is
completed in raster order from the prior's conditionals. Top grids
condition the bottom grids, and both are decoded to pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import write_png
from .seeding import numpy_rng
from .vqvae import ConfigError, HierarchicalVQVAE, tensor_to_images


@dataclass(frozen=True)
class SamplerRequest:
    count: int
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


def level_uniforms(seed: int, level: str, image_ids, positions: int) -> np.ndarray:
    """Exactly ``positions`` uniforms per image, one stream per image."""
    return np.stack([numpy_rng(seed, "sample", level, int(i)).random(positions)
                     for i in image_ids])


@torch.no_grad()
def sample_level(model, condition: torch.Tensor | None, uniforms: np.ndarray,
                 temperature: float = 1.0, record_probs: bool = False):
    """Fill ``N`` grids in raster order.

    ``uniforms`` is ``N x T*T``: column 0 picks the top-left index uniformly,
    column ``i`` inverts the categorical CDF at raster position ``i``.
    Returns the ``N x T x T`` index grids (and the per-position
    probabilities used, when ``record_probs`` is set).
    """
    cfg = model.config
    T, K = cfg.grid, cfg.num_codes
    if cfg.level == "bottom" and condition is None:
        raise ConfigError("bottom-level sampling requires a top-level condition")
    u = torch.as_tensor(uniforms, dtype=torch.float64)
    N = u.shape[0]
    if u.shape != (N, T * T):
        raise ConfigError(f"need {T * T} uniforms per image, got {tuple(u.shape)}")
    grid = torch.zeros(N, T, T, dtype=torch.long)
    grid[:, 0, 0] = torch.clamp((u[:, 0] * K).long(), max=K - 1)
    probs_out = torch.zeros(N, T, T, K, dtype=torch.float64) if record_probs else None
    if record_probs:
        probs_out[:, 0, 0] = 1.0 / K
    for pos in range(1, T * T):
        i, j = divmod(pos, T)
        logits = model(grid, condition)[:, :, i, j].to(torch.float64) / temperature
        p = torch.softmax(logits, dim=1)
        cdf = torch.cumsum(p, dim=1)
        target = u[:, pos:pos + 1] * cdf[:, -1:]
        grid[:, i, j] = torch.clamp((cdf <= target).sum(1), max=K - 1)
        if record_probs:
            probs_out[:, i, j] = p
    return (grid, probs_out) if record_probs else grid


def check_compatible(vqvae: HierarchicalVQVAE, top, bottom) -> None:
    v = vqvae.config
    if top.config.level != "top" or bottom.config.level != "bottom":
        raise ConfigError("priors passed in the wrong order")
    if not (top.config.num_codes == bottom.config.num_codes == v.num_codes):
        raise ConfigError("codebook sizes disagree between checkpoints")
    if top.config.grid != v.top_grid or bottom.config.grid != v.bottom_grid \
            or bottom.config.cond_grid != v.top_grid:
        raise ConfigError("latent grid sizes disagree between checkpoints")


@torch.no_grad()
def generate_images(vqvae: HierarchicalVQVAE, top_model, bottom_model, req: SamplerRequest,
                    batch_size: int = 250) -> np.ndarray:
    """``req.count`` images as an ``N x H x W x C`` array in ``[0, 1]``."""
    check_compatible(vqvae, top_model, bottom_model)
    for m in (vqvae, top_model, bottom_model):
        m.eval()
    Tt, Tb = top_model.config.grid, bottom_model.config.grid
    out = []
    for start in range(0, req.count, batch_size):
        ids = range(start, min(req.count, start + batch_size))
        top = sample_level(top_model, None, level_uniforms(req.seed, "top", ids, Tt * Tt),
                           req.temperature)
        bottom = sample_level(bottom_model, top,
                              level_uniforms(req.seed, "bottom", ids, Tb * Tb), req.temperature)
        out.append(tensor_to_images(vqvae.decode_hierarchy(top, bottom)))
    return np.concatenate(out)


def write_samples(images: np.ndarray, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(images) - 1)))
    paths = []
    for k, img in enumerate(images):
        p = out / f"sample_{k:0{width}d}.png"
        write_png(img, p)
        paths.append(p)
    return paths
