"""Two-level vector-quantized autoencoder with EMA codebooks."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensor_core import Conv, ShapeError


class ConfigError(ValueError):
    pass


@dataclass
class VQConfig:
    resolution: int = 32
    in_channels: int = 3
    top_grid: int = 4
    bottom_grid: int = 8
    num_codes: int = 256
    code_dim: int = 64
    hidden: int = 32
    res_blocks: int = 2
    beta: float = 0.25
    gamma: float = 0.99
    epsilon_smoothing: float = 1e-5

    def __post_init__(self):
        if self.bottom_grid != 2 * self.top_grid:
            raise ConfigError("bottom grid side must be twice the top grid side")
        ratio = self.resolution // self.bottom_grid
        if self.resolution % self.bottom_grid or ratio < 2 or ratio & (ratio - 1):
            raise ConfigError("resolution / bottom_grid must be a power of two >= 2")
        if self.num_codes < 1:
            raise ConfigError("codebook must not be empty")
        if self.beta <= 0 or not 0 < self.gamma < 1:
            raise ConfigError("need beta > 0 and gamma in (0, 1)")

    @property
    def bottom_downsamples(self) -> int:
        return (self.resolution // self.bottom_grid).bit_length() - 1

    @classmethod
    def full_scale(cls, latents: str = "16-8") -> "VQConfig":
        bottom, top = (int(s) for s in latents.split("-"))
        return cls(resolution=256, top_grid=top, bottom_grid=bottom, hidden=128)


def quantize(z_e: torch.Tensor, codebook: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Nearest code vector per position of ``z_e[..., D]``.

    A matmul-expanded distance shortlists every code within its rounding
    bound of the minimum; the shortlist is then ranked by exact squared
    differences, so the result equals exhaustive search. Ties go to the
    lowest index.
    """
    if codebook.shape[0] == 0:
        raise ConfigError("empty codebook")
    D = codebook.shape[1]
    if z_e.shape[-1] != D:
        raise ShapeError(f"last dim {z_e.shape[-1]} does not match code dim {D}")
    flat = z_e.detach().reshape(-1, D)
    cb = codebook.detach().to(flat.dtype)
    zz = (flat * flat).sum(1, keepdim=True)
    ee = (cb * cb).sum(1)
    approx = zz - 2.0 * flat @ cb.T + ee
    tol = 8.0 * D * torch.finfo(flat.dtype).eps * (zz + ee.max()) + torch.finfo(flat.dtype).tiny
    shortlist = approx <= approx.min(1, keepdim=True).values + tol
    rows, cols = shortlist.nonzero(as_tuple=True)
    exact = torch.full_like(approx, float("inf"))
    exact[rows, cols] = ((flat[rows] - cb[cols]) ** 2).sum(1)
    idx = torch.argmin(exact, dim=1).reshape(z_e.shape[:-1])
    return idx, codebook.detach()[idx]


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z_e, z_q):
        return z_q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z_e: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Value of ``z_q``; gradient passed unchanged to ``z_e``."""
    if z_e.shape != z_q.shape:
        raise ShapeError("z_e and z_q must have the same shape")
    return _StraightThrough.apply(z_e, z_q.detach())


def vq_loss(x: torch.Tensor, recon: torch.Tensor, z_e, z_q, beta: float) -> torch.Tensor:
    """Mean squared reconstruction error plus ``beta`` times the commitment term.

    ``z_e``/``z_q`` may be single tensors or matching sequences (one per
    level). The codebook receives no gradient; it is trained by EMA.
    """
    if x.shape != recon.shape:
        raise ShapeError("x and recon shapes differ")
    if isinstance(z_e, torch.Tensor):
        z_e, z_q = [z_e], [z_q]
    if len(z_e) != len(z_q):
        raise ShapeError("z_e and z_q level counts differ")
    loss = ((x - recon) ** 2).mean()
    for e, q in zip(z_e, z_q):
        if e.shape != q.shape:
            raise ShapeError("z_e and z_q shapes differ")
        loss = loss + beta * ((q.detach() - e) ** 2).mean()
    return loss


def ema_statistics(counts: torch.Tensor, sums: torch.Tensor, z_e: torch.Tensor,
                   indices: torch.Tensor, gamma: float, eps: float, steps: int = 0,
                   embed: torch.Tensor | None = None):
    """One EMA step. Returns updated ``(counts, sums, codebook)``.

    ``counts``/``sums`` are zero-started accumulators after ``steps`` updates;
    the codebook divides out the ``1 - gamma^t`` start-up bias. Codes never
    assigned so far keep their row of ``embed``.
    """
    K, D = sums.shape
    flat = z_e.detach().reshape(-1, D).to(sums.dtype)
    idx = indices.reshape(-1)
    batch_counts = torch.bincount(idx, minlength=K).to(counts.dtype)
    batch_sums = torch.zeros_like(sums).index_add_(0, idx, flat)
    counts = gamma * counts + (1 - gamma) * batch_counts
    sums = gamma * sums + (1 - gamma) * batch_sums
    debias = 1.0 - gamma ** (steps + 1)
    n_hat, m_hat = counts / debias, sums / debias
    n = n_hat.sum()
    smoothed = (n_hat + eps) / (n + K * eps) * n
    new = m_hat / smoothed[:, None]
    if embed is not None:
        new = torch.where((counts > 0)[:, None], new, embed)
    return counts, sums, new


class Codebook(nn.Module):
    """K code vectors plus EMA cluster counts and running sums (all buffers)."""

    def __init__(self, num_codes: int, dim: int, gamma: float = 0.99, eps: float = 1e-5,
                 generator: torch.Generator | None = None):
        super().__init__()
        if num_codes < 1:
            raise ConfigError("empty codebook")
        self.gamma = gamma
        self.eps = eps
        self.register_buffer("embed", torch.randn(num_codes, dim, generator=generator))
        self.register_buffer("ema_counts", torch.zeros(num_codes))
        self.register_buffer("ema_sums", torch.zeros(num_codes, dim))
        self.register_buffer("ema_steps", torch.zeros((), dtype=torch.int64))

    def forward(self, z_e: torch.Tensor):
        return quantize(z_e, self.embed)

    @torch.no_grad()
    def ema_update(self, z_e: torch.Tensor, indices: torch.Tensor) -> None:
        counts, sums, embed = ema_statistics(self.ema_counts, self.ema_sums, z_e, indices,
                                             self.gamma, self.eps, int(self.ema_steps),
                                             self.embed)
        self.ema_counts.copy_(counts)
        self.ema_sums.copy_(sums)
        self.embed.copy_(embed)
        self.ema_steps += 1


class ResBlock(nn.Module):
    def __init__(self, ch: int, g: torch.Generator | None):
        super().__init__()
        self.conv1 = Conv(ch, ch, 3, generator=g)
        self.conv2 = Conv(ch, ch, 1, generator=g, gain=0.5)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


def _stack(ch: int, n: int, g) -> nn.Sequential:
    return nn.Sequential(*[ResBlock(ch, g) for _ in range(n)])


class HierarchicalVQVAE(nn.Module):
    """Bottom encoder -> top encoder; top codes condition bottom quantization
    and the decoder.

    Images enter and leave as NCHW tensors in ``[0, 1]``.
    """

    def __init__(self, config: VQConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = c = config
        g = generator
        h, D = c.hidden, c.code_dim

        enc_b = [Conv(c.in_channels, h, 3, down=True, generator=g), nn.ReLU()]
        for _ in range(c.bottom_downsamples - 1):
            enc_b += [Conv(h, h, 3, down=True, generator=g), nn.ReLU()]
        enc_b += [Conv(h, h, 3, generator=g), _stack(h, c.res_blocks, g)]
        self.enc_bottom = nn.Sequential(*enc_b)
        self.enc_top = nn.Sequential(Conv(h, h, 3, down=True, generator=g), nn.ReLU(),
                                     Conv(h, h, 3, generator=g), _stack(h, c.res_blocks, g))
        self.pre_top = Conv(h, D, 1, generator=g)
        self.up_top = Conv(D, D, 3, generator=g)
        self.pre_bottom = Conv(h + D, D, 1, generator=g)
        self.codebook_top = Codebook(c.num_codes, D, c.gamma, c.epsilon_smoothing, g)
        self.codebook_bottom = Codebook(c.num_codes, D, c.gamma, c.epsilon_smoothing, g)

        dec = [Conv(2 * D, h, 3, generator=g), _stack(h, c.res_blocks, g), nn.ReLU()]
        for _ in range(c.bottom_downsamples - 1):
            dec += [nn.Upsample(scale_factor=2), Conv(h, h, 3, generator=g), nn.ReLU()]
        dec += [nn.Upsample(scale_factor=2), Conv(h, c.in_channels, 3, generator=g)]
        self.decoder = nn.Sequential(*dec)

    def _check_input(self, x: torch.Tensor) -> None:
        c = self.config
        if x.dim() != 4 or x.shape[1:] != (c.in_channels, c.resolution, c.resolution):
            raise ShapeError(
                f"expected N x {c.in_channels} x {c.resolution} x {c.resolution}, got {tuple(x.shape)}")

    def _top_features(self, q_top: torch.Tensor) -> torch.Tensor:
        # q_top is NCHW with code_dim channels
        return self.up_top(F.interpolate(q_top, scale_factor=2, mode="nearest"))

    def encode(self, x: torch.Tensor, frozen: tuple | None = None) -> dict:
        """Continuous and quantized latents for both levels (NCHW).

        ``frozen=(top_indices, bottom_indices)`` bypasses the nearest-code
        search, which keeps assignments fixed for finite-difference checks.
        """
        self._check_input(x)
        h_b = self.enc_bottom(x)
        z_e_top = self.pre_top(self.enc_top(h_b))
        if frozen is None:
            idx_top, q = self.codebook_top(z_e_top.permute(0, 2, 3, 1))
        else:
            idx_top = frozen[0]
            q = self.codebook_top.embed[idx_top]
        q_top = straight_through(z_e_top, q.permute(0, 3, 1, 2))
        top_feat = self._top_features(q_top)
        z_e_bottom = self.pre_bottom(torch.cat([h_b, top_feat], dim=1))
        if frozen is None:
            idx_bottom, q = self.codebook_bottom(z_e_bottom.permute(0, 2, 3, 1))
        else:
            idx_bottom = frozen[1]
            q = self.codebook_bottom.embed[idx_bottom]
        q_bottom = straight_through(z_e_bottom, q.permute(0, 3, 1, 2))
        return {"z_e": (z_e_top, z_e_bottom), "z_q": (q_top, q_bottom),
                "indices": (idx_top, idx_bottom), "top_feat": top_feat}

    def decode_quantized(self, q_top: torch.Tensor, q_bottom: torch.Tensor,
                         top_feat: torch.Tensor | None = None) -> torch.Tensor:
        if top_feat is None:
            top_feat = self._top_features(q_top)
        return torch.sigmoid(self.decoder(torch.cat([q_bottom, top_feat], dim=1)))

    def forward(self, x: torch.Tensor, frozen: tuple | None = None) -> dict:
        enc = self.encode(x, frozen)
        recon = self.decode_quantized(*enc["z_q"], enc["top_feat"])
        enc["recon"] = recon
        enc["loss"] = vq_loss(x, recon, enc["z_e"], enc["z_q"], self.config.beta)
        return enc

    @torch.no_grad()
    def ema_update(self, enc: dict) -> None:
        for book, z_e, idx in zip((self.codebook_top, self.codebook_bottom),
                                  enc["z_e"], enc["indices"]):
            book.ema_update(z_e.permute(0, 2, 3, 1), idx)

    @torch.no_grad()
    def encode_hierarchy(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        idx_top, idx_bottom = self.encode(x)["indices"]
        return idx_top, idx_bottom

    def _lookup(self, book: Codebook, idx: torch.Tensor, side: int) -> torch.Tensor:
        idx = torch.as_tensor(idx, dtype=torch.long)
        if idx.dim() == 2:
            idx = idx[None]
        if idx.shape[1:] != (side, side):
            raise ShapeError(f"expected {side}x{side} index grid, got {tuple(idx.shape[1:])}")
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.config.num_codes):
            raise IndexError("latent index outside the codebook")
        return book.embed[idx].permute(0, 3, 1, 2)

    @torch.no_grad()
    def decode_hierarchy(self, top: torch.Tensor, bottom: torch.Tensor) -> torch.Tensor:
        q_top = self._lookup(self.codebook_top, top, self.config.top_grid)
        q_bottom = self._lookup(self.codebook_bottom, bottom, self.config.bottom_grid)
        return self.decode_quantized(q_top, q_bottom)

    def config_dict(self) -> dict:
        return asdict(self.config)


def images_to_tensor(images: Sequence[np.ndarray] | np.ndarray,
                     dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """N x H x W x C arrays -> N x C x H x W tensor."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().to(torch.float64).permute(0, 2, 3, 1).numpy()


LATENT_FORMAT_VERSION = 1
LEVELS = {"top": 0, "bottom": 1}


def save_latents(path: str | Path, level: str, grid: np.ndarray, num_codes: int) -> None:
    """Header ``(level, T, K, version)`` then ``T*T`` indices, all uint32 LE."""
    grid = np.asarray(grid)
    T = grid.shape[0]
    if grid.shape != (T, T):
        raise ShapeError("latent grid must be square")
    header = struct.pack("<4I", LEVELS[level], T, num_codes, LATENT_FORMAT_VERSION)
    Path(path).write_bytes(header + grid.astype("<u4").tobytes())


def load_latents(path: str | Path) -> tuple[str, np.ndarray, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise ValueError("latent file too short")
    level, T, K, version = struct.unpack("<4I", raw[:16])
    if version != LATENT_FORMAT_VERSION:
        raise ValueError(f"unsupported latent format version {version}")
    if len(raw) != 16 + 4 * T * T:
        raise ValueError("latent file size does not match its header")
    grid = np.frombuffer(raw[16:], dtype="<u4").reshape(T, T).astype(np.int64)
    name = {v: k for k, v in LEVELS.items()}[level]
    return name, grid, K
