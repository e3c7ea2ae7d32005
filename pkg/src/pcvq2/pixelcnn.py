"""Autoregressive priors over latent index grids.

Both levels use gated two-stack (vertical/horizontal) masked convolutions.
The top level additionally interleaves single-head causal self-attention;
the bottom level is conditioned on the top grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .tensor_core import Conv, ShapeError, conv2d, dropout, fan_in_uniform_, softmax_cross_entropy
from .vqvae import ConfigError


@dataclass
class PriorConfig:
    level: str = "top"
    num_codes: int = 256
    grid: int = 4
    cond_grid: int = 0
    layers: int = 4
    channels: int = 32
    kernel: int = 3
    dropout: float = 0.2
    attention: bool = True
    attention_every: int = 2
    heads: int = 1
    zero_head: bool = True

    def __post_init__(self):
        if self.level not in ("top", "bottom"):
            raise ConfigError(f"unknown level {self.level!r}")
        if self.kernel % 2 == 0:
            raise ConfigError("kernel size must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.heads != 1:
            raise ConfigError("only single-head attention is supported")
        if self.level == "bottom":
            if self.cond_grid < 1 or self.grid % self.cond_grid:
                raise ConfigError("bottom prior needs a top grid that divides its own grid")
            if self.attention:
                raise ConfigError("attention is only used by the top-level prior")

    @classmethod
    def for_level(cls, level: str, num_codes: int = 256, top_grid: int = 4, **kw) -> "PriorConfig":
        if level == "top":
            kw.setdefault("layers", 4)
            return cls(level="top", num_codes=num_codes, grid=top_grid, **kw)
        kw.setdefault("layers", 6)
        kw.setdefault("attention", False)
        return cls(level="bottom", num_codes=num_codes, grid=2 * top_grid,
                   cond_grid=top_grid, **kw)


def raster_mask(k: int, mask_type: str) -> torch.Tensor:
    """k x k mask keeping raster positions before the centre (A) or up to it (B)."""
    if k % 2 == 0:
        raise ConfigError("masked kernels must be odd-sized")
    if mask_type not in ("A", "B"):
        raise ConfigError(f"unknown mask type {mask_type!r}")
    c = k // 2
    m = torch.zeros(k, k)
    m[:c] = 1
    m[c, :c + (mask_type == "B")] = 1
    return m


def vertical_mask(k: int) -> torch.Tensor:
    # rows above and including the centre row
    m = torch.zeros(k, k)
    m[:k // 2 + 1] = 1
    return m


def horizontal_mask(k: int, include_center: bool) -> torch.Tensor:
    m = torch.zeros(k, k)
    m[k // 2, :k // 2 + int(include_center)] = 1
    return m


def masked_conv(x: torch.Tensor, weight: torch.Tensor, mask: torch.Tensor,
                bias: torch.Tensor | None = None) -> torch.Tensor:
    k = weight.shape[-1]
    if k % 2 == 0 or weight.shape[-2] % 2 == 0:
        raise ConfigError("masked kernels must be odd-sized")
    return conv2d(x, weight * mask, bias, padding=k // 2)


class MaskedConv(nn.Module):
    def __init__(self, cin: int, cout: int, mask: torch.Tensor,
                 generator: torch.Generator | None = None):
        super().__init__()
        k = mask.shape[-1]
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.register_buffer("mask", mask.clone())
        # fan-in counts only unmasked taps
        fan = cin * int(mask.sum().item())
        bound = math.sqrt(6.0 / max(fan, 1))
        with torch.no_grad():
            self.weight.uniform_(-bound, bound, generator=generator)

    def forward(self, x):
        return masked_conv(x, self.weight, self.mask, self.bias)


def gate(x: torch.Tensor) -> torch.Tensor:
    a, b = x.chunk(2, dim=1)
    return torch.tanh(a) * torch.sigmoid(b)


def shift_down(x: torch.Tensor) -> torch.Tensor:
    return F.pad(x, (0, 0, 1, 0))[:, :, :-1, :]


class GatedBlock(nn.Module):
    """Gated two-stack layer.

    The vertical stack sees rows up to the current one; it reaches the
    horizontal stack only after a one-row down-shift. With ``causal=True``
    the horizontal stack excludes the current position and drops its
    residual, which makes this the network's input layer.
    """

    def __init__(self, ch: int, k: int = 3, causal: bool = False, cond_channels: int = 0,
                 p_drop: float = 0.0, generator: torch.Generator | None = None):
        super().__init__()
        g = generator
        self.causal = causal
        self.p_drop = p_drop
        self.generator: torch.Generator | None = None
        self.v_conv = MaskedConv(ch, 2 * ch, vertical_mask(k), g)
        self.h_conv = MaskedConv(ch, 2 * ch, horizontal_mask(k, not causal), g)
        self.link = Conv(2 * ch, 2 * ch, 1, generator=g)
        self.h_out = Conv(ch, ch, 1, generator=g)
        self.cond_channels = cond_channels
        if cond_channels:
            self.cond_v = Conv(cond_channels, 2 * ch, 1, generator=g)
            self.cond_h = Conv(cond_channels, 2 * ch, 1, generator=g)

    def forward(self, v: torch.Tensor, h: torch.Tensor,
                cond: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        vp = self.v_conv(v)
        hp = self.h_conv(h) + self.link(shift_down(vp))
        if self.cond_channels:
            if cond is None or cond.shape[0] != h.shape[0] or cond.shape[2:] != h.shape[2:]:
                raise ShapeError("condition must match the input's batch and spatial dims")
            vp = vp + self.cond_v(cond)
            hp = hp + self.cond_h(cond)
        v_new = gate(vp)
        out = self.h_out(dropout(gate(hp), self.p_drop, self.training, self.generator))
        h_new = out if self.causal else h + out
        return v_new, h_new


def causal_attention(x: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor, wv: torch.Tensor,
                     return_weights: bool = False):
    """Single-head attention over an ``[N, L, C]`` sequence.

    Position ``i`` attends to positions ``< i``; position 0 gets a zero context.
    """
    L = x.shape[1]
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
    allowed = torch.ones(L, L, dtype=torch.bool).tril(-1)
    scores = scores.masked_fill(~allowed, torch.finfo(scores.dtype).min)
    weights = torch.softmax(scores, dim=-1) * allowed.to(scores.dtype)
    context = weights @ v
    return (context, weights) if return_weights else context


class CausalAttention(nn.Module):
    def __init__(self, ch: int, generator: torch.Generator | None = None):
        super().__init__()
        self.wq = nn.Parameter(fan_in_uniform_(torch.empty(ch, ch), generator))
        self.wk = nn.Parameter(fan_in_uniform_(torch.empty(ch, ch), generator))
        self.wv = nn.Parameter(fan_in_uniform_(torch.empty(ch, ch), generator))
        self.out = Conv(ch, ch, 1, generator=generator)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        N, C, H, W = h.shape
        seq = h.flatten(2).transpose(1, 2)
        ctx = causal_attention(seq, self.wq, self.wk, self.wv)
        ctx = ctx.transpose(1, 2).reshape(N, C, H, W)
        return h + self.out(ctx)


class PixelPrior(nn.Module):
    """Autoregressive prior over an ``N x T x T`` grid of code indices.

    ``forward`` returns logits shaped ``N x K x T x T``.
    """

    def __init__(self, config: PriorConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = c = config
        g = generator
        ch = c.channels
        self.embed = nn.Parameter(torch.randn(c.num_codes, ch, generator=g))
        cond_ch = 0
        if c.level == "bottom":
            cond_ch = ch
            self.cond_embed = nn.Parameter(torch.randn(c.num_codes, ch, generator=g))
        self.blocks = nn.ModuleList([
            GatedBlock(ch, c.kernel, causal=(i == 0), cond_channels=cond_ch,
                       p_drop=c.dropout, generator=g)
            for i in range(c.layers)])
        self.attn = nn.ModuleDict()
        if c.attention:
            for i in range(c.layers):
                if (i + 1) % c.attention_every == 0:
                    self.attn[str(i)] = CausalAttention(ch, g)
        self.head = Conv(ch, c.num_codes, 1, generator=g)
        if c.zero_head:
            with torch.no_grad():
                self.head.weight.zero_()
        self.generator: torch.Generator | None = None

    def set_generator(self, generator: torch.Generator | None) -> None:
        self.generator = generator
        for b in self.blocks:
            b.generator = generator

    def _check(self, latents: torch.Tensor, condition) -> None:
        c = self.config
        if latents.dim() != 3 or latents.shape[1:] != (c.grid, c.grid):
            raise ShapeError(f"expected N x {c.grid} x {c.grid} latents, got {tuple(latents.shape)}")
        if latents.numel() and (latents.min() < 0 or latents.max() >= c.num_codes):
            raise IndexError("latent index outside [0, K)")
        if c.level == "bottom":
            if condition is None:
                raise ConfigError("bottom-level prior requires a top-level condition")
            if condition.shape != (latents.shape[0], c.cond_grid, c.cond_grid):
                raise ShapeError("condition grid has the wrong shape")
            if condition.min() < 0 or condition.max() >= c.num_codes:
                raise IndexError("condition index outside [0, K)")

    def embed_condition(self, condition: torch.Tensor) -> torch.Tensor:
        feat = self.cond_embed[condition].permute(0, 3, 1, 2)
        return F.interpolate(feat, scale_factor=self.config.grid // self.config.cond_grid,
                             mode="nearest")

    def forward_embedded(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        """Logits from already-embedded inputs ``N x C x T x T``."""
        v = h = x
        for i, block in enumerate(self.blocks):
            v, h = block(v, h, cond)
            if str(i) in self.attn:
                h = self.attn[str(i)](h)
        return self.head(F.relu(h))

    def forward(self, latents: torch.Tensor, condition: torch.Tensor | None = None) -> torch.Tensor:
        latents = torch.as_tensor(latents, dtype=torch.long)
        if condition is not None:
            condition = torch.as_tensor(condition, dtype=torch.long)
        self._check(latents, condition)
        x = self.embed[latents].permute(0, 3, 1, 2)
        cond = self.embed_condition(condition) if self.config.level == "bottom" else None
        return self.forward_embedded(x, cond)

    def config_dict(self) -> dict:
        return asdict(self.config)


def forward_logits(model: PixelPrior, latents: torch.Tensor,
                   condition: torch.Tensor | None = None) -> torch.Tensor:
    """Logits laid out ``N x T x T x K``."""
    return model(latents, condition).permute(0, 2, 3, 1)


def nll_loss(latents: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Mean per-position cross-entropy; ``logits`` is ``N x K x T x T``."""
    latents = torch.as_tensor(latents, dtype=torch.long)
    if logits.dim() != 4 or logits.shape[0] != latents.shape[0] or logits.shape[2:] != latents.shape[1:]:
        raise ShapeError("logits and latents disagree in shape")
    K = logits.shape[1]
    return softmax_cross_entropy(logits.permute(0, 2, 3, 1).reshape(-1, K), latents.reshape(-1))
