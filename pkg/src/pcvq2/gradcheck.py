"""Finite-difference gradient suite over every differentiable building block.

All checks run in float64. Each case builds a random instance and returns
``(f, inputs)`` for :func:`pcvq2.tensor_core.grad_check`.
"""

from __future__ import annotations

import time
from typing import Callable
from unittest import mock

import torch
from torch.func import functional_call

from .pixelcnn import GatedBlock, PixelPrior, PriorConfig, causal_attention, masked_conv, nll_loss, raster_mask
from .tensor_core import conv2d, grad_check, softmax_cross_entropy
from . import vqvae as vqvae_mod
from .vqvae import HierarchicalVQVAE, VQConfig, vq_loss

DT = torch.float64
TOLERANCE = 1e-4


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=DT)


def _random_params(module: torch.nn.Module, g) -> tuple[list[str], list[torch.Tensor]]:
    # zero-initialised biases would park ReLU inputs exactly on the kink
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach() + 0.3 * _randn(g, *p.shape) for _, p in module.named_parameters()]
    return names, params


def _module_case(module: torch.nn.Module, loss: Callable, g) -> tuple[Callable, list]:
    module = module.to(DT).eval()
    names, params = _random_params(module, g)

    def f(*flat):
        return loss(lambda *a, **kw: functional_call(module, dict(zip(names, flat)), a, kw))

    return f, params


def case_conv2d(g):
    stride = int(torch.randint(1, 3, (1,), generator=g))
    padding = int(torch.randint(0, 2, (1,), generator=g))
    x = _randn(g, 2, 2, 5, 5)
    k = _randn(g, 3, 2, 3, 3)
    b = _randn(g, 3)
    out_side = (5 + 2 * padding - 3) // stride + 1
    r = _randn(g, 2, 3, out_side, out_side)
    return (lambda x, k, b: (conv2d(x, k, b, stride, padding) * r).sum()), [x, k, b]


def case_masked_conv(g):
    mask = raster_mask(3, "A" if torch.rand(1, generator=g) < 0.5 else "B").to(DT)
    x = _randn(g, 2, 2, 4, 4)
    w = _randn(g, 3, 2, 3, 3)
    r = _randn(g, 2, 3, 4, 4)
    return (lambda x, w: (masked_conv(x, w, mask) * r).sum()), [x, w]


def case_gated_block(g):
    block = GatedBlock(3, 3, causal=bool(torch.rand(1, generator=g) < 0.5), cond_channels=2,
                       generator=g).to(DT).eval()
    names, params = _random_params(block, g)
    v, h, c = _randn(g, 2, 3, 4, 4), _randn(g, 2, 3, 4, 4), _randn(g, 2, 2, 4, 4)
    rv, rh = _randn(g, 2, 3, 4, 4), _randn(g, 2, 3, 4, 4)
    n = len(params)

    def f(*args):
        out_v, out_h = functional_call(block, dict(zip(names, args[:n])), tuple(args[n:]))
        return (out_v * rv).sum() + (out_h * rh).sum()

    return f, params + [v, h, c]


def case_attention(g):
    x = _randn(g, 2, 5, 4)
    wq, wk, wv = (_randn(g, 4, 4) * 0.5 for _ in range(3))
    r = _randn(g, 2, 5, 4)
    return (lambda x, a, b, c: (causal_attention(x, a, b, c) * r).sum()), [x, wq, wk, wv]


def case_cross_entropy(g):
    logits = _randn(g, 6, 7) * 2
    targets = torch.randint(0, 7, (6,), generator=g)
    return (lambda z: softmax_cross_entropy(z, targets)), [logits]


def case_vq_loss(g):
    x, recon, z_e, z_q = (_randn(g, 2, 3, 4, 4) for _ in range(4))
    beta = float(torch.rand(1, generator=g)) + 0.1
    return (lambda x, r, e: vq_loss(x, r, e, z_q, beta)), [x, recon, z_e]


def case_vq_straight_through(g):
    """Encoder-to-decoder gradient through frozen code assignments.

    The estimator copies the decoder-side gradient onto ``z_e``. That is the
    exact derivative of a surrogate whose decoder sees ``z_q0 + (z_e - z_e0)``
    with ``z_e0`` held at the base point, so differences are taken on the
    surrogate while the analytic side runs the real model.
    """
    cfg = VQConfig(resolution=8, top_grid=2, bottom_grid=4, num_codes=5, code_dim=3,
                   hidden=4, res_blocks=1)
    model = HierarchicalVQVAE(cfg, g).to(DT).eval()
    names, params = _random_params(model, g)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=DT)
    with torch.no_grad():
        base = functional_call(model, dict(zip(names, params)), (x,))
    frozen = base["indices"]
    anchors = [z.clone() for z in base["z_e"]]
    codes = [z.clone() for z in base["z_q"]]

    def surrogate(calls):
        def st(z_e, z_q):
            k = next(calls)
            return codes[k] + (z_e - anchors[k])
        return st

    def f(*flat):
        p = dict(zip(names, flat))
        if torch.is_grad_enabled():
            return functional_call(model, p, (x, frozen))["loss"]
        with mock.patch.object(vqvae_mod, "straight_through", surrogate(iter(range(2)))):
            out = functional_call(model, p, (x, frozen))
        return vq_loss(x, out["recon"], out["z_e"], codes, cfg.beta)

    return f, params


def case_prior_nll(g):
    level = "top" if torch.rand(1, generator=g) < 0.5 else "bottom"
    cfg = PriorConfig.for_level(level, num_codes=5, top_grid=2, layers=2, channels=3,
                                zero_head=False, attention_every=1)
    model = PixelPrior(cfg, g)
    latents = torch.randint(0, 5, (2, cfg.grid, cfg.grid), generator=g)
    cond = torch.randint(0, 5, (2, 2, 2), generator=g) if level == "bottom" else None
    return _module_case(model, lambda call: nll_loss(latents, call(latents, cond)), g)


CASES: dict[str, tuple[Callable, int, int | None]] = {
    # name: (builder, instances, coordinates probed per input; None = all)
    "conv2d": (case_conv2d, 20, None),
    "masked_conv": (case_masked_conv, 20, None),
    "gated_block": (case_gated_block, 20, None),
    "causal_attention": (case_attention, 20, None),
    "softmax_cross_entropy": (case_cross_entropy, 20, None),
    "vq_loss": (case_vq_loss, 20, None),
    "vq_straight_through": (case_vq_straight_through, 20, 12),
    "prior_nll": (case_prior_nll, 20, 12),
}


def run_suite(seed: int = 0, instances: int | None = None, eps: float = 1e-5,
              report: Callable[[str, float, float], None] | None = None) -> dict[str, float]:
    """Worst relative error per op over its random instances."""
    results = {}
    for name, (build, n, coords) in CASES.items():
        g = torch.Generator().manual_seed(seed)
        t0 = time.perf_counter()
        worst = 0.0
        for _ in range(instances or n):
            f, inputs = build(g)
            worst = max(worst, grad_check(f, inputs, eps=eps, coords=coords, generator=g))
        results[name] = worst
        if report:
            report(name, worst, time.perf_counter() - t0)
    return results
