"""Differentiable array primitives shared by every model in the package.

Tensors are ``torch.Tensor`` values; torch's autograd graph is the reverse-mode
tape. This module adds the shape-checked convolution, the cross-entropy loss,
inverted dropout, a functional Adam update and a central-difference gradient
checker on top of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def check_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {where}")
    return t


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"size {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size")
    return span // stride + 1


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, padding: int = 0) -> torch.Tensor:
    """2-D cross-correlation over an NCHW batch with an OCkhkw kernel.

    The output size must come out exactly; uneven strides raise instead of
    silently dropping border rows.
    """
    if x.dim() != 4 or kernel.dim() != 4:
        raise ShapeError(f"expected 4-d input and kernel, got {tuple(x.shape)} and {tuple(kernel.shape)}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    kh, kw = kernel.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel must be odd-sized, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    conv_output_size(x.shape[2], kh, stride, padding)
    conv_output_size(x.shape[3], kw, stride, padding)
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def conv2d_down(x: torch.Tensor, kernel: torch.Tensor,
                bias: torch.Tensor | None = None) -> torch.Tensor:
    """Stride-2 'same' convolution: output side is ``ceil(side / 2)``.

    Even sides get one extra row/column of zeros at the bottom/right so the
    strided output size stays exact.
    """
    kh, kw = kernel.shape[2:]
    top = (kh - 1) // 2 if x.shape[2] % 2 else (kh - 3) // 2
    left = (kw - 1) // 2 if x.shape[3] % 2 else (kw - 3) // 2
    x = F.pad(x, (left, (kw - 1) // 2, top, (kh - 1) // 2))
    return conv2d(x, kernel, bias, stride=2, padding=0)


def softmax_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of ``targets`` under row-wise softmax.

    The backward pass yields ``(softmax - onehot) / N``.
    """
    if logits.dim() != 2:
        raise ShapeError(f"logits must be [N, K], got {tuple(logits.shape)}")
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.shape != (logits.shape[0],):
        raise ShapeError("targets must have one entry per logits row")
    K = logits.shape[1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= K):
        raise IndexError(f"target index outside [0, {K})")
    log_z = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, targets[:, None])[:, 0]
    return (log_z - picked).mean()


def dropout(x: torch.Tensor, p: float, training: bool,
            generator: torch.Generator | None = None) -> torch.Tensor:
    # inverted dropout: rescale at train time, identity at eval time
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def fresh(cls, param: torch.Tensor, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(torch.zeros_like(param), torch.zeros_like(param), lr, beta1, beta2, epsilon)


def adam_step(param: torch.Tensor, grad: torch.Tensor,
              state: AdamState) -> tuple[torch.Tensor, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ShapeError("param, grad and Adam moments must share dims")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (torch.sqrt(v_hat) + state.epsilon)
    return new_param, AdamState(m, v, state.lr, state.beta1, state.beta2, state.epsilon, t)


class Adam:
    """Keeps one :class:`AdamState` per named parameter and updates in place."""

    def __init__(self, params: Iterable[tuple[str, torch.nn.Parameter]], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.hyper = (beta1, beta2, epsilon)
        self.reset(lr)

    def reset(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = lr
        self.states = {name: AdamState.fresh(p.detach(), self.lr, *self.hyper)
                       for name, p in self.params.items()}

    def step(self) -> None:
        with torch.no_grad():
            for name, p in self.params.items():
                if p.grad is None:
                    continue
                new_p, self.states[name] = adam_step(p.detach(), p.grad, self.states[name])
                p.copy_(new_p)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def step_count(self) -> int:
        return max((s.step for s in self.states.values()), default=0)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, s in self.states.items():
            out[f"{name}.m"] = s.m
            out[f"{name}.v"] = s.v
        return out


def clip_grad_norm(params: Iterable[torch.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g.mul_(scale)
    return total


def grad_check(f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = 1e-5, coords: int | None = None,
               generator: torch.Generator | None = None) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps the inputs to a scalar. With ``coords`` set, only that many
    randomly chosen coordinates per input are probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*leaves)
    check_finite(out, "grad_check objective")
    analytic = torch.autograd.grad(out, leaves, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for leaf, g in zip(leaves, analytic):
            g = torch.zeros_like(leaf) if g is None else g
            flat = leaf.view(-1)
            idx: Iterable[int] = range(flat.numel())
            if coords is not None and coords < flat.numel():
                idx = torch.randperm(flat.numel(), generator=generator)[:coords].tolist()
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = f(*leaves)
                flat[i] = orig - eps
                lo = f(*leaves)
                flat[i] = orig
                numeric = (hi - lo).item() / (2 * eps)
                if not math.isfinite(numeric):
                    raise NumericError("non-finite finite-difference estimate")
                a = g.reshape(-1)[i].item()
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def fan_in_uniform_(weight: torch.Tensor, generator: torch.Generator | None = None,
                    gain: float = 1.0) -> torch.Tensor:
    # He-style bound sqrt(6 / fan_in)
    fan_in = weight[0].numel()
    bound = gain * math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        return weight.uniform_(-bound, bound, generator=generator)


class Conv(torch.nn.Module):
    """Convolution layer on top of :func:`conv2d`.

    ``down=True`` makes it a stride-2 'same' convolution; otherwise it is a
    stride-1 convolution that preserves spatial size.
    """

    def __init__(self, cin: int, cout: int, k: int = 3, down: bool = False,
                 generator: torch.Generator | None = None, gain: float = 1.0):
        super().__init__()
        self.k = k
        self.down = down
        self.weight = torch.nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = torch.nn.Parameter(torch.zeros(cout))
        fan_in_uniform_(self.weight, generator, gain)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.down:
            return conv2d_down(x, self.weight, self.bias)
        return conv2d(x, self.weight, self.bias, padding=self.k // 2)
