"""Fréchet distance between Gaussian fits of image features."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import upscale_crop
from .sample import SamplerRequest, generate_images
from .seeding import numpy_rng
from .tensor_core import conv2d_down

FIXED_WIDTHS = (16, 32, 64)


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class FeatureStats:
    n: int
    mu: np.ndarray
    sigma: np.ndarray


class FeatureExtractor:
    """Strided ReLU conv stack with global average pooling.

    ``fixed(seed)`` draws He-normal weights from the seed; ``from_file``
    reads kernels ``w0, w1, ...`` (and optional ``b0, b1, ...``) from an
    ``.npz`` archive.
    """

    def __init__(self, kernels: Sequence[np.ndarray], biases: Sequence[np.ndarray] | None = None,
                 descriptor: str = "custom"):
        self.kernels = [torch.from_numpy(np.asarray(k, dtype=np.float64)) for k in kernels]
        if biases is None:
            biases = [np.zeros(k.shape[0]) for k in kernels]
        self.biases = [torch.from_numpy(np.asarray(b, dtype=np.float64)) for b in biases]
        self.descriptor = descriptor

    @property
    def dim(self) -> int:
        return self.kernels[-1].shape[0]

    @classmethod
    def fixed(cls, seed: int = 0, in_channels: int = 3,
              widths: Sequence[int] = FIXED_WIDTHS) -> "FeatureExtractor":
        rng = numpy_rng(seed, "features")
        kernels, cin = [], in_channels
        for w in widths:
            kernels.append(rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(w, cin, 3, 3)))
            cin = w
        return cls(kernels, descriptor=f"fixed:{seed}")

    @classmethod
    def from_file(cls, path: str | Path) -> "FeatureExtractor":
        with np.load(path) as z:
            n = sum(1 for k in z.files if k.startswith("w"))
            kernels = [z[f"w{i}"] for i in range(n)]
            biases = [z[f"b{i}"] if f"b{i}" in z.files else np.zeros(kernels[i].shape[0])
                      for i in range(n)]
        return cls(kernels, biases, descriptor=f"file:{path}")

    @classmethod
    def parse(cls, spec: str) -> "FeatureExtractor":
        kind, _, arg = spec.partition(":")
        if kind == "fixed":
            return cls.fixed(int(arg or 0))
        if kind == "file":
            return cls.from_file(arg)
        raise ValueError(f"unknown feature extractor {spec!r}")

    @torch.no_grad()
    def __call__(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        feats = []
        for start in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(
                images[start:start + batch_size].transpose(0, 3, 1, 2)))
            for k, b in zip(self.kernels, self.biases):
                x = F.relu(conv2d_down(x, k, b))
            feats.append(x.mean(dim=(2, 3)).numpy())
        return np.concatenate(feats) if feats else np.zeros((0, self.dim))


def stats_from_features(features: np.ndarray) -> FeatureStats:
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 2:
        raise InsufficientSamplesError("need at least two feature vectors")
    mu = f.mean(axis=0)
    # shift by the first row so duplicated rows centre to exact zeros
    shifted = f - f[0]
    centred = shifted - shifted.mean(axis=0)
    sigma = centred.T @ centred / (f.shape[0] - 1)
    return FeatureStats(f.shape[0], mu, (sigma + sigma.T) / 2)


def extract_stats(images, extractor: FeatureExtractor) -> FeatureStats:
    images = np.asarray(images)
    if len(images) < 2:
        raise InsufficientSamplesError("need at least two images")
    return stats_from_features(extractor(images))


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats, atol: float = 1e-10) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

    The trace of the cross term is taken from the eigenvalues of the
    symmetric matrix ``S_a^(1/2) S_b S_a^(1/2)``, clamped at zero.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError("feature dimensions differ")
    for s in (a.sigma, b.sigma):
        if not np.allclose(s, s.T, rtol=0.0, atol=atol * max(1.0, np.abs(s).max())):
            raise ValueError("covariance matrix is not symmetric")
    root_a = _sqrt_psd(a.sigma)
    m = root_a @ b.sigma @ root_a
    eig = np.clip(np.linalg.eigvalsh((m + m.T) / 2), 0.0, None)
    diff = a.mu - b.mu
    d = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.sqrt(eig).sum())
    return max(d, 0.0)


def evaluate(vqvae, top_model, bottom_model, real_images, n_generated: int,
             extractor: FeatureExtractor, seed: int = 0, generated=None) -> dict:
    """Score generated samples against real images.

    Real images get the constant upscale-and-crop normalization before
    feature extraction. Pass ``generated`` to skip sampling.
    """
    real = np.asarray(real_images, dtype=np.float64)
    if len(real) == 0:
        raise InsufficientSamplesError("no real images")
    if generated is None:
        generated = generate_images(vqvae, top_model, bottom_model,
                                    SamplerRequest(n_generated, seed))
    generated = np.asarray(generated, dtype=np.float64)
    real_norm = np.stack([upscale_crop(x) for x in real])
    score = frechet_distance(extract_stats(generated, extractor), extract_stats(real_norm, extractor))
    return {"score": score, "n_real": len(real), "n_generated": len(generated),
            "extractor": extractor.descriptor, "feature_dim": extractor.dim, "seed": seed}


def write_report(report: dict, path: str | Path) -> None:
    lines = [f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}" for k, v in report.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> dict:
    out: dict = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" = ")
        for conv in (int, float):
            try:
                out[key] = conv(value)
                break
            except ValueError:
                continue
        else:
            out[key] = value
    return out
