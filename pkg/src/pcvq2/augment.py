"""Phased data augmentation.

Four label-preserving transform families (flip, rotation, anisotropic zoom,
colour jitter) whose ranges shrink over six training phases. Images are
``H x W x C`` float arrays in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .seeding import derive_seed

UPSCALE = 2
LUMA = np.array([0.299, 0.587, 0.114])
DEFAULT_LENGTHS = (10000, 10000, 10000, 10000, 5000, 5000)
MODES = ("phased", "standard", "none")


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class PhasePolicy:
    flip_enabled: bool = True
    rotation_max_deg: float = 180.0
    zoom_enabled: bool = True
    zoom_lo: float = 1.05
    zoom_hi: float = 1.30
    color_param: float = 0.30

    def __post_init__(self):
        if not 0.0 <= self.rotation_max_deg <= 180.0:
            raise AugmentError("rotation_max_deg must lie in [0, 180]")
        if self.zoom_lo > self.zoom_hi:
            raise AugmentError("zoom_lo must not exceed zoom_hi")
        if self.zoom_enabled and not (1.0 <= self.zoom_lo and self.zoom_hi <= 2.0):
            raise AugmentError("zoom range must lie inside [1, 2]")
        if not 0.0 <= self.color_param <= 1.0:
            raise AugmentError("color_param must lie in [0, 1]")


def _phase_policies() -> tuple[PhasePolicy, ...]:
    p1 = PhasePolicy()
    p2 = replace(p1, rotation_max_deg=18.0)
    p3 = replace(p2, rotation_max_deg=0.0)
    p4 = replace(p3, zoom_enabled=False)
    p5 = replace(p4, color_param=0.15)
    p6 = replace(p5, color_param=0.0)
    return (p1, p2, p3, p4, p5, p6)


PHASE_POLICIES = _phase_policies()
STANDARD_POLICY = replace(PHASE_POLICIES[0], color_param=0.15)
NONE_POLICY = PhasePolicy(flip_enabled=False, rotation_max_deg=0.0, zoom_enabled=False,
                          color_param=0.0)


def scaled_length(length: int, scale: float) -> int:
    return max(1, int(math.floor(length * scale)))


@dataclass(frozen=True)
class PhaseSchedule:
    phases: tuple[tuple[PhasePolicy, int], ...]

    @classmethod
    def phased(cls, scale: float = 1.0) -> "PhaseSchedule":
        if scale <= 0:
            raise AugmentError("scale must be positive")
        return cls(tuple((p, scaled_length(n, scale))
                         for p, n in zip(PHASE_POLICIES, DEFAULT_LENGTHS)))

    @classmethod
    def constant(cls, policy: PhasePolicy, scale: float = 1.0) -> "PhaseSchedule":
        total = sum(scaled_length(n, scale) for n in DEFAULT_LENGTHS)
        return cls(((policy, total),))

    @classmethod
    def for_mode(cls, mode: str, scale: float = 1.0) -> "PhaseSchedule":
        if mode == "phased":
            return cls.phased(scale)
        if mode == "standard":
            return cls.constant(STANDARD_POLICY, scale)
        if mode == "none":
            return cls.constant(NONE_POLICY, scale)
        raise AugmentError(f"unknown augmentation mode {mode!r}")

    @property
    def boundaries(self) -> list[int]:
        out, total = [], 0
        for _, n in self.phases:
            total += n
            out.append(total)
        return out

    @property
    def total(self) -> int:
        return self.boundaries[-1]


def policy_for_iteration(schedule: PhaseSchedule, iteration: int) -> tuple[int, PhasePolicy]:
    """Phase number (1-based) and policy for a 0-based iteration."""
    if iteration < 0:
        raise IndexError("iteration must be non-negative")
    for k, end in enumerate(schedule.boundaries):
        if iteration < end:
            return k + 1, schedule.phases[k][0]
    raise IndexError(f"iteration {iteration} is beyond the schedule ({schedule.total})")


class SampleRng:
    """Uniform draws for one sample, keyed on (seed, iteration, sample index).

    Set ``log`` to a list to record every ``(lo, hi, value)`` draw.
    """

    def __init__(self, seed: int, iteration: int = 0, index: int = 0, log: list | None = None):
        self.key = (seed, iteration, index)
        self._gen = np.random.Generator(
            np.random.PCG64(derive_seed(seed, "augment", iteration, index)))
        self.log = log

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = float(self._gen.uniform(lo, hi))
        if self.log is not None:
            self.log.append((lo, hi, u))
        return u

    def integer(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` from a single uniform draw."""
        return min(n - 1, int(self.uniform(0.0, 1.0) * n))


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


def _as_hwc(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise AugmentError(f"expected an H x W x C image, got shape {img.shape}")
    return img


def sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray,
                    fill: float | None = None) -> np.ndarray:
    """Bilinear lookup at fractional pixel-centre coordinates.

    Pixel ``(i, j)`` covers ``[i - 0.5, i + 0.5] x [j - 0.5, j + 0.5]``.
    Inside that footprint edges are clamped; outside it ``fill`` is used
    (or edge clamping when ``fill`` is None).
    """
    H, W = img.shape[:2]
    y = np.clip(ys, 0.0, H - 1.0)
    x = np.clip(xs, 0.0, W - 1.0)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (y - y0)[..., None]
    wx = (x - x0)[..., None]
    top = img[y0, x0] * (1.0 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1.0 - wx) + img[y1, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    if fill is not None:
        outside = (ys < -0.5) | (ys > H - 0.5) | (xs < -0.5) | (xs > W - 0.5)
        out[outside] = fill
    return out


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    A = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    A[rows, i0] += 1.0 - w
    A[rows, i1] += w
    return A


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre alignment (separable)."""
    img = _as_hwc(img)
    H, W, C = img.shape
    Ay = _interp_matrix(out_h, H)
    Ax = _interp_matrix(out_w, W)
    rows = (Ay @ img.reshape(H, W * C)).reshape(out_h, W, C)
    return (rows.transpose(0, 2, 1) @ Ax.T).transpose(0, 2, 1)


def center_crop(img: np.ndarray, h: int, w: int) -> np.ndarray:
    oy = (img.shape[0] - h) // 2
    ox = (img.shape[1] - w) // 2
    return img[oy:oy + h, ox:ox + w]


def upscale_crop(img: np.ndarray) -> np.ndarray:
    """Constant integer upscale followed by a centre crop to the input size."""
    img = _as_hwc(img)
    H, W = img.shape[:2]
    return center_crop(resize(img, UPSCALE * H, UPSCALE * W), H, W)


def mirror(img: np.ndarray) -> np.ndarray:
    return _as_hwc(img)[:, ::-1].copy()


def flip(img: np.ndarray, rng: SampleRng) -> np.ndarray:
    return mirror(img) if rng.uniform() < 0.5 else _as_hwc(img).copy()


def rotate_by(img: np.ndarray, theta_deg: float, fill: float | None = None) -> np.ndarray:
    """Upscale by the constant factor, rotate about the centre, centre-crop.

    ``fill`` marks samples falling outside the upscaled image; on square
    inputs none do, whatever the angle.
    """
    img = _as_hwc(img)
    H, W = img.shape[:2]
    if H != W:
        raise AugmentError(f"rotation needs a square image, got {H}x{W}")
    big = resize(img, UPSCALE * H, UPSCALE * W)
    if theta_deg == 0.0:
        return center_crop(big, H, W).copy()
    oy = (UPSCALE * H - H) // 2
    ox = (UPSCALE * W - W) // 2
    cy = (UPSCALE * H - 1) / 2.0
    cx = (UPSCALE * W - 1) / 2.0
    dy = (np.arange(H) + oy - cy)[:, None]
    dx = (np.arange(W) + ox - cx)[None, :]
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    # inverse map: output offset rotated by -theta gives the source offset
    src_y = cy + c * dy - s * dx
    src_x = cx + s * dy + c * dx
    return sample_bilinear(big, src_y, src_x, fill=fill)


def rotate(img: np.ndarray, max_deg: float, rng: SampleRng) -> np.ndarray:
    if not 0.0 <= max_deg <= 180.0:
        raise AugmentError("max_deg must lie in [0, 180]")
    theta = rng.uniform(-max_deg, max_deg) if max_deg > 0 else 0.0
    return rotate_by(img, theta)


def zoom_by(img: np.ndarray, fh: float, fw: float, oy: int, ox: int) -> np.ndarray:
    img = _as_hwc(img)
    H, W = img.shape[:2]
    big = resize(img, _round(fh * H), _round(fw * W))
    if not (0 <= oy <= big.shape[0] - H and 0 <= ox <= big.shape[1] - W):
        raise AugmentError("zoom crop falls outside the upscaled image")
    return big[oy:oy + H, ox:ox + W].copy()


def zoom_factors(H: int, W: int, lo: float, hi: float, rng: SampleRng) -> tuple[float, float, int, int]:
    if not 1.0 < lo <= hi:
        raise AugmentError("zoom needs 1 < lo <= hi")
    if _round(lo * H) <= H or _round(lo * W) <= W:
        raise AugmentError(f"zoom factor {lo} is degenerate for a {H}x{W} image")
    fh = rng.uniform(lo, hi)
    fw = rng.uniform(lo, hi)
    oy = rng.integer(_round(fh * H) - H + 1)
    ox = rng.integer(_round(fw * W) - W + 1)
    return fh, fw, oy, ox


def zoom(img: np.ndarray, lo: float, hi: float, rng: SampleRng) -> np.ndarray:
    img = _as_hwc(img)
    return zoom_by(img, *zoom_factors(img.shape[0], img.shape[1], lo, hi, rng))


def luma(img: np.ndarray) -> np.ndarray:
    if img.shape[2] == 3:
        return img @ LUMA
    return img.mean(axis=2)


def color_transform(img: np.ndarray, b: float, s: float, c: float) -> np.ndarray:
    """Brightness, then saturation, then contrast; one clamp at the end."""
    x = _as_hwc(img) * b
    gray = luma(x)[..., None]
    x = gray + s * (x - gray)
    m = luma(x).mean()
    x = m + c * (x - m)
    return np.clip(x, 0.0, 1.0)


def color_jitter(img: np.ndarray, p: float, rng: SampleRng) -> np.ndarray:
    if not 0.0 <= p <= 1.0:
        raise AugmentError("color parameter must lie in [0, 1]")
    if p == 0.0:
        return _as_hwc(img).copy()
    b = rng.uniform(1 - p, 1 + p)
    s = rng.uniform(1 - p, 1 + p)
    c = rng.uniform(1 - p, 1 + p)
    return color_transform(img, b, s, c)


def apply(img: np.ndarray, policy: PhasePolicy, rng: SampleRng) -> np.ndarray:
    """flip -> rotate (always upscale-cropped) -> zoom -> colour."""
    x = _as_hwc(img)
    if policy.flip_enabled:
        x = flip(x, rng)
    x = rotate(x, policy.rotation_max_deg, rng)
    if policy.zoom_enabled:
        x = zoom(x, policy.zoom_lo, policy.zoom_hi, rng)
    if policy.color_param > 0:
        x = color_jitter(x, policy.color_param, rng)
    return x


def augment_batch(images: Sequence[np.ndarray], policy: PhasePolicy, seed: int,
                  iteration: int, indices: Sequence[int] | None = None) -> np.ndarray:
    """Augment a batch; sample ``k`` draws from stream ``(seed, iteration, k)``."""
    if indices is None:
        indices = range(len(images))
    return np.stack([apply(img, policy, SampleRng(seed, iteration, k))
                     for k, img in zip(indices, images)])
