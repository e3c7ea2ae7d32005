"""Dataset manifests, PNG ingestion and a synthetic shapes corpus."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from .augment import resize
from .seeding import numpy_rng

IMAGE_SUFFIXES = (".png",)


class IngestionError(ValueError):
    pass


class EmptyDatasetError(IngestionError):
    pass


def _bytewise(names: Sequence[str]) -> list[str]:
    return sorted(names, key=lambda s: s.encode("utf-8"))


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    files: tuple[str, ...]
    subset: tuple[int, ...] | None = None
    resolution: int = 32

    @classmethod
    def from_directory(cls, root: str | Path, resolution: int = 32,
                       suffixes: Sequence[str] = IMAGE_SUFFIXES) -> "DatasetManifest":
        root = Path(root)
        if not root.is_dir():
            raise IngestionError(f"{root} is not a directory")
        names = [p.name for p in root.iterdir()
                 if p.is_file() and p.suffix.lower() in suffixes]
        return cls(root, tuple(_bytewise(names)), None, resolution)

    @property
    def selected(self) -> list[str]:
        if self.subset is None:
            return list(self.files)
        return [self.files[i] for i in self.subset]

    def with_subset(self, indices: Sequence[int]) -> "DatasetManifest":
        bad = [i for i in indices if not 0 <= i < len(self.files)]
        if bad:
            raise IndexError(f"subset indices outside the file list: {bad[:5]}")
        return replace(self, subset=tuple(int(i) for i in indices))


def parse_range_spec(spec: str) -> list[int]:
    """``"0-99,10000-10099"`` -> inclusive index list."""
    out: list[int] = []
    for part in spec.split(","):
        part = part.strip().replace("_", "")
        m = re.fullmatch(r"(\d+)(?:-(\d+))?", part)
        if not m:
            raise ValueError(f"bad subset spec {part!r}")
        lo = int(m.group(1))
        hi = int(m.group(2)) if m.group(2) else lo
        if hi < lo:
            raise ValueError(f"empty range {part!r}")
        out.extend(range(lo, hi + 1))
    return out


def select_subset(manifest: DatasetManifest, spec: str) -> DatasetManifest:
    return manifest.with_subset(parse_range_spec(spec))


def random_subset(manifest: DatasetManifest, n: int, seed: int) -> DatasetManifest:
    """Uniform draw without replacement, recorded as an explicit index list."""
    pool = len(manifest.files) if manifest.subset is None else len(manifest.subset)
    if not 0 <= n <= pool:
        raise IndexError(f"cannot draw {n} files from {pool}")
    pick = numpy_rng(seed, "subset").choice(pool, size=n, replace=False)
    base = range(pool) if manifest.subset is None else manifest.subset
    return manifest.with_subset([base[i] for i in pick])


def decode_image(path: str | Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise IngestionError(f"cannot decode {path}: {e}") from None
    return arr / 255.0


def load_dataset(manifest: DatasetManifest) -> np.ndarray:
    """Decoded images as an ``N x R x R x 3`` array in ``[0, 1]``, manifest order."""
    names = manifest.selected
    if not names:
        raise EmptyDatasetError(f"no images selected under {manifest.root}")
    R = manifest.resolution
    out = np.empty((len(names), R, R, 3))
    for i, name in enumerate(names):
        path = manifest.root / name
        if not path.is_file():
            raise IngestionError(f"missing image file {path}")
        img = decode_image(path)
        if img.shape[:2] != (R, R):
            img = resize(img, R, R)
        out[i] = img
    return np.clip(out, 0.0, 1.0)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    names = manifest.selected
    lines = [f"{manifest.root}\t{manifest.resolution}\t{len(names)}"] + names
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path: str | Path) -> DatasetManifest:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise IngestionError(f"empty manifest {path}")
    try:
        root, res, count = lines[0].split("\t")
        res, count = int(res), int(count)
    except ValueError:
        raise IngestionError(f"bad manifest header in {path}") from None
    names = tuple(lines[1:])
    if len(names) != count:
        raise IngestionError(f"manifest {path} lists {len(names)} files, header says {count}")
    return DatasetManifest(Path(root), names, None, res)


def to_uint8(img: np.ndarray) -> np.ndarray:
    # round half up from [0, 1]
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(img: np.ndarray, path: str | Path, text: dict[str, str] | None = None) -> None:
    arr = to_uint8(np.asarray(img))
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    info = None
    if text:
        info = PngInfo()
        for k, v in text.items():
            info.add_text(k, v)
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info)


def synthetic_image(rng: np.random.Generator, resolution: int) -> np.ndarray:
    """A soft two-tone background with one ellipse and one rectangle."""
    R = resolution
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    t = np.linspace(0.0, 1.0, R)[:, None, None]
    bg = c0 * (1 - t) + c1 * t
    im = Image.fromarray(to_uint8(np.broadcast_to(bg, (R, R, 3))))
    draw = ImageDraw.Draw(im)
    for shape in ("ellipse", "rectangle"):
        cx, cy = rng.uniform(0.25, 0.75, size=2) * R
        w, h = rng.uniform(0.15, 0.4, size=2) * R
        color = tuple(int(v) for v in rng.integers(0, 256, size=3))
        box = [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]
        getattr(draw, shape)(box, fill=color)
    return np.asarray(im, dtype=np.float64) / 255.0


def make_synthetic_corpus(out_dir: str | Path, n: int = 100, resolution: int = 32,
                          seed: int = 0) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(n - 1)))
    for i in range(n):
        img = synthetic_image(numpy_rng(seed, "synthetic", i), resolution)
        write_png(img, out / f"{i:0{width}d}.png")
    return DatasetManifest.from_directory(out, resolution)
