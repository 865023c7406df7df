"""Image loading, resizing, augmentation and normalization."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InputError

DESK_SIZE = (96, 32)
FULL_SIZE = (384, 128)


@dataclass
class AugmentConfig:
    pad: int = 10
    hflip_prob: float = 0.5
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise InputError(f"hflip probability must lie in [0, 1], got {self.hflip_prob}")
        if any(s <= 0 for s in self.std):
            raise InputError("channel stds must be positive")
        if self.pad < 0:
            raise InputError("pad must be non-negative")


# -- PPM I/O ---------------------------------------------------------------
def write_ppm(path, img: np.ndarray) -> None:
    """Write an HxWx3 image in [0, 1] as binary P6."""
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def _ppm_tokens(raw: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    n = len(raw)
    while len(out) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        out.append(int(raw[start:pos]))
    return out, pos


def read_ppm(path) -> np.ndarray:
    """Read a plain (P3) or binary (P6) pixmap as HxWx3 floats in [0, 1]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P3", b"P6"):
        raise FormatError(f"{path}: not a PPM file")
    try:
        (w, h, maxval), pos = _ppm_tokens(raw, 3, 2)
        if magic == b"P6":
            pos += 1  # single whitespace byte after maxval
            dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
            count = w * h * 3
            data = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
        else:
            vals, _ = _ppm_tokens(raw, w * h * 3, pos)
            data = np.array(vals)
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PPM ({exc})") from None
    if w < 1 or h < 1:
        raise InputError(f"{path}: zero-size image")
    return (data.reshape(h, w, 3).astype(np.float32) / np.float32(maxval)).astype(np.float32)


def load_image(path, size: tuple[int, int] = DESK_SIZE) -> np.ndarray:
    img = read_ppm(path)
    return img if img.shape[:2] == tuple(size) else resize(img, size)


# -- geometric transforms --------------------------------------------------
def _bilinear_axis(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centers, clamped at the borders
    coord = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    coord = np.clip(coord, 0, src - 1)
    lo = np.floor(coord).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coord - lo


def resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxWx3 image to ``size`` = (H, W)."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise InputError(f"cannot resize image of shape {img.shape}")
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise InputError(f"invalid target size {size}")
    if img.shape[:2] == (h, w):
        return img.copy()
    y0, y1, fy = _bilinear_axis(img.shape[0], h)
    x0, x1, fx = _bilinear_axis(img.shape[1], w)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1, :].copy()


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    return ((img - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)).astype(np.float32)


def denormalize(img: np.ndarray, mean, std) -> np.ndarray:
    return (img * np.asarray(std, np.float32) + np.asarray(mean, np.float32)).astype(np.float32)


def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad, random crop back to the input size, random h-flip, normalize."""
    h, w, c = img.shape
    if c != 3:
        raise InputError(f"expected 3 channels, got {c}")
    p = cfg.pad
    padded = np.pad(img, ((p, p), (p, p), (0, 0)))
    top = int(rng.integers(0, 2 * p + 1))
    left = int(rng.integers(0, 2 * p + 1))
    out = padded[top : top + h, left : left + w]
    if out.shape != img.shape:
        raise RuntimeError("crop window out of bounds")
    if rng.random() < cfg.hflip_prob:
        out = out[:, ::-1]
    return normalize(out, cfg.mean, cfg.std)


def eval_transform(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return normalize(img, cfg.mean, cfg.std)


def channel_stats(images) -> tuple[list[float], list[float]]:
    """Per-channel mean and std over a collection of HxWx3 images."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for img in images:
        px = np.asarray(img, dtype=np.float64).reshape(-1, 3)
        total += px.sum(axis=0)
        sq += (px * px).sum(axis=0)
        n += px.shape[0]
    if n == 0:
        raise DataError("no images to compute statistics from")
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean * mean, 1e-12))
    return mean.tolist(), std.tolist()


# -- manifest ---------------------------------------------------------------
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRecord:
    identity: int
    image: str
    caption: str
    split: str


def write_manifest(path, records) -> None:
    lines = []
    for r in records:
        if "\t" in r.caption or "\n" in r.caption:
            raise DataError("captions may not contain tabs or newlines")
        lines.append(f"{r.identity}\t{r.image}\t{r.caption}\t{r.split}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path) -> list[ManifestRecord]:
    """Tab-separated records: identity, image path, caption, split."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4 or parts[3] not in SPLITS:
            raise FormatError(f"{path}:{lineno}: malformed manifest record")
        try:
            ident = int(parts[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: identity must be an integer") from None
        out.append(ManifestRecord(ident, parts[1], parts[2], parts[3]))
    return out


@dataclass
class DatasetStats:
    mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list[float] = field(default_factory=lambda: [0.25, 0.25, 0.25])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"mean": self.mean, "std": self.std}, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetStats":
        d = json.loads(Path(path).read_text())
        return cls(list(d["mean"]), list(d["std"]))
