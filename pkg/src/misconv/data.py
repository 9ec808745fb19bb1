"""Dataset input/output and mask generation.

Images travel as IDX files (the MNIST container: big-endian magic, dimension
sizes, raw uint8 payload) and are scaled to [0, 1] on load.  Masks mark
pixels missing either as one axis-aligned square patch of a given area
fraction or as independent per-pixel dropout; every channel of a pixel is
masked together.

`make_synthetic_digits` renders a deterministic MNIST-shaped 10-class digit
corpus with Pillow's bundled font, for environments without the real files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .mfa import MaskedImage

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def read_idx_images(path) -> np.ndarray:
    """Read an IDX image file; returns (N, H, W) float64 scaled to [0, 1]."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16:
            raise ValueError(f"{path}: truncated IDX header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGE_MAGIC:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x}")
        payload = fh.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise ValueError(f"{path}: truncated image payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)
    return data.astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise ValueError(f"{path}: truncated IDX header")
        magic, count = struct.unpack(">II", head)
        if magic != IDX_LABEL_MAGIC:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x}")
        payload = fh.read(count)
        if len(payload) != count:
            raise ValueError(f"{path}: truncated label payload")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images) -> None:
    """Write (N, H, W) uint8 (or [0,1] floats, rescaled) as an IDX image file."""
    images = np.asarray(images)
    if images.ndim != 3:
        raise ValueError("images must be (N, H, W)")
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_idx(images_path, labels_path):
    """Load paired IDX files as fully observed MaskedImages plus labels.

    Returns (images, labels, (C, H, W)); image and label counts must match.
    """
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{pixels.shape[0]} images but {labels.shape[0]} labels"
        )
    n, h, w = pixels.shape
    observed = np.ones(h * w, dtype=bool)
    images = [MaskedImage(pixels[i].reshape(-1), observed) for i in range(n)]
    return images, labels, (1, h, w)


@dataclass(frozen=True)
class MaskSpec:
    """Missing-pixel pattern: one square patch or independent pixel dropout."""

    pattern: str  # "square" | "noise"
    area_fraction: float = 0.25
    missing_fraction: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("square", "noise"):
            raise ValueError(f"unknown mask pattern {self.pattern!r}")
        if not 0.0 < self.area_fraction < 1.0:
            raise ValueError("area_fraction must be in (0, 1)")
        if not 0.0 < self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must be in (0, 1)")


def square_side(spec: MaskSpec, h: int, w: int) -> int:
    side = int(round(np.sqrt(spec.area_fraction * h * w)))
    if side > h or side > w:
        raise ValueError(f"square side {side} does not fit a {h}x{w} image")
    return side


def apply_mask(pixels, chw: tuple[int, int, int], spec: MaskSpec,
               per_example_seed: int) -> MaskedImage:
    """Mask one flattened (C, H, W) image; deterministic in (spec.seed, per_example_seed)."""
    c, h, w = chw
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1)
    if pixels.shape[0] != c * h * w:
        raise ValueError(f"pixel count {pixels.shape[0]} != C*H*W = {c * h * w}")
    rng = np.random.default_rng((spec.seed, per_example_seed))
    observed = np.ones((c, h, w), dtype=bool)
    if spec.pattern == "square":
        side = square_side(spec, h, w)
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        observed[:, top:top + side, left:left + side] = False
    else:
        drop = rng.random((h, w)) < spec.missing_fraction
        observed[:, drop] = False
    return MaskedImage(pixels, observed.reshape(-1))


def mask_batch(images, chw, spec: MaskSpec, stream: int = 0) -> list[MaskedImage]:
    """Mask a batch; example i uses per_example_seed = (stream << 32) + i."""
    return [
        apply_mask(img, chw, spec, (stream << 32) + i)
        for i, img in enumerate(images)
    ]


def make_synthetic_digits(count: int, seed: int = 0, size: int = 28):
    """Render a deterministic digit corpus with Pillow's bundled font.

    Each image is one digit glyph with randomized font size, placement
    jitter, rotation, shear and intensity, on a black background: an offline
    stand-in with MNIST geometry (uint8, size x size).  Returns
    (images (N, size, size) uint8, labels (N,) int64).
    """
    from PIL import Image, ImageDraw, ImageFont

    rng = np.random.default_rng(seed)
    fonts = {pt: ImageFont.load_default(size=pt) for pt in range(14, 25)}
    images = np.empty((count, size, size), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count)
    for i in range(count):
        digit = str(labels[i])
        pt = int(rng.integers(14, 25))
        canvas = Image.new("L", (size * 2, size * 2), 0)
        draw = ImageDraw.Draw(canvas)
        draw.text((size, size), digit, fill=255, font=fonts[pt], anchor="mm")
        angle = float(rng.uniform(-12.0, 12.0))
        shear = float(rng.uniform(-0.15, 0.15))
        canvas = canvas.rotate(angle, resample=Image.BILINEAR, center=(size, size))
        canvas = canvas.transform(
            canvas.size, Image.AFFINE, (1.0, shear, -shear * size, 0.0, 1.0, 0.0),
            resample=Image.BILINEAR,
        )
        dx, dy = rng.integers(-2, 3, size=2)
        box = (size // 2 + dx, size // 2 + dy,
               size // 2 + dx + size, size // 2 + dy + size)
        tile = np.asarray(canvas.crop(box), dtype=np.float64)
        tile *= float(rng.uniform(0.75, 1.0))
        images[i] = np.clip(np.round(tile), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def write_synthetic_dataset(out_dir, train_count: int, test_count: int,
                            seed: int = 0, size: int = 28) -> dict:
    """Write synthetic train/test IDX files into out_dir; returns the four paths."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_imgs, train_labels = make_synthetic_digits(train_count, seed=seed, size=size)
    test_imgs, test_labels = make_synthetic_digits(test_count, seed=seed + 1, size=size)
    paths = {
        "train_images": out / "train-images-idx3-ubyte",
        "train_labels": out / "train-labels-idx1-ubyte",
        "test_images": out / "t10k-images-idx3-ubyte",
        "test_labels": out / "t10k-labels-idx1-ubyte",
    }
    write_idx_images(paths["train_images"], train_imgs)
    write_idx_labels(paths["train_labels"], train_labels)
    write_idx_images(paths["test_images"], test_imgs)
    write_idx_labels(paths["test_labels"], test_labels)
    return {k: str(v) for k, v in paths.items()}
