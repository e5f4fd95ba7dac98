"""Dataset ingestion, preprocessing, augmentation, and a synthetic set.

The IDX container (big-endian header, u8 payload) covers MNIST and
Fashion-MNIST; gzip-compressed files are sniffed and decompressed
transparently.  The synthetic dataset renders a handful of procedural
glyphs under random rotation/scale/translation so the training and routing
paths can be exercised in seconds without external downloads.
"""

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    IdxBadMagicError,
    IdxCountMismatchError,
    IdxTruncatedError,
    ShapeError,
)
from .rng import seed_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray        # [n, h, w, 1], float in [0, 1] (or standardized)
    labels: np.ndarray        # [n] int class ids
    classes: int
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ShapeError(f"images must be [n,h,w,c] with n >= 1, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ShapeError("labels do not match image count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ShapeError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices, split=None):
        return Dataset(self.images[indices], self.labels[indices],
                       self.classes, split if split is not None else self.split)


def _read_bytes(path):
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            return gzip.decompress(f.read())
        return f.read()


def _parse_idx(raw, path, expect_magic, expect_dims):
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise IdxBadMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    header = 4 + 4 * expect_dims
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{expect_dims}I", raw[4:header])
    count = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) < count:
        raise IdxTruncatedError(f"{path}: payload holds {len(payload)} bytes, "
                                f"header promises {count}")
    return dims, np.frombuffer(payload[:count], dtype=np.uint8)


def load_idx(images_path, labels_path, classes: int = 10, split: str = "") -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to [0, 1]."""
    img_dims, img_raw = _parse_idx(_read_bytes(images_path), images_path,
                                   IDX_IMAGES_MAGIC, 3)
    lab_dims, lab_raw = _parse_idx(_read_bytes(labels_path), labels_path,
                                   IDX_LABELS_MAGIC, 1)
    if img_dims[0] != lab_dims[0]:
        raise IdxCountMismatchError(
            f"{images_path} holds {img_dims[0]} images but {labels_path} holds "
            f"{lab_dims[0]} labels")
    n, h, w = img_dims
    images = (img_raw.reshape(n, h, w, 1).astype(np.float64) / 255.0)
    return Dataset(images, lab_raw.astype(np.int64), classes=classes, split=split)


def write_idx_images(path, images_u8: np.ndarray) -> None:
    """Writer counterpart of the image container (round-trip fixture support)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    if images_u8.ndim != 3:
        raise ShapeError(f"expected [n,h,w] uint8 images, got {images_u8.shape}")
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images_u8.shape))
        f.write(images_u8.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def resize_bilinear(images: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of [n, h, w, 1] images with half-pixel centers, so a
    same-size resize is the identity."""
    n, h, w, c = images.shape
    if h == target and w == target:
        return images.copy()
    ys = (np.arange(target) + 0.5) * (h / target) - 0.5
    xs = (np.arange(target) + 0.5) * (w / target) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :, None]
    top = images[:, y0][:, :, x0] * (1 - wx) + images[:, y0][:, :, x1] * wx
    bottom = images[:, y1][:, :, x0] * (1 - wx) + images[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bottom * wy


def standardize(images: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Per-image zero mean / unit deviation (deviation floored)."""
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    std = images.std(axis=(1, 2, 3), keepdims=True)
    return (images - mean) / np.maximum(std, floor)


def preprocess(images: np.ndarray, target: int = 32) -> np.ndarray:
    """Resize to the network resolution, then standardize each image."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if images.shape[1] < 8 or images.shape[2] < 8:
        raise ShapeError(f"images too small to resize: {images.shape}")
    return standardize(resize_bilinear(images, target))


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    crop: int = 32
    brightness: tuple = (0.0, 0.0)    # additive delta range
    contrast: tuple = (1.0, 1.0)      # multiplicative range about the mean
    seed: int = 0

    def __post_init__(self):
        if self.brightness[0] > self.brightness[1] or self.contrast[0] > self.contrast[1]:
            raise ShapeError("augment ranges must be (low, high) with low <= high")


def augment(image: np.ndarray, cfg: AugmentConfig, rng=None, train: bool = True) -> np.ndarray:
    """Crop (random when training, centered otherwise), then jitter
    brightness additively and contrast multiplicatively about the mean.
    Deterministic for a fixed config seed."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if cfg.crop > h or cfg.crop > w:
        raise ShapeError(f"crop {cfg.crop} exceeds image size {h}x{w}")
    if rng is None:
        rng = seed_stream(cfg.seed, "augment")
    if train:
        oy = int(rng.integers(0, h - cfg.crop + 1))
        ox = int(rng.integers(0, w - cfg.crop + 1))
    else:
        oy, ox = (h - cfg.crop) // 2, (w - cfg.crop) // 2
    out = image[oy:oy + cfg.crop, ox:ox + cfg.crop].copy()
    delta = rng.uniform(*cfg.brightness) if cfg.brightness != (0.0, 0.0) else 0.0
    factor = rng.uniform(*cfg.contrast) if cfg.contrast != (1.0, 1.0) else 1.0
    if factor != 1.0:
        mean = out.mean()
        out = (out - mean) * factor + mean
    if delta != 0.0:
        out = out + delta
    return out


# ---------------------------------------------------------------------------
# Synthetic affine glyphs
# ---------------------------------------------------------------------------

_GLYPH_SEGMENTS = {
    # Stroke endpoints in a unit box; rendered with round caps.
    0: [(0.5, 0.15, 0.5, 0.85)],                                     # bar
    1: [(0.2, 0.5, 0.8, 0.5), (0.5, 0.15, 0.5, 0.85)],               # cross
    2: [(0.2, 0.2, 0.8, 0.8), (0.2, 0.8, 0.8, 0.2)],                 # X
    3: [(0.25, 0.15, 0.25, 0.85), (0.25, 0.85, 0.8, 0.85)],          # L
    4: [(0.2, 0.2, 0.8, 0.2), (0.2, 0.2, 0.2, 0.8),
        (0.2, 0.8, 0.8, 0.8), (0.8, 0.2, 0.8, 0.8)],                 # box
    5: [(0.2, 0.15, 0.8, 0.15), (0.5, 0.15, 0.5, 0.85)],             # T
    6: [(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.2, 0.8), (0.2, 0.8, 0.8, 0.8)],  # Z
    7: [(0.5, 0.2, 0.2, 0.8), (0.5, 0.2, 0.8, 0.8), (0.35, 0.6, 0.65, 0.6)],  # A
    8: [(0.2, 0.15, 0.2, 0.85), (0.8, 0.15, 0.8, 0.85), (0.2, 0.5, 0.8, 0.5)],  # H
    9: [(0.3, 0.2, 0.7, 0.2), (0.3, 0.2, 0.3, 0.5), (0.3, 0.5, 0.7, 0.5),
        (0.7, 0.5, 0.7, 0.8), (0.3, 0.8, 0.7, 0.8)],                 # S
}


def _render_glyph(segments, size, thickness=0.06):
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([(xs + 0.5) / size, (ys + 0.5) / size], axis=-1)
    canvas = np.zeros((size, size))
    for x0, y0, x1, y1 in segments:
        a = np.array([x0, y0])
        b = np.array([x1, y1])
        ab = b - a
        t = np.clip(((pts - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
        nearest = a + t[..., None] * ab
        dist = np.linalg.norm(pts - nearest, axis=-1)
        canvas = np.maximum(canvas, np.clip(1.0 - dist / thickness, 0.0, 1.0))
    return canvas


def _affine_sample(canvas, angle, scale, shift, out_size):
    """Sample the canonical canvas under rotation/scale/translation with
    bilinear interpolation (zero outside)."""
    src = canvas.shape[0]
    ys, xs = np.mgrid[0:out_size, 0:out_size]
    cy = cx = (out_size - 1) / 2.0
    u = (xs - cx - shift[0])
    v = (ys - cy - shift[1])
    cos_a, sin_a = np.cos(-angle), np.sin(-angle)
    sx = (cos_a * u - sin_a * v) / scale * (src / out_size) + (src - 1) / 2.0
    sy = (sin_a * u + cos_a * v) / scale * (src / out_size) + (src - 1) / 2.0
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((out_size, out_size))
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            weight = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            valid = (yy >= 0) & (yy < src) & (xx >= 0) & (xx < src)
            vals = np.where(valid, canvas[np.clip(yy, 0, src - 1),
                                          np.clip(xx, 0, src - 1)], 0.0)
            out += weight * vals
    return out


def synth_affine_glyphs(classes: int, n_per_class: int, seed: int = 0,
                        size: int = 32, max_angle: float = 0.5,
                        scale_range=(0.7, 1.25), max_shift: float = 4.0,
                        noise: float = 0.08, split: str = "") -> Dataset:
    """Render ``classes`` distinct glyphs under random rotation, scale and
    translation, plus pixel noise.  Same seed, same dataset."""
    if not 1 <= classes <= 10:
        raise ShapeError(f"classes must be 1..10, got {classes}")
    rng = seed_stream(seed, "synth_glyphs")
    canvases = [_render_glyph(_GLYPH_SEGMENTS[c], size=48) for c in range(classes)]
    images = np.zeros((classes * n_per_class, size, size, 1))
    labels = np.zeros(classes * n_per_class, dtype=np.int64)
    i = 0
    for c in range(classes):
        for _ in range(n_per_class):
            angle = rng.uniform(-max_angle, max_angle)
            scale = rng.uniform(*scale_range)
            shift = rng.uniform(-max_shift, max_shift, size=2)
            img = _affine_sample(canvases[c], angle, scale, shift, size)
            img = img + rng.normal(0.0, noise, size=img.shape)
            images[i, :, :, 0] = np.clip(img, 0.0, 1.0)
            labels[i] = c
            i += 1
    order = rng.permutation(classes * n_per_class)
    return Dataset(images[order], labels[order], classes=classes, split=split)
