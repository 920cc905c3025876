"""Dataset plumbing: IDX ingestion, synthetic scenes, and view partitioning.

Scenes are wider than the per-device view; devices receive horizontally
shifted crops whose pairwise overlap realizes the requested ratio.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FIMG_MAGIC = b"FIMG"

N_CLASSES = 4


@dataclass
class ImageSample:
    """One device view: pixels in [0,1], optional label, placement offset."""
    pixels: np.ndarray              # (H, W, C) float64
    label: Optional[int] = None
    view_offset: tuple = (0, 0)     # (dx, dy) within the source scene


@dataclass
class Shard:
    device_id: int
    samples: list = field(default_factory=list)
    realized_delta: float = 0.0


@dataclass
class Scene:
    pixels: np.ndarray              # (H, W_s, C) float64 in [0,1]
    label: Optional[int] = None


# -- IDX format ---------------------------------------------------------------

def _read_exact(fh, n, path, what):
    blob = fh.read(n)
    if len(blob) != n:
        raise ValueError(f"{path}: truncated while reading {what} "
                         f"at offset {fh.tell() - len(blob)}")
    return blob


def load_idx_images(path):
    """Read big-endian IDX u8 images, scale to [0,1], pad 28x28 to 32x32."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, path, "image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"{path}: bad image magic 0x{magic:08x} at offset 0")
        raw = _read_exact(fh, count * rows * cols, path, "pixel data")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after pixel data")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols)
    images = images.astype(np.float64) / 255.0
    if (rows, cols) == (28, 28):
        images = np.pad(images, ((0, 0), (2, 2), (2, 2)))
    return images[..., None]


def load_idx_labels(path):
    with open(path, "rb") as fh:
        header = _read_exact(fh, 8, path, "label header")
        magic, count = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"{path}: bad label magic 0x{magic:08x} at offset 0")
        raw = _read_exact(fh, count, path, "label data")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images_u8):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    count, rows, cols = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        fh.write(images_u8.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


# -- FIMG raw image dumps -----------------------------------------------------

def write_fimg(path, image):
    """Dump a [0,1] float image as u8 with a 16-byte header."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {image.shape}")
    h, w, c = image.shape
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(FIMG_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(quantized.tobytes())


def load_fimg(path):
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, path, "image header")
        if header[:4] != FIMG_MAGIC:
            raise ValueError(f"{path}: bad magic {header[:4]!r} at offset 0")
        h, w, c = struct.unpack("<III", header[4:])
        raw = _read_exact(fh, h * w * c, path, "pixel data")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c)
    return pixels.astype(np.float64) / 255.0


# -- synthetic scenes ---------------------------------------------------------

def _square_wave(coords, half_period, phase):
    return ((coords + phase) // half_period) % 2


def _classification_scene(rng, height, width):
    """Scene whose class survives any horizontal crop.

    Classes: 0 horizontal stripes, 1 vertical stripes, 2 diagonal
    stripes, 3 checkerboard.  Stripe period, phase, and the two
    intensity levels are randomized per scene.
    """
    label = int(rng.integers(N_CLASSES))
    half_period = int(rng.integers(2, 5))
    phase = int(rng.integers(0, 2 * half_period))
    lo = rng.uniform(0.05, 0.35)
    hi = rng.uniform(0.65, 0.95)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    if label == 0:
        wave = _square_wave(rows, half_period, phase) + np.zeros_like(cols)
    elif label == 1:
        wave = np.zeros_like(rows) + _square_wave(cols, half_period, phase)
    elif label == 2:
        wave = _square_wave(rows + cols, half_period, phase)
    else:
        wave = (_square_wave(rows, half_period, phase)
                ^ _square_wave(cols, half_period, phase))
    pixels = np.where(wave > 0, hi, lo).astype(np.float64)
    pixels = pixels + rng.normal(0.0, 0.04, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    return Scene(pixels[..., None], label)


def _texture_scene(rng, height, width):
    """Color scene: per-channel linear gradients plus random rectangles."""
    y = np.linspace(0.0, 1.0, height)[:, None]
    x = np.linspace(0.0, 1.0, width)[None, :]
    pixels = np.empty((height, width, 3))
    for ch in range(3):
        a, b, c = rng.uniform(-0.5, 0.5, size=3)
        pixels[:, :, ch] = 0.5 + a * y + b * x + c * y * x
    for _ in range(5):
        h = int(rng.integers(height // 4, height))
        w = int(rng.integers(width // 6, width // 2))
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        color = rng.uniform(0.0, 1.0, size=3)
        pixels[top:top + h, left:left + w] = color
    pixels = pixels + rng.normal(0.0, 0.02, size=pixels.shape)
    return Scene(np.clip(pixels, 0.0, 1.0), None)


def synth_scene(rng, height, width, style):
    """Generate one scene; style 'classes' labels it, 'texture' does not."""
    if width < 1 or height < 1:
        raise ValueError("scene extent must be positive")
    if style == "classes":
        return _classification_scene(rng, height, width)
    if style == "texture":
        return _texture_scene(rng, height, width)
    raise ValueError(f"unknown scene style {style!r}")


# -- partitioning -------------------------------------------------------------

def overlap_stride(delta, view_width):
    """Horizontal offset between consecutive views (round-half-up)."""
    return int(np.floor((1.0 - delta) * view_width + 0.5))


def required_scene_width(n_devices, delta, view_width):
    return (n_devices - 1) * overlap_stride(delta, view_width) + view_width


def partition(scenes, n_devices, delta, view_width):
    """Split scenes into per-device shards of horizontally shifted crops.

    Device i sees the crop starting at column i * stride of every scene,
    so consecutive devices overlap by (view_width - stride) columns.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"overlap ratio must be in [0, 1], got {delta}")
    if n_devices < 1:
        raise ValueError(f"need at least one device, got {n_devices}")
    stride = overlap_stride(delta, view_width)
    needed = required_scene_width(n_devices, delta, view_width)
    realized = (view_width - stride) / view_width
    shards = [Shard(device_id=i, realized_delta=realized)
              for i in range(n_devices)]
    for scene in scenes:
        width = scene.pixels.shape[1]
        if needed > width:
            raise ValueError(
                f"scene width {width} too small: {n_devices} devices at "
                f"overlap {delta} need at least {needed} columns")
        for i in range(n_devices):
            dx = i * stride
            crop = scene.pixels[:, dx:dx + view_width].copy()
            shards[i].samples.append(
                ImageSample(crop, label=scene.label, view_offset=(dx, 0)))
    return shards


def make_scenes(rng, count, n_devices, delta, view_extent, style):
    """Generate `count` scenes exactly wide enough for the partition."""
    width = required_scene_width(n_devices, delta, view_extent)
    return [synth_scene(rng, view_extent, width, style) for _ in range(count)]
