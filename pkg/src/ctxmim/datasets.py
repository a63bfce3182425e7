"""Image sources: a synthetic dense-object scene generator and a PNG folder loader."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .config import SynthConfig
from .errors import ConfigError, DataError, RangeError

__all__ = [
    "LabeledImage",
    "RenderedObject",
    "synth_generate",
    "render_object_mask",
    "object_footprint",
    "load_image_folder",
    "load_png",
    "normalize",
]

log = logging.getLogger(__name__)

# background level is drawn from this interval; objects are always brighter
BACKGROUND_RANGE = (0.1, 0.45)
OBJECT_RANGE = (0.55, 1.0)
# "mixed" contrast: mid-grey backgrounds, objects darker or brighter at random
MIXED_BACKGROUND_RANGE = (0.35, 0.65)
MIXED_OBJECT_RANGES = ((0.0, 0.25), (0.75, 1.0))
TEXTURE_CELLS = 4


@dataclass
class RenderedObject:
    shape: str
    top: int
    left: int
    height: int
    width: int
    color: np.ndarray


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: int
    object_footprints: list[frozenset[int]] = field(default_factory=list)
    objects: list[RenderedObject] = field(default_factory=list)
    background: float = 0.0


def normalize(raw) -> np.ndarray:
    """Map 8-bit pixel values to [0, 1] by exact division by 255."""
    arr = np.asarray(raw)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise RangeError("8-bit pixel values must lie in [0, 255]")
    return arr.astype(np.float64) / 255.0


def render_object_mask(obj: RenderedObject, height: int, width: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of the pixels an object covers."""
    out = np.zeros((height, width), dtype=bool)
    if obj.shape == "rectangle":
        out[obj.top:obj.top + obj.height, obj.left:obj.left + obj.width] = True
        return out
    # ellipse inscribed in the bounding box, sampled at pixel centres
    yy = np.arange(obj.height)[:, None] + 0.5
    xx = np.arange(obj.width)[None, :] + 0.5
    inside = ((yy - obj.height / 2) / (obj.height / 2)) ** 2 \
        + ((xx - obj.width / 2) / (obj.width / 2)) ** 2 <= 1.0
    out[obj.top:obj.top + obj.height, obj.left:obj.left + obj.width] = inside
    return out


def object_footprint(obj_mask: np.ndarray, patch_size: int) -> frozenset[int]:
    """Row-major indices of the patches that contain at least one object pixel."""
    h, w = obj_mask.shape
    n_rows, n_cols = h // patch_size, w // patch_size
    hit = obj_mask.reshape(n_rows, patch_size, n_cols, patch_size).any(axis=(1, 3))
    return frozenset(int(i) for i in np.flatnonzero(hit.reshape(-1)))


def _value_noise(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth noise in [-1, 1]: a coarse random lattice, bilinearly upsampled."""
    lattice = rng.uniform(-1.0, 1.0, size=(TEXTURE_CELLS + 1, TEXTURE_CELLS + 1))
    ys = np.linspace(0, TEXTURE_CELLS, height, endpoint=False) + TEXTURE_CELLS / (2 * height)
    xs = np.linspace(0, TEXTURE_CELLS, width, endpoint=False) + TEXTURE_CELLS / (2 * width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = lattice[y0][:, x0]
    b = lattice[y0][:, x0 + 1]
    c = lattice[y0 + 1][:, x0]
    d = lattice[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _label(cfg: SynthConfig, objects: list[RenderedObject], background: float) -> int:
    k = cfg.num_classes
    if cfg.label_rule == "object-count-bucket":
        k_min, k_max = cfg.count_range
        span = k_max - k_min + 1
        return min(k - 1, (len(objects) - k_min) * k // span)
    if cfg.label_rule == "dominant-shape":
        n_ellipse = sum(o.shape == "ellipse" for o in objects)
        return int(n_ellipse * 2 > len(objects)) % k
    lo, hi = MIXED_BACKGROUND_RANGE if cfg.contrast == "mixed" else BACKGROUND_RANGE
    return min(k - 1, int((background - lo) / (hi - lo) * k))


def synth_generate(cfg: SynthConfig, seed: int, count: int) -> Iterator[LabeledImage]:
    """Yield ``count`` synthetic scenes of several objects on a textured background.

    With ``contrast="bright"`` objects are lighter than the background; with
    ``"mixed"`` each object is independently darker or lighter, so global
    intensity carries little information about the object count.

    Object count, shape, size, position and colour are drawn per image; later
    objects are painted over earlier ones. Each footprint records the patches
    touched by the object's own silhouette, occluded or not.
    """
    h, w = cfg.image_size
    if cfg.size_range[1] >= min(h, w):
        raise ConfigError("object larger than image")
    rng = np.random.default_rng(seed)
    k_min, k_max = cfg.count_range
    s_min, s_max = cfg.size_range
    mixed = cfg.contrast == "mixed"
    for _ in range(count):
        background = float(rng.uniform(*(MIXED_BACKGROUND_RANGE if mixed else BACKGROUND_RANGE)))
        texture = _value_noise(rng, h, w) * cfg.texture_amplitude
        tint = rng.uniform(-0.05, 0.05, size=(cfg.channels, 1, 1))
        img = np.clip(background + texture[None] + tint, 0.0, 1.0)
        img = np.broadcast_to(img, (cfg.channels, h, w)).copy()

        objects, footprints = [], []
        for _ in range(int(rng.integers(k_min, k_max + 1))):
            shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            oh, ow = (int(v) for v in rng.integers(s_min, s_max + 1, size=2))
            top = int(rng.integers(0, h - oh + 1))
            left = int(rng.integers(0, w - ow + 1))
            span = MIXED_OBJECT_RANGES[int(rng.integers(2))] if mixed else OBJECT_RANGE
            color = rng.uniform(*span, size=cfg.channels)
            obj = RenderedObject(shape, top, left, oh, ow, color)
            m = render_object_mask(obj, h, w)
            img[:, m] = color[:, None]
            objects.append(obj)
            footprints.append(object_footprint(m, cfg.patch_size))

        yield LabeledImage(img, _label(cfg, objects, background), footprints, objects, background)


def load_png(path: str | Path, size: tuple[int, int], channels: int) -> np.ndarray:
    """Decode one PNG, center-crop to the target aspect, resize, normalize to (C, H, W)."""
    th, tw = size
    with Image.open(path) as im:
        if im.format != "PNG":
            raise UnidentifiedImageError(f"{path} is not a PNG")
        im = im.convert("L" if channels == 1 else "RGB")
        w, h = im.size
        target_aspect = tw / th
        if w / h > target_aspect:
            cw, ch = round(h * target_aspect), h
        else:
            cw, ch = w, round(w / target_aspect)
        left, top = (w - cw) // 2, (h - ch) // 2
        im = im.crop((left, top, left + cw, top + ch))
        if im.size != (tw, th):
            im = im.resize((tw, th), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.uint8)
    if channels == 1:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
        if channels != 3:
            raise DataError(f"PNG loading supports 1 or 3 channels, not {channels}")
    return normalize(arr)


def load_image_folder(path: str | Path, size: tuple[int, int],
                      channels: int = 3) -> Iterator[LabeledImage]:
    """Stream images from ``path/<class>/*.png`` in sorted order.

    The directory is scanned eagerly so an empty tree fails immediately;
    decoding is lazy. Class indices follow the sorted subfolder names.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"image folder not found: {root}")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    files = []
    for label, name in enumerate(classes):
        for f in sorted((root / name).iterdir()):
            if f.is_file() and f.suffix.lower() == ".png":
                files.append((f, label))
            elif f.is_file():
                log.warning("skipping non-PNG file %s", f)
    for f in sorted(p for p in root.iterdir() if p.is_file()):
        log.warning("skipping %s: images must live in a class subfolder", f)
    if not files:
        raise DataError(f"no PNG images found under {root}")
    return _decode_files(files, size, channels)


def _decode_files(files, size, channels) -> Iterator[LabeledImage]:
    for f, label in files:
        try:
            pixels = load_png(f, size, channels)
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            log.warning("skipping undecodable image %s: %s", f, exc)
            continue
        yield LabeledImage(pixels, label)
