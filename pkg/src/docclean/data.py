"""Paired noisy/clean datasets, multi-scale patch extraction, augmentation and splitting."""
from __future__ import annotations

import io
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DatasetError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
COLOR_MODES = ("gray", "color", "binary")
PATCH_SIZE = 256
SCALES = (0.7, 1.0, 1.4)


@dataclass(frozen=True)
class PairRecord:
    stem: str
    noisy_path: str
    clean_path: str
    height: int
    width: int


@dataclass
class PairedDataset:
    root: str
    records: list
    color_mode: str = "gray"

    def __len__(self):
        return len(self.records)

    @property
    def out_channels(self):
        return 3 if self.color_mode == "color" else 1


def _image_files(directory):
    out = {}
    dupes = []
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        if stem in out:
            dupes.append(f"{directory}: more than one image with stem {stem!r}")
            continue
        out[stem] = os.path.join(directory, name)
    return out, dupes


def scan_pairs(root, color_mode="gray") -> PairedDataset:
    """Pair ``root/noisy/<stem>.*`` with ``root/clean/<stem>.*``.

    Records are sorted by stem. Every problem (orphans, unreadable files,
    size mismatches) is collected and raised together as a DatasetError.
    """
    if color_mode not in COLOR_MODES:
        raise ConfigurationError(f"color_mode must be one of {COLOR_MODES}, got {color_mode!r}")
    root = str(root)
    missing = [os.path.join(root, d) for d in ("noisy", "clean") if not os.path.isdir(os.path.join(root, d))]
    if missing:
        raise DatasetError([f"missing directory: {p}" for p in missing])
    noisy, problems = _image_files(os.path.join(root, "noisy"))
    clean, more = _image_files(os.path.join(root, "clean"))
    problems += more
    for stem in sorted(set(noisy) - set(clean)):
        problems.append(f"{stem}: no clean counterpart for {noisy[stem]}")
    for stem in sorted(set(clean) - set(noisy)):
        problems.append(f"{stem}: no noisy counterpart for {clean[stem]}")
    records = []
    for stem in sorted(set(noisy) & set(clean)):
        try:
            with Image.open(noisy[stem]) as a, Image.open(clean[stem]) as b:
                sa, sb = a.size, b.size
        except OSError as exc:
            problems.append(f"{stem}: unreadable image ({exc})")
            continue
        if sa != sb:
            problems.append(
                f"{stem}: dimension mismatch, noisy {sa[1]}x{sa[0]} vs clean {sb[1]}x{sb[0]} (h x w)"
            )
            continue
        records.append(PairRecord(stem, noisy[stem], clean[stem], sa[1], sa[0]))
    if problems:
        raise DatasetError(problems)
    if not records:
        warnings.warn(f"no image pairs found under {root}", stacklevel=2)
    return PairedDataset(root, records, color_mode)


# ------------------------------------------------------------------ image io


def load_image(path, channels=3):
    """Read an 8-bit image as float32 ``(h, w, channels)`` in [0, 1]."""
    if channels not in (1, 3):
        raise ConfigurationError("channels must be 1 or 3")
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr.reshape(arr.shape[0], arr.shape[1], channels)


def to_uint8(x):
    """round(x * 255), clamped to [0, 255]."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, x):
    arr = to_uint8(x)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def resize_bilinear(img, scale):
    """Bilinear resize of an ``(h, w, c)`` float image by ``scale``."""
    if scale == 1.0:
        return img
    h, w, c = img.shape
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    chans = [
        np.asarray(Image.fromarray(np.ascontiguousarray(img[:, :, k], np.float32), mode="F")
                   .resize(size, Image.BILINEAR))
        for k in range(c)
    ]
    return np.stack(chans, axis=2)


# ------------------------------------------------------------------ patches


def patch_origins(dim, size=PATCH_SIZE, stride=192):
    """Origins 0, s, 2s, ... along one axis, the last clamped to ``dim - size``."""
    if not 1 <= stride <= size:
        raise ConfigurationError(f"stride must be in [1, {size}], got {stride}")
    if dim <= size:
        return [0]
    out = list(range(0, dim - size, stride))
    out.append(dim - size)
    return out


@dataclass
class Patch:
    noisy: np.ndarray
    target: np.ndarray
    source: str
    scale: float
    origin: tuple


@dataclass
class PatchSet:
    patches: list = field(default_factory=list)

    def __len__(self):
        return len(self.patches)

    def __getitem__(self, i):
        return self.patches[i]

    def arrays(self, indices=None):
        """Stacked ``(noisy, target)`` arrays for the given indices (all by default)."""
        idx = range(len(self.patches)) if indices is None else indices
        sel = [self.patches[i] for i in idx]
        return np.stack([p.noisy for p in sel]), np.stack([p.target for p in sel])


def _pad_to(img, size):
    h, w, c = img.shape
    if h >= size and w >= size:
        return img
    out = np.zeros((max(h, size), max(w, size), c), img.dtype)
    out[:h, :w] = img
    return out


def patches_from_pair(noisy, target, source="", stride=192, scales=SCALES,
                      size=PATCH_SIZE, binary=False):
    """Cut aligned ``size`` x ``size`` patches from one image pair at each scale."""
    out = []
    for scale in scales:
        a = resize_bilinear(noisy, scale)
        b = resize_bilinear(target, scale)
        if binary and scale != 1.0:
            b = (b >= 0.5).astype(np.float32)
        a, b = _pad_to(a, size), _pad_to(b, size)
        for y in patch_origins(a.shape[0], size, stride):
            for x in patch_origins(a.shape[1], size, stride):
                out.append(Patch(
                    np.ascontiguousarray(a[y:y + size, x:x + size]),
                    np.ascontiguousarray(b[y:y + size, x:x + size]),
                    source, scale, (y, x),
                ))
    return out


def extract_patches(ds: PairedDataset, stride=192, scales=SCALES, size=PATCH_SIZE) -> PatchSet:
    """Multi-scale overlapping patches for every pair of ``ds``.

    Inputs are RGB; targets have one channel (gray/binary) or three (color).
    Images still smaller than ``size`` after scaling are zero-padded.
    """
    ps = PatchSet()
    for rec in ds.records:
        noisy = load_image(rec.noisy_path, 3)
        target = load_image(rec.clean_path, ds.out_channels)
        if ds.color_mode == "binary":
            target = (target >= 0.5).astype(np.float32)
        ps.patches += patches_from_pair(noisy, target, rec.stem, stride, scales, size,
                                        binary=ds.color_mode == "binary")
    return ps


def split(ps: PatchSet, fraction=0.8, seed=0):
    """Seeded shuffle split into ``(train, val)``; both are nonempty."""
    if not 0 < fraction < 1:
        raise ConfigurationError(f"split fraction must be in (0, 1), got {fraction}")
    n = len(ps)
    if n < 2:
        raise DatasetError([f"need at least 2 patches to split, got {n}"])
    order = np.random.default_rng(seed).permutation(n)
    k = min(max(int(round(n * fraction)), 1), n - 1)
    return (PatchSet([ps.patches[i] for i in sorted(order[:k])]),
            PatchSet([ps.patches[i] for i in sorted(order[k:])]))


# ------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentSpec:
    """Photometric augmentation of the noisy input.

    A patch is augmented with probability ``probability``; each transform
    is then applied with its own probability.
    """
    seed: int = 0
    probability: float = 0.3
    p_brightness_contrast: float = 0.5
    p_jpeg: float = 0.3
    p_iso: float = 0.3
    p_blur: float = 0.3
    brightness: float = 0.2
    contrast: float = 0.2
    jpeg_quality: tuple = (40, 95)
    iso_sigma: tuple = (0.01, 0.05)
    blur_kernel: tuple = (3, 7)

    def __post_init__(self):
        for name in ("probability", "p_brightness_contrast", "p_jpeg", "p_iso", "p_blur"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ConfigurationError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.blur_kernel
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"invalid blur kernel range {self.blur_kernel}")


def brightness_contrast(x, brightness=0.0, contrast=0.0):
    return np.clip(x * (1.0 + contrast) + brightness, 0.0, 1.0)


def jpeg_noise(x, quality):
    buf = io.BytesIO()
    arr = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr)
    img.save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    with Image.open(buf) as dec:
        out = np.asarray(dec, dtype=np.float32) / 255.0
    return out.reshape(x.shape)


def iso_noise(x, sigma, rng):
    # luminance grain shared by all channels plus weaker per-channel colour grain
    lum = rng.standard_normal(x.shape[:2] + (1,)) * sigma
    col = rng.standard_normal(x.shape) * (sigma * 0.5)
    return np.clip(x + lum + col, 0.0, 1.0).astype(x.dtype)


def _motion_kernel(k, angle):
    ker = np.zeros((k, k))
    c = k // 2
    if angle == 0:
        ker[c, :] = 1
    elif angle == 90:
        ker[:, c] = 1
    elif angle == 45:
        ker[np.arange(k)[::-1], np.arange(k)] = 1
    else:
        ker[np.arange(k), np.arange(k)] = 1
    return ker / ker.sum()


def blur(x, kind, k, rng=None):
    """Gaussian, motion or median blur with an odd ``k`` x ``k`` support."""
    if kind == "gaussian":
        sigma = 0.3 * ((k - 1) * 0.5 - 1) + 0.8
        return ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), truncate=(k // 2) / sigma, mode="reflect")
    if kind == "motion":
        angle = 0 if rng is None else int(rng.choice([0, 45, 90, 135]))
        ker = _motion_kernel(k, angle)
        return np.stack([ndimage.convolve(x[:, :, c], ker, mode="reflect") for c in range(x.shape[2])], axis=2)
    if kind == "median":
        return ndimage.median_filter(x, size=(k, k, 1), mode="reflect")
    raise ConfigurationError(f"unknown blur {kind!r}")


def augment(noisy, target, spec: AugmentSpec, index=0):
    """Augment one pair; the target is returned untouched.

    Randomness comes only from ``(spec.seed, index)``, so results do not
    depend on processing order.
    """
    rng = np.random.default_rng([spec.seed, index])
    if rng.random() >= spec.probability:
        return noisy, target
    x = np.asarray(noisy, dtype=np.float32)
    if rng.random() < spec.p_brightness_contrast:
        b = rng.uniform(-spec.brightness, spec.brightness)
        c = rng.uniform(-spec.contrast, spec.contrast)
        x = brightness_contrast(x, b, c)
    if rng.random() < spec.p_jpeg:
        x = jpeg_noise(x, rng.integers(spec.jpeg_quality[0], spec.jpeg_quality[1] + 1))
    if rng.random() < spec.p_iso:
        x = iso_noise(x, rng.uniform(*spec.iso_sigma), rng)
    if rng.random() < spec.p_blur:
        ks = [k for k in range(spec.blur_kernel[0], spec.blur_kernel[1] + 1) if k % 2 == 1] or [spec.blur_kernel[0]]
        k = int(rng.choice(ks))
        kind = ("gaussian", "motion", "median")[rng.integers(3)]
        x = blur(x, kind, k, rng)
    return np.clip(x, 0.0, 1.0).astype(np.float32), target
