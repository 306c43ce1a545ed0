"""Overlapping 256x256 tiled inference with uniform overlap averaging."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PATCH_SIZE, patch_origins
from .errors import ConfigurationError

DEFAULT_STRIDE = 192


@dataclass(frozen=True)
class PatchGrid:
    height: int
    width: int
    size: int
    stride: int
    rows: tuple
    cols: tuple

    @property
    def padded_shape(self):
        return max(self.height, self.size), max(self.width, self.size)

    @property
    def origins(self):
        return [(y, x) for y in self.rows for x in self.cols]

    def __len__(self):
        return len(self.rows) * len(self.cols)

    def coverage(self):
        """Per-pixel patch counts over the (padded) canvas."""
        cov = np.zeros(self.padded_shape, np.int64)
        for y, x in self.origins:
            cov[y:y + self.size, x:x + self.size] += 1
        return cov


def plan_grid(h, w, stride=DEFAULT_STRIDE, size=PATCH_SIZE) -> PatchGrid:
    """Patch origins for an ``h`` x ``w`` image; sub-``size`` axes are padded up to ``size``."""
    if h < 1 or w < 1:
        raise ConfigurationError(f"image dims must be positive, got {h}x{w}")
    ph, pw = max(h, size), max(w, size)
    return PatchGrid(h, w, size, stride,
                     tuple(patch_origins(ph, size, stride)), tuple(patch_origins(pw, size, stride)))


def _as_predictor(model, batch_size):
    if hasattr(model, "predict"):
        return lambda batch: model.predict(batch, batch_size=batch_size)
    return model


def infer_tiled(model, image, grid: PatchGrid | None = None, stride=DEFAULT_STRIDE,
                batch_size=4, order=None):
    """Run ``model`` over every patch and average overlapping predictions.

    ``model`` is a DocCleanNet or any callable mapping ``(n, s, s, 3)`` to
    ``(n, s, s, c)``. ``image`` is ``(h, w, 3)`` in [0, 1]. ``order``
    optionally permutes patch processing (the result does not depend on it).
    Returns ``(h, w, c)`` float32.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ConfigurationError(f"image must be (h, w, c), got {image.shape}")
    h, w, _ = image.shape
    grid = grid or plan_grid(h, w, stride)
    if (grid.height, grid.width) != (h, w):
        raise ConfigurationError(f"grid planned for {grid.height}x{grid.width}, image is {h}x{w}")
    ph, pw = grid.padded_shape
    canvas = np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect") if (ph, pw) != (h, w) else image
    predict = _as_predictor(model, batch_size)
    origins = grid.origins
    if order is not None:
        origins = [origins[i] for i in order]
    s = grid.size
    acc = None
    count = np.zeros((ph, pw, 1), np.float64)
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        batch = np.stack([canvas[y:y + s, x:x + s] for y, x in chunk])
        out = np.asarray(predict(batch))
        if acc is None:
            acc = np.zeros((ph, pw, out.shape[3]), np.float64)
        for (y, x), patch in zip(chunk, out):
            acc[y:y + s, x:x + s] += patch
            count[y:y + s, x:x + s] += 1
    merged = acc / count
    return merged[:h, :w].astype(np.float32)


def binarize(image, threshold=0.5):
    """Pixels below ``threshold`` become ink (0), the rest background (1)."""
    return np.where(np.asarray(image) < threshold, 0.0, 1.0).astype(np.float32)
