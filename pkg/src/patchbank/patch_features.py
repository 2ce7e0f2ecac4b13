"""Local aggregation and hierarchy merging of CNN feature maps.

A feature map becomes locally aware by mean-pooling an s x s neighborhood
around every cell (windows shrink at borders, no zero padding). Maps from
several hierarchy levels are merged by bilinearly upsampling the coarser
ones to the first map's grid and concatenating channels; the result is
flattened to one feature vector per grid cell.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    EmptyList,
    EvenPatchSize,
    InvalidShape,
    NonDecreasingResolution,
    NonFiniteValue,
    PatchTooLarge,
)
from .feature_io import TensorF32


@dataclass(frozen=True)
class PatchFeatureSet:
    """Flattened grid of patch vectors; row index = h * W + w."""

    grid: tuple  # (H, W)
    vectors: np.ndarray  # (H*W, dim) float32

    def __post_init__(self):
        h, w = self.grid
        v = self.vectors
        if h < 1 or w < 1:
            raise InvalidShape(f"bad grid {self.grid}")
        if v.ndim != 2 or v.shape[0] != h * w:
            raise InvalidShape(
                f"vectors shape {v.shape} does not match grid {self.grid}")
        if not np.isfinite(v).all():
            raise NonFiniteValue("patch vectors contain NaN or Inf")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def aggregate_neighborhood(fm: TensorF32, s: int) -> TensorF32:
    """Mean-pool the s x s neighborhood around every cell of a (C, H, W) map.

    s must be an odd positive integer and no larger than 2*min(H, W) - 1
    (beyond that every window saturates the whole map).
    """
    a = fm.array
    if a.ndim != 3:
        raise InvalidShape(f"expected a (C, H, W) map, got shape {a.shape}")
    if not isinstance(s, int) or s < 1 or s % 2 == 0:
        raise EvenPatchSize(f"patch size must be a positive odd int, got {s}")
    _, h, w = a.shape
    if s > 2 * min(h, w) - 1:
        raise PatchTooLarge(f"patch size {s} exceeds limit for {h}x{w} map")
    if s == 1:
        return fm
    out = kernels.box_mean(a.astype(np.float64), s)
    return TensorF32(out.astype(np.float32))


def merge_hierarchies(maps) -> PatchFeatureSet:
    """Merge per-level maps into one PatchFeatureSet.

    The first map fixes the output grid; every later map is bilinearly
    upsampled (half-pixel centers) to that grid and its channels appended.
    Later maps must not be larger than the first.
    """
    maps = list(maps)
    if not maps:
        raise EmptyList("need at least one feature map to merge")
    arrays = []
    for m in maps:
        a = m.array if isinstance(m, TensorF32) else np.asarray(m)
        if a.ndim != 3:
            raise InvalidShape(f"expected (C, H, W) maps, got shape {a.shape}")
        arrays.append(a)
    _, h0, w0 = arrays[0].shape
    grid = (h0, w0)
    chans = [arrays[0].astype(np.float64)]
    for a in arrays[1:]:
        _, h, w = a.shape
        if h > h0 or w > w0:
            raise NonDecreasingResolution(
                f"later map {h}x{w} larger than first {h0}x{w0}")
        if (h, w) == grid:
            chans.append(a.astype(np.float64))
        else:
            chans.append(kernels.bilinear_resize(a.astype(np.float64), h0, w0))
    stacked = np.concatenate(chans, axis=0)  # (sum C_l, H, W)
    vectors = stacked.transpose(1, 2, 0).reshape(h0 * w0, -1)
    return PatchFeatureSet(grid=grid,
                           vectors=np.ascontiguousarray(vectors,
                                                        dtype=np.float32))
