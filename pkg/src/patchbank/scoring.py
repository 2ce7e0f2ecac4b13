"""Anomaly scores against a memory bank, normalization, fusion.

A patch's raw score is its distance to the nearest bank row, shrunk by a
softmax factor over that row's own neighborhood in the bank: a test
feature whose nearest bank row sits in a dense region is penalized less
than one matching an isolated row. Image score is the max over patches.
Scores are normalized to modified z-scores using statistics fitted on
training-set scores so that several models' outputs can be averaged.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import (
    BankTooSmall,
    DegenerateVariance,
    DimMismatch,
    EmptyInput,
    EmptyList,
    EmptyMap,
    InvalidTarget,
    KOutOfRange,
    LengthMismatch,
    NonFiniteValue,
)

BETA = 1.4826  # MAD-to-sigma consistency constant
MAD_EPS = 1e-12


@dataclass
class NormStats:
    median: float
    mad: float
    beta: float = BETA


@dataclass(frozen=True)
class ScoreMap:
    """Per-patch scores on a grid; row index = h * W + w."""

    grid: tuple  # (H, W)
    values: np.ndarray  # (H*W,) float64, nonnegative
    upsampled: Optional[np.ndarray] = None  # (h_img, w_img) float64

    def __post_init__(self):
        h, w = self.grid
        v = self.values
        if v.ndim != 1 or v.shape[0] != h * w:
            raise EmptyMap(
                f"values shape {v.shape} does not match grid {self.grid}")
        if not np.isfinite(v).all():
            raise NonFiniteValue("score map contains NaN or Inf")


def patch_scores(bank, feats, b: int = 5) -> np.ndarray:
    """Reweighted nearest-bank-row distance for each feature row.

    b is the bank-neighborhood size for the softmax reweighting; the
    nearest row itself is part of its own neighborhood, so the factor
    lies in [1 - 1/b, 1) and 0 <= score <= raw distance.
    """
    scores, _ = patch_scores_detailed(bank, feats, b)
    return scores


def patch_scores_detailed(bank, feats, b: int = 5):
    """Like patch_scores but also returns the raw nearest distances."""
    if not isinstance(b, int) or b < 2:
        raise KOutOfRange(f"neighborhood size b must be an int >= 2, got {b}")
    m = bank.coreset.shape[0]
    if b > m:
        raise BankTooSmall(f"b={b} exceeds bank size {m}")
    feats = np.asarray(feats)
    if feats.ndim != 2 or feats.shape[1] != bank.dim:
        raise DimMismatch(
            f"features {feats.shape} incompatible with bank dim {bank.dim}")
    if not np.isfinite(feats).all():
        raise NonFiniteValue("query features contain NaN or Inf")

    rows64 = bank.cached("rows64",
                         lambda: bank.coreset.astype(np.float64))
    nb = bank.cached(("nn", b), lambda: kernels.nn_table(rows64, b))
    return kernels.score_patches(feats.astype(np.float64), rows64, nb)


def image_score(scores) -> float:
    """Max patch score; the image is as anomalous as its worst patch."""
    values = scores.values if isinstance(scores, ScoreMap) else np.asarray(
        scores, dtype=np.float64)
    if values.size == 0:
        raise EmptyMap("no patch scores")
    return float(values.max())


def upsample_map(smap: ScoreMap, image_size, smooth_sigma: float) -> ScoreMap:
    """Bilinearly upsample the grid to image size, then Gaussian-smooth.

    smooth_sigma is in output pixels; 0 disables smoothing. Returns a new
    ScoreMap with the upsampled field set.
    """
    h, w = image_size
    gh, gw = smap.grid
    if h < gh or w < gw:
        raise InvalidTarget(
            f"target {h}x{w} smaller than grid {gh}x{gw}")
    if smooth_sigma < 0:
        raise InvalidTarget(f"smooth_sigma must be >= 0, got {smooth_sigma}")
    img = kernels.bilinear_resize(
        smap.values.reshape(1, gh, gw).astype(np.float64), h, w)[0]
    if smooth_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=smooth_sigma)
    np.maximum(img, 0.0, out=img)  # clip float dust from the blur
    return replace(smap, upsampled=img)


def fit_norm_stats(train_scores) -> NormStats:
    """Median and median-absolute-deviation of training scores."""
    s = np.asarray(train_scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInput("cannot fit normalization stats on no scores")
    med = float(np.median(s))
    mad = float(np.median(np.abs(s - med)))
    return NormStats(median=med, mad=mad)


def normalize(scores, stats: NormStats) -> np.ndarray:
    """Modified z-score (s - median) / (beta * mad); rank-preserving."""
    s = np.asarray(scores, dtype=np.float64)
    return (s - stats.median) / (stats.beta * max(stats.mad, MAD_EPS))


def fuse(score_lists) -> np.ndarray:
    """Elementwise mean of equal-length normalized score lists."""
    lists = [np.asarray(s, dtype=np.float64) for s in score_lists]
    if not lists:
        raise EmptyList("nothing to fuse")
    length = lists[0].shape
    for s in lists[1:]:
        if s.shape != length:
            raise LengthMismatch(
                f"score lists differ in length: {length} vs {s.shape}")
    return np.mean(np.stack(lists, axis=0), axis=0)


def discriminability(normal, abnormal) -> float:
    """|mean difference| over pooled population standard deviation."""
    a = np.asarray(normal, dtype=np.float64)
    b = np.asarray(abnormal, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise EmptyInput("need at least two scores per group")
    pooled = math.sqrt((a.var() + b.var()) / 2.0)
    if pooled == 0.0:
        raise DegenerateVariance("both groups are constant")
    return float(abs(b.mean() - a.mean()) / pooled)
