"""Greedy k-center coreset selection and the persisted memory bank.

The bank holds a small subset of training-feature rows chosen so that
every training feature is close to some chosen row (k-center objective,
greedy 2-approximation). Rows are stored exactly as the float32
embeddings they were selected from, so a query identical to a training
feature has distance exactly zero.
"""

import hashlib
import io
import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import (
    CorruptPayload,
    DimMismatch,
    EmptyInput,
    FractionOutOfRange,
    IoFailure,
    NonFiniteValue,
    VersionMismatch,
    VersionMismatchWarning,
)
from .repr_learning import RepresentationModel, embed
from .scoring import NormStats

_MAGIC = b"RCPB"
_VERSION = 1


@dataclass
class MemoryBank:
    dim: int
    coreset: np.ndarray  # (M, dim) float32
    fraction: float
    fingerprint: str = ""
    norm_stats: Optional[NormStats] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        c = self.coreset
        if c.ndim != 2 or c.shape[0] < 1 or c.shape[1] != self.dim:
            raise DimMismatch(
                f"coreset shape {c.shape} does not match dim {self.dim}")
        if c.dtype != np.float32:
            raise DimMismatch(f"coreset must be float32, got {c.dtype}")
        if not np.isfinite(c).all():
            raise NonFiniteValue("coreset contains NaN or Inf")

    def cached(self, key, fn):
        """Memoize derived structures (float64 rows, neighbor tables)."""
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]


def greedy_coreset(features, fraction: float, seed: int,
                   first_index: Optional[int] = None,
                   projection=None) -> np.ndarray:
    """Greedy k-center pick of max(1, round(fraction * n)) row indices.

    The first center is a seeded uniform draw (or ``first_index``); each
    subsequent center is the point farthest from all chosen centers, ties
    broken toward the lowest index. ``projection`` optionally maps the
    feature matrix to a cheaper space before distance computations (hook
    for random-projection tricks; identity by default).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput(f"need a nonempty 2-D feature matrix, got {x.shape}")
    if not 0.0 < fraction <= 1.0:
        raise FractionOutOfRange(f"fraction must be in (0, 1], got {fraction}")
    n = x.shape[0]
    m = max(1, round(fraction * n))
    if first_index is None:
        first_index = int(np.random.default_rng(seed).integers(n))
    if not 0 <= first_index < n:
        raise EmptyInput(f"first_index {first_index} out of range [0, {n})")
    if projection is not None:
        x = np.ascontiguousarray(projection(x), dtype=np.float64)
    idx, _ = kernels.greedy_select(x, m, first_index)
    return idx


def build_bank(model: RepresentationModel, train_sets, fraction: float,
               seed: int, fingerprint: str = "") -> MemoryBank:
    """Embed all training patches with live f and select the coreset.

    norm_stats is left unset; the scoring stage fits it from training
    image scores.
    """
    sets = list(train_sets)
    if not sets:
        raise EmptyInput("no training feature sets")
    emb = np.concatenate([embed(model, ps) for ps in sets], axis=0)
    idx = greedy_coreset(emb, fraction, seed)
    return MemoryBank(dim=emb.shape[1], coreset=emb[idx].copy(),
                      fraction=fraction, fingerprint=fingerprint)


def config_fingerprint(train_cfg, category: str) -> str:
    """SHA-256 over the train config and dataset category.

    Ties a bank to the model configuration that produced it; scoring
    warns when they disagree.
    """
    doc = {"category": category, "train": train_cfg.to_dict()}
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_bank(path, bank: MemoryBank) -> None:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    fp = bank.fingerprint.encode("utf-8")
    buf.write(struct.pack("<IIQdI", _VERSION, bank.dim,
                          bank.coreset.shape[0], bank.fraction, len(fp)))
    buf.write(fp)
    buf.write(np.ascontiguousarray(bank.coreset, dtype="<f4").tobytes())
    stats = None
    if bank.norm_stats is not None:
        stats = {"median": bank.norm_stats.median,
                 "mad": bank.norm_stats.mad,
                 "beta": bank.norm_stats.beta}
    trailer = json.dumps({"norm_stats": stats}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(trailer)))
    buf.write(trailer)
    try:
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_bank(path, expected_fingerprint: Optional[str] = None) -> MemoryBank:
    """Read a bank file; mismatched fingerprint warns, never fails."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    head = struct.calcsize("<IIQdI")
    if len(raw) < 4 + head or raw[:4] != _MAGIC:
        raise VersionMismatch(f"{path}: not a memory bank file")
    version, dim, m, fraction, fp_len = struct.unpack_from("<IIQdI", raw, 4)
    if version != _VERSION:
        raise VersionMismatch(
            f"{path}: bank version {version}, expected {_VERSION}")
    off = 4 + head
    if len(raw) < off + fp_len:
        raise CorruptPayload(f"{path}: truncated fingerprint")
    fingerprint = raw[off:off + fp_len].decode("utf-8")
    off += fp_len
    end = off + m * dim * 4
    if m < 1 or dim < 1 or len(raw) < end:
        raise CorruptPayload(f"{path}: truncated row payload")
    rows = np.frombuffer(raw[off:end], dtype="<f4").reshape(m, dim).copy()
    off = end
    if len(raw) < off + 8:
        raise CorruptPayload(f"{path}: missing metadata trailer")
    (tlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) != off + tlen:
        raise CorruptPayload(f"{path}: trailer length mismatch")
    try:
        meta = json.loads(raw[off:].decode("utf-8"))
    except ValueError as exc:
        raise CorruptPayload(f"{path}: bad metadata trailer: {exc}") from exc
    stats = meta.get("norm_stats")
    norm_stats = NormStats(**stats) if stats is not None else None

    if expected_fingerprint is not None and expected_fingerprint != fingerprint:
        warnings.warn(
            f"{path}: bank fingerprint {fingerprint[:12]}... does not match "
            f"expected {expected_fingerprint[:12]}... (config drift?)",
            VersionMismatchWarning, stacklevel=2)
    return MemoryBank(dim=dim, coreset=rows, fraction=fraction,
                      fingerprint=fingerprint, norm_stats=norm_stats)
