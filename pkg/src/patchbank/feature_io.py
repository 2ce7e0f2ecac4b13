"""Tensor files and dataset manifests.

This is the contract boundary with whatever produced the features: dense
float32 tensors as NPY v1.0 files, plus a JSON manifest listing samples,
splits, labels, and per-level feature paths. Reading is strict; any
deviation from the documented format is a hard error, because NaNs or
silently reinterpreted payloads poison every distance computation
downstream.
"""

import ast
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DTypeMismatch,
    DuplicateSampleId,
    InvalidShape,
    IoFailure,
    MalformedHeader,
    MissingLevelPath,
    NonFiniteValue,
    ParseError,
    TruncatedPayload,
)

_MAGIC = b"\x93NUMPY"

SPLITS = ("train", "test")
LABELS = ("normal", "abnormal", "unknown")


@dataclass(frozen=True)
class TensorF32:
    """Dense float32 tensor, C-order, finite, every dimension >= 1."""

    array: np.ndarray

    def __post_init__(self):
        a = self.array
        if not isinstance(a, np.ndarray):
            raise InvalidShape("TensorF32 wraps a numpy array")
        if a.dtype != np.float32:
            raise DTypeMismatch(f"expected float32 data, got {a.dtype}")
        if a.ndim < 1 or any(d < 1 for d in a.shape):
            raise InvalidShape(f"invalid tensor shape {a.shape}")
        if not np.isfinite(a).all():
            raise NonFiniteValue("tensor contains NaN or Inf")
        if not a.flags.c_contiguous:
            object.__setattr__(self, "array", np.ascontiguousarray(a))

    @classmethod
    def from_array(cls, a: np.ndarray) -> "TensorF32":
        """Build from any real-valued array, casting to float32."""
        return cls(np.ascontiguousarray(a, dtype=np.float32))

    @property
    def shape(self) -> tuple:
        return self.array.shape


@dataclass(frozen=True)
class SampleEntry:
    id: str
    split: str
    label: str
    feature_paths: dict  # level -> absolute Path
    mask_path: Optional[Path]
    image_size: tuple  # (height, width)


@dataclass(frozen=True)
class DatasetManifest:
    category: str
    levels: list
    samples: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [s for s in self.samples if s.split == name]


def _header_text(shape: tuple) -> bytes:
    if len(shape) == 1:
        shape_str = f"({shape[0]},)"
    else:
        shape_str = "(" + ", ".join(str(d) for d in shape) + ")"
    head = ("{'descr': '<f4', 'fortran_order': False, 'shape': "
            + shape_str + ", }").encode("ascii")
    # total header (magic + version + length field + text) padded to 64
    pad = 64 - (len(_MAGIC) + 4 + len(head) + 1) % 64
    return head + b" " * pad + b"\n"


def write_tensor(path, t) -> None:
    """Write a tensor as an NPY v1.0 file (little-endian float32, C-order)."""
    if isinstance(t, np.ndarray):
        t = TensorF32.from_array(t)
    arr = t.array
    if arr.dtype.byteorder == ">":  # pragma: no cover - big-endian hosts only
        arr = arr.astype("<f4")
    head = _header_text(arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(b"\x01\x00")
            fh.write(struct.pack("<H", len(head)))
            fh.write(head)
            fh.write(arr.tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_tensor(path) -> TensorF32:
    """Read and validate an NPY v1.0 float32 tensor."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc

    if len(raw) < 10 or raw[:6] != _MAGIC:
        raise MalformedHeader(f"{path}: not an NPY file")
    if raw[6:8] != b"\x01\x00":
        raise MalformedHeader(
            f"{path}: unsupported NPY version {raw[6]}.{raw[7]}, need 1.0")
    (hlen,) = struct.unpack_from("<H", raw, 8)
    if len(raw) < 10 + hlen:
        raise MalformedHeader(f"{path}: header shorter than declared")
    try:
        header = ast.literal_eval(raw[10:10 + hlen].decode("latin-1").strip())
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeader(f"{path}: unparseable header dict") from exc
    if not isinstance(header, dict) or set(header) != {
            "descr", "fortran_order", "shape"}:
        raise MalformedHeader(f"{path}: header keys {sorted(header)!r}"
                              if isinstance(header, dict)
                              else f"{path}: header is not a dict")
    if header["descr"] != "<f4":
        raise DTypeMismatch(
            f"{path}: dtype {header['descr']!r}, this format is '<f4' only")
    if header["fortran_order"] is not False:
        raise MalformedHeader(f"{path}: fortran_order must be False")
    shape = header["shape"]
    if (not isinstance(shape, tuple)
            or not all(isinstance(d, int) for d in shape)):
        raise MalformedHeader(f"{path}: shape {shape!r} is not an int tuple")
    if len(shape) < 1 or any(d < 1 for d in shape):
        raise InvalidShape(f"{path}: invalid tensor shape {shape}")

    count = 1
    for d in shape:
        count *= d
    payload = raw[10 + hlen:]
    if len(payload) != count * 4:
        raise TruncatedPayload(
            f"{path}: payload holds {len(payload)} bytes, "
            f"shape {shape} needs {count * 4}")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(shape)
    if not np.isfinite(arr).all():
        raise NonFiniteValue(f"{path}: payload contains NaN or Inf")
    return TensorF32(arr.copy())


def _require(cond: bool, msg: str):
    if not cond:
        raise ParseError(msg)


def load_manifest(path) -> DatasetManifest:
    """Load a dataset manifest, resolving paths against its directory.

    Schema: {"category": str, "levels": [str], "samples": [{"id", "split",
    "label", "features": {level: path}, "mask"?, "image_size": [h, w]}]}.
    Order of samples is preserved. Train samples must be labeled normal.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc

    _require(isinstance(doc, dict), f"{path}: manifest must be an object")
    _require(set(doc) == {"category", "levels", "samples"},
             f"{path}: manifest keys must be category/levels/samples, "
             f"got {sorted(doc)}")
    category = doc["category"]
    levels = doc["levels"]
    _require(isinstance(category, str), f"{path}: category must be a string")
    _require(isinstance(levels, list) and levels
             and all(isinstance(l, str) for l in levels),
             f"{path}: levels must be a nonempty list of strings")
    _require(len(set(levels)) == len(levels),
             f"{path}: duplicate level identifiers")
    _require(isinstance(doc["samples"], list),
             f"{path}: samples must be a list")

    base = path.parent
    seen = set()
    samples = []
    for i, raw in enumerate(doc["samples"]):
        where = f"{path}: samples[{i}]"
        _require(isinstance(raw, dict), f"{where} must be an object")
        allowed = {"id", "split", "label", "features", "mask", "image_size"}
        _require(set(raw) <= allowed,
                 f"{where}: unknown keys {sorted(set(raw) - allowed)}")
        for key in ("id", "split", "label", "features", "image_size"):
            _require(key in raw, f"{where}: missing key {key!r}")
        sid = raw["id"]
        _require(isinstance(sid, str) and sid, f"{where}: bad id")
        if sid in seen:
            raise DuplicateSampleId(f"{path}: duplicate sample id {sid!r}")
        seen.add(sid)
        _require(raw["split"] in SPLITS,
                 f"{where}: split must be one of {SPLITS}")
        _require(raw["label"] in LABELS,
                 f"{where}: label must be one of {LABELS}")
        _require(not (raw["split"] == "train" and raw["label"] != "normal"),
                 f"{where}: train samples must be labeled normal")
        feats = raw["features"]
        _require(isinstance(feats, dict), f"{where}: features must be a map")
        extra = set(feats) - set(levels)
        _require(not extra, f"{where}: undeclared levels {sorted(extra)}")
        for lvl in levels:
            if lvl not in feats:
                raise MissingLevelPath(
                    f"{where}: no feature path for level {lvl!r}")
            _require(isinstance(feats[lvl], str) and feats[lvl],
                     f"{where}: bad path for level {lvl!r}")
        size = raw["image_size"]
        _require(isinstance(size, list) and len(size) == 2
                 and all(isinstance(v, int) and v > 0 for v in size),
                 f"{where}: image_size must be [height, width]")
        mask = raw.get("mask")
        if mask is not None:
            _require(isinstance(mask, str) and mask, f"{where}: bad mask path")
        samples.append(SampleEntry(
            id=sid,
            split=raw["split"],
            label=raw["label"],
            feature_paths={lvl: base / feats[lvl] for lvl in levels},
            mask_path=(base / mask) if mask else None,
            image_size=(size[0], size[1]),
        ))
    return DatasetManifest(category=category, levels=list(levels),
                           samples=samples)
