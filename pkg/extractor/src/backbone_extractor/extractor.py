"""Run an ImageNet-pretrained CNN over an image folder and dump features.

One NPY file per (image, hierarchy level) plus a manifest JSON that the
downstream anomaly-detection pipeline reads directly. Hierarchy levels
tap the *output* of each residual stage (layer1..layer4 on the ResNet
family, denseblock1..4 on DenseNet); the within-stage tap point is a
documented choice, not configurable.

Inference is eval-mode and gradient-free, with the standard ImageNet
preprocessing (square resize, center crop, per-channel normalization)
and nothing else, so re-running on the same inputs rewrites identical
bytes.
"""

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torchvision import models
from torchvision.transforms import InterpolationMode, transforms

from .errors import BadLevels, UnknownBackbone, UnreadableImage, \
    WeightsUnavailable

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

# torchvision model name -> how to find the per-level stage modules
BACKBONES = {
    "wide_resnet50_2": "resnet",
    "wide_resnet101_2": "resnet",
    "resnext101_32x8d": "resnet",
    "densenet201": "densenet",
}

_IMAGENET_MEAN = [0.485, 0.456, 0.406]
_IMAGENET_STD = [0.229, 0.224, 0.225]


@dataclass
class ExtractorConfig:
    input_dir: str
    output_dir: str
    backbone: str = "wide_resnet50_2"
    levels: list = field(default_factory=lambda: ["2", "3"])
    resize: int = 256
    crop: int = 224
    batch_size: int = 4
    allow_random_weights: bool = False

    def validate(self):
        if self.backbone not in BACKBONES:
            raise UnknownBackbone(
                f"unknown backbone {self.backbone!r}; "
                f"choose from {sorted(BACKBONES)}")
        if not self.levels:
            raise BadLevels("need at least one hierarchy level")
        bad = [l for l in self.levels if l not in {"1", "2", "3", "4"}]
        if bad:
            raise BadLevels(f"levels must be within 1..4, got {bad}")
        if len(set(self.levels)) != len(self.levels):
            raise BadLevels(f"duplicate levels in {self.levels}")
        if self.crop < 1 or self.resize < 1 or self.crop > self.resize:
            raise BadLevels(
                f"need 1 <= crop <= resize, got crop={self.crop} "
                f"resize={self.resize}")
        if self.batch_size < 1:
            raise BadLevels(f"batch_size must be >= 1, got {self.batch_size}")


def load_backbone(name: str, allow_random: bool):
    """Pretrained torchvision model in eval mode.

    When the pretrained weights cannot be fetched (offline hosts) and
    allow_random is set, falls back to a fixed-seed random
    initialization: shapes and determinism are preserved, detection
    quality is not.
    """
    if name not in BACKBONES:
        raise UnknownBackbone(
            f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}")
    try:
        model = models.get_model(name, weights="DEFAULT")
    except Exception as exc:
        if not allow_random:
            raise WeightsUnavailable(
                f"pretrained weights for {name} unavailable ({exc}); "
                "rerun with --allow-random-weights to proceed with a "
                "seeded random backbone") from exc
        warnings.warn(
            f"pretrained weights for {name} unavailable; using a "
            "fixed-seed random initialization (features will be useless "
            "for real detection)")
        torch.manual_seed(0)
        model = models.get_model(name, weights=None)
    model.eval()
    return model


def _stage_modules(model, backbone: str, levels):
    if BACKBONES[backbone] == "densenet":
        stages = {str(i): getattr(model.features, f"denseblock{i}")
                  for i in range(1, 5)}
    else:
        stages = {str(i): getattr(model, f"layer{i}") for i in range(1, 5)}
    return {lvl: stages[lvl] for lvl in levels}


def _preprocess(resize: int, crop: int):
    return transforms.Compose([
        transforms.Resize((resize, resize),
                          interpolation=InterpolationMode.BILINEAR),
        transforms.CenterCrop(crop),
        transforms.ToTensor(),
        transforms.Normalize(mean=_IMAGENET_MEAN, std=_IMAGENET_STD),
    ])


def list_images(input_dir) -> list:
    root = Path(input_dir)
    if not root.is_dir():
        raise UnreadableImage(f"input directory {root} does not exist")
    return sorted(p for p in root.rglob("*")
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
                  and "ground_truth" not in p.relative_to(root).parts)


def _split_and_label(rel: Path):
    parts = rel.parts
    if parts[0] == "train":
        return "train", "normal"
    if parts[0] == "test":
        if len(parts) > 1 and parts[1] == "good":
            return "test", "normal"
        return "test", "abnormal"
    return "test", "unknown"


def _sample_id(rel: Path, used: set) -> str:
    sid = rel.with_suffix("").as_posix().replace("/", "_").replace(" ", "_")
    while sid in used:
        sid += "_dup"
    used.add(sid)
    return sid


def _load_image(path: Path):
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (OSError, SyntaxError, ValueError) as exc:
        raise UnreadableImage(f"cannot read image {path}: {exc}") from exc


def _mask_for(root: Path, rel: Path, crop: int):
    """MVTec-convention ground-truth mask, resized to the crop, or None."""
    if len(rel.parts) < 3 or rel.parts[0] != "test":
        return None
    gt = root / "ground_truth" / rel.parts[1] / f"{rel.stem}_mask.png"
    if not gt.is_file():
        return None
    with Image.open(gt) as img:
        small = img.convert("L").resize((crop, crop), Image.NEAREST)
    return (np.asarray(small) > 127).astype(np.float32)


def _save_npy(path: Path, array: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.ascontiguousarray(array, dtype=np.float32))


def extract(cfg: ExtractorConfig) -> Path:
    """Extract features for every image under cfg.input_dir.

    Returns the manifest path. Layout under cfg.output_dir:
    manifest.json, features/<id>_l<level>.npy, masks/<id>.npy.
    """
    cfg.validate()
    in_root = Path(cfg.input_dir)
    out_root = Path(cfg.output_dir)
    images = list_images(in_root)
    out_root.mkdir(parents=True, exist_ok=True)

    samples = []
    if not images:
        warnings.warn(f"no images found under {in_root}; "
                      "writing an empty manifest")
    else:
        model = load_backbone(cfg.backbone, cfg.allow_random_weights)
        stages = _stage_modules(model, cfg.backbone, cfg.levels)
        captured = {}
        handles = [
            mod.register_forward_hook(
                lambda _m, _i, out, key=lvl: captured.__setitem__(
                    key, out.detach()))
            for lvl, mod in stages.items()]
        prep = _preprocess(cfg.resize, cfg.crop)

        used_ids = set()
        try:
            for start in range(0, len(images), cfg.batch_size):
                chunk = images[start:start + cfg.batch_size]
                batch = torch.stack([prep(_load_image(p)) for p in chunk])
                captured.clear()
                with torch.no_grad():
                    model(batch)
                for i, path in enumerate(chunk):
                    rel = path.relative_to(in_root)
                    sid = _sample_id(rel, used_ids)
                    split, label = _split_and_label(rel)
                    if label == "unknown":
                        warnings.warn(
                            f"{rel}: not under train/ or test/; "
                            "labeling it test/unknown")
                    feats = {}
                    for lvl in cfg.levels:
                        rel_npy = f"features/{sid}_l{lvl}.npy"
                        _save_npy(out_root / rel_npy,
                                  captured[lvl][i].cpu().numpy())
                        feats[lvl] = rel_npy
                    entry = {"id": sid, "split": split, "label": label,
                             "features": feats,
                             "image_size": [cfg.crop, cfg.crop]}
                    mask = _mask_for(in_root, rel, cfg.crop)
                    if mask is not None:
                        rel_mask = f"masks/{sid}.npy"
                        _save_npy(out_root / rel_mask, mask)
                        entry["mask"] = rel_mask
                    samples.append(entry)
        finally:
            for h in handles:
                h.remove()

    manifest = {"category": in_root.name, "levels": list(cfg.levels),
                "samples": samples}
    manifest_path = out_root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n",
                             encoding="utf-8")
    return manifest_path
