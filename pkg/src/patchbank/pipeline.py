"""Pipeline stages behind the CLI commands.

Each function runs one stage end to end: train a representation, build a
memory bank, score a split, evaluate scores, or fuse several score files.
Artifacts default to fixed names inside the configured workdir so stages
compose without repeating paths. Sample order always follows the
manifest, and per-sample work is independent, so results are identical
for any worker count; one worker additionally fixes all byte-level
output ordering.
"""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation, feature_io, memory_bank, repr_learning, scoring
from .config import PipelineConfig
from .errors import (
    DataError,
    DegenerateVariance,
    EmptyInput,
    LengthMismatch,
    ParseError,
)
from .patch_features import aggregate_neighborhood, merge_hierarchies


def checkpoint_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.paths.workdir) / "model.rcpm"


def bank_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.paths.workdir) / "bank.rcpb"


def scores_path(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.paths.workdir) / f"scores_{split}.jsonl"


def report_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.paths.workdir) / "report.json"


def _sample_patches(sample, levels, s):
    maps = [aggregate_neighborhood(feature_io.read_tensor(
        sample.feature_paths[lvl]), s) for lvl in levels]
    return merge_hierarchies(maps)


def load_patch_sets(manifest, split: str, patch_cfg, workers: int = 1):
    """(SampleEntry, PatchFeatureSet) pairs for a split, manifest order."""
    samples = manifest.split(split)
    for lvl in patch_cfg.levels:
        if lvl not in manifest.levels:
            raise DataError(
                f"config level {lvl!r} not in manifest levels "
                f"{manifest.levels}")
    if workers > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            sets = list(pool.map(
                lambda smp: _sample_patches(smp, patch_cfg.levels,
                                            patch_cfg.s), samples))
    else:
        sets = [_sample_patches(smp, patch_cfg.levels, patch_cfg.s)
                for smp in samples]
    return list(zip(samples, sets))


def run_train(cfg: PipelineConfig, workers: int = 1) -> Path:
    manifest = feature_io.load_manifest(cfg.paths.manifest)
    pairs = load_patch_sets(manifest, "train", cfg.patch, workers)
    model = repr_learning.train([ps for _, ps in pairs], cfg.train)
    out = checkpoint_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    repr_learning.save_model(out, model, cfg.train)
    return out


def run_build_bank(cfg: PipelineConfig, checkpoint=None, out=None,
                   workers: int = 1) -> Path:
    model, train_cfg = repr_learning.load_model(
        checkpoint or checkpoint_path(cfg))
    manifest = feature_io.load_manifest(cfg.paths.manifest)
    pairs = load_patch_sets(manifest, "train", cfg.patch, workers)

    fingerprint = memory_bank.config_fingerprint(train_cfg,
                                                 manifest.category)
    bank = memory_bank.build_bank(model, [ps for _, ps in pairs],
                                  cfg.bank.fraction, cfg.bank.seed,
                                  fingerprint=fingerprint)
    train_image_scores = [
        scoring.image_score(scoring.patch_scores(
            bank, repr_learning.embed(model, ps), cfg.scoring.b))
        for _, ps in pairs]
    bank.norm_stats = scoring.fit_norm_stats(train_image_scores)

    out = Path(out) if out else bank_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    memory_bank.save_bank(out, bank)
    return out


def _score_one(model, bank, cfg, sample, ps, maps_dir):
    emb = repr_learning.embed(model, ps)
    values = scoring.patch_scores(bank, emb, cfg.scoring.b)
    smap = scoring.ScoreMap(grid=ps.grid, values=values)
    img = scoring.image_score(smap)
    norm = float(scoring.normalize([img], bank.norm_stats)[0])
    record = {"id": sample.id, "image_score": img, "normalized_score": norm}
    if cfg.scoring.write_maps:
        up = scoring.upsample_map(smap, sample.image_size,
                                  cfg.scoring.smooth_sigma)
        map_file = maps_dir / f"{sample.id}.npy"
        feature_io.write_tensor(
            map_file, up.upsampled.astype(np.float32))
        record["map_path"] = f"maps/{sample.id}.npy"
    return record


def run_score(cfg: PipelineConfig, bank=None, checkpoint=None,
              split: str = "test", out=None, workers: int = 1) -> Path:
    model, train_cfg = repr_learning.load_model(
        checkpoint or checkpoint_path(cfg))
    manifest = feature_io.load_manifest(cfg.paths.manifest)
    expected = memory_bank.config_fingerprint(train_cfg, manifest.category)
    the_bank = memory_bank.load_bank(bank or bank_path(cfg),
                                     expected_fingerprint=expected)
    if the_bank.norm_stats is None:
        raise DataError("bank has no normalization stats; rebuild it")
    if the_bank.dim != model.d_f:
        raise DataError(
            f"bank dim {the_bank.dim} != model output dim {model.d_f}")

    pairs = load_patch_sets(manifest, split, cfg.patch, workers)
    out = Path(out) if out else scores_path(cfg, split)
    out.parent.mkdir(parents=True, exist_ok=True)
    maps_dir = out.parent / "maps"
    if cfg.scoring.write_maps and pairs:
        maps_dir.mkdir(parents=True, exist_ok=True)

    if not pairs:
        warnings.warn(f"split {split!r} has no samples; writing empty output")
        out.write_text("")
        return out

    if workers > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(
                lambda pair: _score_one(model, the_bank, cfg, pair[0],
                                        pair[1], maps_dir), pairs))
    else:
        records = [_score_one(model, the_bank, cfg, smp, ps, maps_dir)
                   for smp, ps in pairs]
    with open(out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return out


def read_scores(path):
    """Parse a scores JSONL file into a list of record dicts."""
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for i, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{i + 1}: invalid JSON: {exc}") from exc
        for key in ("id", "image_score", "normalized_score"):
            if key not in rec:
                raise ParseError(f"{path}:{i + 1}: missing key {key!r}")
        records.append(rec)
    return records


def run_eval(cfg: PipelineConfig, scores=None, out=None) -> Path:
    """Evaluate a scores file against manifest labels; write the report.

    Samples labeled unknown are scored but excluded from metrics. Pixel
    AUROC is computed only when eval.pixel is on, from the written maps
    and the manifest masks (normal samples without a mask count as
    all-background).
    """
    manifest = feature_io.load_manifest(cfg.paths.manifest)
    scores = Path(scores) if scores else scores_path(cfg, "test")
    records = read_scores(scores)
    by_id = {smp.id: smp for smp in manifest.samples}

    labeled = []
    for rec in records:
        smp = by_id.get(rec["id"])
        if smp is None:
            raise DataError(f"scored id {rec['id']!r} not in manifest")
        if smp.label == "unknown":
            continue
        labeled.append((rec, smp, 1 if smp.label == "abnormal" else 0))
    if not labeled:
        raise DataError("no scored samples with known labels")

    values = np.array([rec["normalized_score"] for rec, _, _ in labeled])
    y = np.array([lab for _, _, lab in labeled])
    report = {
        "image_auroc": evaluation.auroc(values, y),
        "n_samples": len(labeled),
    }
    thr, f1 = evaluation.f1_optimal_threshold(values, y)
    report["threshold"] = thr
    report["f1"] = f1
    try:
        report["d_prime"] = scoring.discriminability(values[y == 0],
                                                     values[y == 1])
    except (DegenerateVariance, EmptyInput):
        warnings.warn("d_prime undefined on this split; reporting null")
        report["d_prime"] = None

    if cfg.eval.pixel:
        maps, masks = [], []
        for rec, smp, lab in labeled:
            if "map_path" not in rec:
                raise DataError(
                    f"sample {smp.id}: pixel eval needs written score maps")
            amap = feature_io.read_tensor(
                scores.parent / rec["map_path"]).array
            if smp.mask_path is not None:
                mask = feature_io.read_tensor(smp.mask_path).array
            elif lab == 0:
                mask = np.zeros(smp.image_size, dtype=np.float32)
            else:
                raise DataError(f"abnormal sample {smp.id} has no mask")
            maps.append(amap)
            masks.append(mask)
        report["pixel_auroc"] = evaluation.pixel_auroc(maps, masks)

    out = Path(out) if out else report_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    return out


def run_fuse(inputs, out) -> Path:
    """Average normalized scores across score files over identical ids."""
    if not inputs:
        raise LengthMismatch("fuse needs at least one scores file")
    all_records = [read_scores(p) for p in inputs]
    ids = [rec["id"] for rec in all_records[0]]
    for path, records in zip(inputs[1:], all_records[1:]):
        got = [rec["id"] for rec in records]
        if got != ids:
            extra = sorted(set(got).symmetric_difference(ids))
            raise LengthMismatch(
                f"{path}: sample ids disagree with {inputs[0]} "
                f"(differing ids: {extra[:8]})")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        for i, sid in enumerate(ids):
            raw = float(np.mean([recs[i]["image_score"]
                                 for recs in all_records]))
            norm = float(np.mean([recs[i]["normalized_score"]
                                  for recs in all_records]))
            fh.write(json.dumps({"id": sid, "image_score": raw,
                                 "normalized_score": norm}) + "\n")
    return out
