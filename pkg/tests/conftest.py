"""Shared fixtures: synthetic feature tensors, manifests, cluster data."""

import json

import numpy as np
import pytest

from patchbank import feature_io, kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # compile the jitted kernels once so individual tests never pay for it
    kernels.warmup()


def two_cluster_images(seed=14, d=8, n_imgs=24, patches=32, n_test=32,
                       noise=0.45, sep=1.0, pos=2.2, n_anom=6):
    """Normal images mix two feature modes; abnormal ones add outlier rows.

    Anomalous rows sit past the clusters on the axis that separates them,
    which is the regime the metric learner is meant to sharpen.
    """
    rng = np.random.default_rng(seed)
    mu_a = np.zeros(d)
    mu_a[0] = sep
    mu_b = -mu_a

    def normal_img():
        pick = rng.random(patches) < 0.5
        base = np.where(pick[:, None], mu_a, mu_b)
        return (base + rng.normal(scale=noise,
                                  size=(patches, d))).astype(np.float32)

    train = [normal_img() for _ in range(n_imgs)]
    test, labels = [], []
    for i in range(n_test):
        img = normal_img()
        if i % 2:
            rows = rng.choice(patches, size=n_anom, replace=False)
            sign = rng.choice([-1.0, 1.0], size=n_anom)
            img[rows, 0] = (sign * rng.normal(
                loc=pos, scale=noise * 0.5, size=n_anom)).astype(np.float32)
            labels.append(1)
        else:
            labels.append(0)
        test.append(img)
    return train, test, np.array(labels)


@pytest.fixture(scope="session")
def two_cluster():
    return two_cluster_images()


def write_synthetic_dataset(root, seed=0, n_train=8, n_test=8,
                            with_masks=True):
    """Small two-level on-disk dataset with a parseable manifest.

    Level "2" maps are (4, 8, 8), level "3" maps are (8, 4, 4); abnormal
    test images carry a bright square patch plus a matching mask.
    """
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    feat_dir = root / "features"
    feat_dir.mkdir(exist_ok=True)
    image_size = [32, 32]

    def level_maps(anomalous):
        base2 = rng.normal(size=(4, 1, 1)) + rng.normal(
            scale=0.1, size=(4, 8, 8))
        base3 = rng.normal(size=(8, 1, 1)) + rng.normal(
            scale=0.1, size=(8, 4, 4))
        if anomalous:
            base2[:, 2:5, 2:5] += 3.0
            base3[:, 1:3, 1:3] += 3.0
        return base2.astype(np.float32), base3.astype(np.float32)

    samples = []
    for i in range(n_train):
        m2, m3 = level_maps(False)
        p2, p3 = f"features/train_{i}_l2.npy", f"features/train_{i}_l3.npy"
        feature_io.write_tensor(root / p2, feature_io.TensorF32(m2))
        feature_io.write_tensor(root / p3, feature_io.TensorF32(m3))
        samples.append({"id": f"train_{i}", "split": "train",
                        "label": "normal",
                        "features": {"2": p2, "3": p3},
                        "image_size": image_size})
    for i in range(n_test):
        bad = i % 2 == 1
        m2, m3 = level_maps(bad)
        p2, p3 = f"features/test_{i}_l2.npy", f"features/test_{i}_l3.npy"
        feature_io.write_tensor(root / p2, feature_io.TensorF32(m2))
        feature_io.write_tensor(root / p3, feature_io.TensorF32(m3))
        entry = {"id": f"test_{i}", "split": "test",
                 "label": "abnormal" if bad else "normal",
                 "features": {"2": p2, "3": p3},
                 "image_size": image_size}
        if bad and with_masks:
            mask = np.zeros(image_size, dtype=np.float32)
            mask[8:20, 8:20] = 1.0
            mp = f"features/test_{i}_mask.npy"
            feature_io.write_tensor(root / mp, feature_io.TensorF32(mask))
            entry["mask"] = mp
        samples.append(entry)

    manifest = {"category": "synthetic", "levels": ["2", "3"],
                "samples": samples}
    mpath = root / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return mpath


def quick_config(manifest_path, workdir, **extra):
    """Pipeline config dict tuned to run the synthetic dataset in seconds."""
    cfg = {
        "paths": {"manifest": str(manifest_path), "workdir": str(workdir)},
        "patch": {"levels": ["2", "3"], "s": 3},
        "similarity": {"sigma": 0.5, "k": 8, "alpha": 0.5},
        "train": {"epochs": 4, "batch_size": 32, "lr": 1e-3,
                  "weight_decay": 1e-2, "margin": 1.0, "gamma": 0.9,
                  "d_f": 16, "d_g": 16, "seed": 0},
        "bank": {"fraction": 0.2, "seed": 0},
        "scoring": {"b": 3, "smooth_sigma": 1.0, "write_maps": True},
        "eval": {"pixel": True},
    }
    for key, val in extra.items():
        cfg[key].update(val)
    return cfg


@pytest.fixture()
def synthetic_dataset(tmp_path):
    manifest = write_synthetic_dataset(tmp_path / "data")
    workdir = tmp_path / "work"
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(quick_config(manifest, workdir)),
                        encoding="utf-8")
    return {"manifest": manifest, "workdir": workdir, "config": cfg_path,
            "root": tmp_path}
