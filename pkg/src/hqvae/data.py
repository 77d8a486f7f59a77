"""Datasets: CIFAR-10 binary batches, raw-tensor folders, procedural images."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
SPLITS = ("train", "val", "test")


class DataError(IOError):
    pass


@dataclass
class Dataset:
    """Named splits of N x C x H x W float32 images in [0, 1]."""

    splits: dict
    provenance: str
    labels: dict = field(default_factory=dict)

    def __getitem__(self, name):
        if name not in self.splits:
            raise KeyError(f"no split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def sizes(self):
        return {k: len(v) for k, v in self.splits.items()}

    def split_hash(self, name):
        return hashlib.sha1(np.ascontiguousarray(self[name]).tobytes()).hexdigest()

    def check(self):
        """Values in [0, 1] and no image shared between splits."""
        seen = {}
        for name, imgs in self.splits.items():
            if len(imgs) and (imgs.min() < 0 or imgs.max() > 1):
                raise DataError(f"split {name!r} has values outside [0, 1]")
            for h in {hashlib.sha1(im.tobytes()).digest() for im in imgs}:
                if h in seen and seen[h] != name:
                    raise DataError(f"image shared between splits {seen[h]!r} and {name!r}")
                seen[h] = name
        return self


def data_root(path=None):
    """Explicit path, else $HQQ_DATA_DIR, else ./data."""
    return Path(path or os.environ.get("HQQ_DATA_DIR") or "data")


# CIFAR-10


def read_cifar_file(path):
    """Decode one binary batch file into (uint8 images N x 3 x 32 x 32, labels)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if len(raw) % CIFAR_RECORD:
        last = len(raw) - len(raw) % CIFAR_RECORD
        raise DataError(f"{path}: truncated record at byte offset {last} "
                        f"(file size {len(raw)} is not a multiple of {CIFAR_RECORD})")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if len(bad):
        raise DataError(f"{path}: invalid label {labels[bad[0]]} at byte offset {bad[0] * CIFAR_RECORD}")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def _find_cifar_dir(root):
    root = Path(root)
    for cand in (root, root / "cifar-10-batches-bin", root / "cifar10" / "cifar-10-batches-bin"):
        if (cand / CIFAR_TEST_FILE).exists() or (cand / CIFAR_TRAIN_FILES[0]).exists():
            return cand
    raise FileNotFoundError(f"no CIFAR-10 binary batches under {root} "
                            f"(expected {CIFAR_TRAIN_FILES[0]} and {CIFAR_TEST_FILE})")


def load_cifar10(path=None, n_train=None, n_val=0, n_test=None, seed=0):
    """Load CIFAR-10 and split with seeded shuffling.

    Validation images are drawn from the training batches, disjoint from the
    training subset; ``None`` sizes mean "all remaining".
    """
    d = _find_cifar_dir(data_root(path))
    parts = [read_cifar_file(d / f) for f in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = read_cifar_file(d / CIFAR_TEST_FILE)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(train_x))
    n_train = len(train_x) - n_val if n_train is None else n_train
    if n_train + n_val > len(train_x):
        raise DataError(f"requested {n_train} train + {n_val} validation images, only {len(train_x)} available")
    tr, va = perm[:n_train], perm[n_train:n_train + n_val]
    te = rng.permutation(len(test_x))[: len(test_x) if n_test is None else n_test]
    splits = {"train": to_unit(train_x[tr]), "val": to_unit(train_x[va]), "test": to_unit(test_x[te])}
    labels = {"train": train_y[tr], "val": train_y[va], "test": test_y[te]}
    return Dataset(splits, f"cifar10:{d}:seed={seed}", labels)


def to_unit(raw):
    """uint8 bytes -> float32 in [0, 1] (255 -> 1.0, 0 -> 0.0)."""
    return (np.asarray(raw, dtype=np.float32) / np.float32(255.0)).astype(np.float32)


# procedural images


def synth_blobs(n, size=32, seed=0):
    """Gradient backgrounds with random rectangles and discs, N x 3 x size x size in [0, 1]."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    for i in range(n):
        c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
        ang = rng.uniform(0, 2 * np.pi)
        t = np.cos(ang) * xx + np.sin(ang) * yy
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        for _ in range(rng.integers(1, 5)):
            color = rng.uniform(0, 1, 3)[:, None, None]
            if rng.random() < 0.5:
                x0, y0 = rng.integers(0, size - 2, 2)
                w, h = rng.integers(2, max(3, size // 2), 2)
                mask = (xx * (size - 1) >= x0) & (xx * (size - 1) < x0 + w) & \
                       (yy * (size - 1) >= y0) & (yy * (size - 1) < y0 + h)
            else:
                cx, cy = rng.uniform(0, size - 1, 2)
                r = rng.uniform(1.5, size / 4)
                mask = (xx * (size - 1) - cx) ** 2 + (yy * (size - 1) - cy) ** 2 <= r * r
            img = np.where(mask[None], color, img)
        out[i] = img
    return out


def synth_dataset(n_train, n_val, n_test, size=32, seed=0):
    ss = np.random.SeedSequence(seed).spawn(3)
    splits = {name: synth_blobs(n, size, int(s.generate_state(1)[0]))
              for name, n, s in zip(SPLITS, (n_train, n_val, n_test), ss)}
    return Dataset(splits, f"synth_blobs:size={size}:seed={seed}")


# raw-tensor folders


def read_tensor_file(path):
    """One image stored as an .npy file (header + raw payload), C x H x W.

    uint8 payloads are scaled by 1/255; float payloads must already lie in [0, 1].
    """
    path = Path(path)
    try:
        arr = np.load(path, allow_pickle=False)
    except (ValueError, OSError) as exc:
        raise DataError(f"{path}: unreadable tensor file: {exc}") from None
    if arr.ndim != 3:
        raise DataError(f"{path}: expected C x H x W, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return to_unit(arr)
    arr = arr.astype(np.float32)
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise DataError(f"{path}: float values outside [0, 1]")
    return arr


def load_folder(path, n_train=None, n_val=0, n_test=0, seed=0):
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"image folder not found: {path}")
    files = sorted(path.glob("*.npy"))
    if not files:
        raise DataError(f"{path}: no .npy tensor files")
    imgs = [read_tensor_file(f) for f in files]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise DataError(f"{path}: mixed image shapes {sorted(shapes)}")
    data = np.stack(imgs)
    perm = np.random.default_rng(seed).permutation(len(data))
    n_train = len(data) - n_val - n_test if n_train is None else n_train
    if n_train + n_val + n_test > len(data):
        raise DataError(f"{path}: split sizes exceed {len(data)} images")
    cuts = np.cumsum([n_train, n_val, n_test])
    idx = np.split(perm[:cuts[-1]], cuts[:-1])
    return Dataset({name: data[i] for name, i in zip(SPLITS, idx)}, f"folder:{path}:seed={seed}")


def load_dataset(cfg, root=None):
    """Build the splits described by a DataConfig."""
    if cfg.source == "synth":
        ds = synth_dataset(cfg.n_train, cfg.n_val, cfg.n_test, cfg.image_size, cfg.seed)
    elif cfg.source == "cifar10":
        ds = load_cifar10(cfg.path or root, cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed)
    elif cfg.source == "folder":
        ds = load_folder(cfg.path or data_root(root), cfg.n_train, cfg.n_val, cfg.n_test, cfg.seed)
    else:
        raise ValueError(f"unknown data source {cfg.source!r}")
    size = ds["train"].shape[-1] if len(ds["train"]) else cfg.image_size
    if size != cfg.image_size:
        raise DataError(f"images are {size}px, config expects {cfg.image_size}px")
    return ds
