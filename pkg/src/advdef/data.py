"""Dataset loading and the procedural desk-scale image set.

Two datasets are registered:

* ``synthetic`` -- a 10-class procedural RGB set (geometric figures over
  gradient backgrounds) rendered deterministically from the experiment
  seed. Needs no network or disk cache, trains a small CNN past 90%
  accuracy in seconds, and is the desk default.
* ``cifar10`` -- the classic 10-class natural-image set via torchvision;
  requires network access on first use and caches under the data dir
  with a checksum manifest.

Images are float32 NHWC in [0, 1]; labels int64.
"""

import hashlib
import logging
import os
from dataclasses import dataclass, replace

import numpy as np
import yaml

from .config import DatasetConfig, ExperimentConfig
from .errors import ConfigError, DatasetError
from .seeding import derive_rng
from .validation import check_image_batch, check_labels, frozen

log = logging.getLogger(__name__)

SYNTHETIC_CLASS_NAMES = (
    "h_stripes", "v_stripes", "disk", "ring", "square",
    "frame", "checker", "x_cross", "plus", "d_stripes",
)


@dataclass(frozen=True)
class LabeledImageSet:
    """Image batch plus aligned integer labels (immutable)."""

    images: np.ndarray   # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray   # (N,) int64

    def __post_init__(self):
        images = check_image_batch(self.images, "images")
        labels = check_labels(self.labels, "labels", n=len(images))
        object.__setattr__(self, "images", frozen(images))
        object.__setattr__(self, "labels", frozen(labels))

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "LabeledImageSet":
        idx = np.asarray(idx)
        return LabeledImageSet(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# synthetic renderer
# ---------------------------------------------------------------------------

def _shape_mask(rng: np.random.Generator, cls: int, size: int) -> np.ndarray:
    """Boolean foreground mask for one class with per-image jitter.

    Ten base figures; class indices past 9 reuse them cyclically (only
    the 10-class desk set is meant to be learnable, larger class counts
    exist for scale/count checks).
    """
    s = size
    cls = cls % 10
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy = s / 2 + rng.uniform(-0.12, 0.12) * s
    cx = s / 2 + rng.uniform(-0.12, 0.12) * s
    if cls == 0:                                 # horizontal stripes
        period = rng.integers(6, 13)
        phase = rng.uniform(0, period)
        return ((yy + phase) % period) < period / 2
    if cls == 1:                                 # vertical stripes
        period = rng.integers(6, 13)
        phase = rng.uniform(0, period)
        return ((xx + phase) % period) < period / 2
    if cls == 2:                                 # filled disk
        r = rng.uniform(0.25, 0.38) * s
        return (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
    if cls == 3:                                 # ring
        r = rng.uniform(0.28, 0.40) * s
        t = rng.uniform(0.08, 0.13) * s
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 < r ** 2) & (d2 > (r - t) ** 2)
    if cls == 4:                                 # filled square
        half = rng.uniform(0.22, 0.34) * s
        return (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)
    if cls == 5:                                 # hollow square frame
        half = rng.uniform(0.28, 0.40) * s
        t = rng.uniform(0.08, 0.13) * s
        outer = (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half)
        inner = (np.abs(yy - cy) < half - t) & (np.abs(xx - cx) < half - t)
        return outer & ~inner
    if cls == 6:                                 # checkerboard
        cell = rng.integers(4, 9)
        oy, ox = rng.integers(0, cell, 2)
        return (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(bool)
    if cls == 7:                                 # X cross (two diagonal bands)
        t = rng.uniform(0.06, 0.10) * s
        return (np.abs((yy - cy) - (xx - cx)) < t) | (np.abs((yy - cy) + (xx - cx)) < t)
    if cls == 8:                                 # plus sign
        t = rng.uniform(0.08, 0.13) * s
        half = rng.uniform(0.30, 0.42) * s
        horiz = (np.abs(yy - cy) < t) & (np.abs(xx - cx) < half)
        vert = (np.abs(xx - cx) < t) & (np.abs(yy - cy) < half)
        return horiz | vert
    if cls == 9:                                 # diagonal stripes
        period = rng.integers(8, 15)
        phase = rng.uniform(0, period)
        return ((xx + yy + phase) % period) < period / 2
    raise ValueError(f"no renderer for class {cls}")


def render_synthetic_image(rng: np.random.Generator, cls: int, size: int) -> np.ndarray:
    """One (H, W, 3) float32 image: class figure over a gradient background.

    The figure is alpha-blended at low contrast so the class evidence is
    subtle: a plainly trained CNN still reads it (>95% clean accuracy)
    but its decision margins stay small enough for budgeted attacks to
    work, as they do on natural-image models.
    """
    s = size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) / max(s - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx + np.sin(angle) * yy)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    bg_a = rng.uniform(0.05, 0.95, 3)
    bg_b = rng.uniform(0.05, 0.95, 3)
    img = bg_a[None, None, :] * (1 - ramp[..., None]) + bg_b[None, None, :] * ramp[..., None]

    fg = rng.uniform(0.0, 1.0, 3)
    bg_mean = (bg_a + bg_b) / 2
    if abs(fg.mean() - bg_mean.mean()) < 0.25:
        # force luminance contrast so the figure never vanishes
        fg = np.clip(1.0 - bg_mean + rng.normal(0.0, 0.08, 3), 0.0, 1.0)

    mask = _shape_mask(rng, cls, s)
    alpha = rng.uniform(0.30, 0.55)
    img = np.where(mask[..., None],
                   (1 - alpha) * img + alpha * fg[None, None, :], img)
    img += rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _synthesize(ds: DatasetConfig, split: str, per_class: int,
                seed: int) -> LabeledImageSet:
    images, labels = [], []
    for cls in range(ds.num_classes):
        for idx in range(per_class):
            rng = derive_rng(seed, "synthetic", split, cls, idx)
            images.append(render_synthetic_image(rng, cls, ds.image_size))
            labels.append(cls)
    images = np.stack(images)
    labels = np.asarray(labels, dtype=np.int64)
    order = derive_rng(seed, "synthetic", split, "shuffle").permutation(len(labels))
    return LabeledImageSet(images[order], labels[order])


def _load_synthetic(ds: DatasetConfig, split: str, seed: int) -> LabeledImageSet:
    per_class = ds.train_per_class if split == "train" else ds.test_per_class
    return _synthesize(ds, split, per_class, seed)


# ---------------------------------------------------------------------------
# cifar10 (optional; needs network on first fetch)
# ---------------------------------------------------------------------------

def _load_cifar10(ds: DatasetConfig, split: str, seed: int) -> LabeledImageSet:
    root = os.path.join(ds.resolved_data_dir(), "cifar10")
    try:
        from torchvision.datasets import CIFAR10
        raw = CIFAR10(root=root, train=(split == "train"), download=True)
    except Exception as exc:
        raise DatasetError(
            f"could not fetch cifar10 into {root!r}: {exc}; "
            "set dataset.name to 'synthetic' for offline runs") from exc
    _write_dataset_manifest(root, raw)

    images = raw.data.astype(np.float32) / 255.0   # (N, 32, 32, 3)
    labels = np.asarray(raw.targets, dtype=np.int64)
    per_class = ds.train_per_class if split == "train" else ds.test_per_class
    rng = derive_rng(seed, "cifar10", split, "select")
    chosen = []
    for cls in range(ds.num_classes):
        members = np.flatnonzero(labels == cls)
        if len(members) < per_class:
            raise ConfigError(
                f"dataset.{'train' if split == 'train' else 'test'}_per_class: class "
                f"{raw.classes[cls]!r} has only {len(members)} images, need {per_class}")
        chosen.append(rng.permutation(members)[:per_class])
    idx = np.concatenate(chosen)
    idx = idx[derive_rng(seed, "cifar10", split, "shuffle").permutation(len(idx))]
    images, labels = images[idx], labels[idx]
    if ds.image_size != 32:
        images = resize_batch(images, ds.image_size)
    return LabeledImageSet(images, labels)


def _write_dataset_manifest(root: str, raw) -> None:
    """Record where the cached files came from and their checksums."""
    path = os.path.join(root, "manifest.yaml")
    if os.path.exists(path):
        return
    entries = {}
    base = os.path.join(root, raw.base_folder)
    for fname in sorted(os.listdir(base)) if os.path.isdir(base) else []:
        full = os.path.join(base, fname)
        if os.path.isfile(full):
            with open(full, "rb") as fh:
                entries[fname] = hashlib.md5(fh.read()).hexdigest()
    with open(path, "w") as fh:
        yaml.safe_dump({"dataset": "cifar10", "source": raw.url, "files": entries}, fh)


def resize_batch(images: np.ndarray, size: int) -> np.ndarray:
    """Bilinear-resize an NHWC batch to (size, size)."""
    import torch
    import torch.nn.functional as F
    t = torch.tensor(np.transpose(images, (0, 3, 1, 2)), dtype=torch.float32)
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    out = t.clamp(0, 1).permute(0, 2, 3, 1).numpy().astype(np.float32)
    return out


_LOADERS = {"synthetic": _load_synthetic, "cifar10": _load_cifar10}


def load_classifier_training_set(config: ExperimentConfig) -> LabeledImageSet:
    """Larger split used only to train the target classifier.

    The attacked model plays the role of an externally pre-trained
    network, so it learns from its own pool of images, disjoint from the
    (much smaller) paired-training split.
    """
    ds = config.dataset
    per_class = ds.classifier_train_per_class
    if ds.name == "synthetic":
        return _synthesize(ds, "classifier_train", per_class, config.seed)
    if ds.name == "cifar10":
        big = replace(ds, train_per_class=per_class + ds.train_per_class)
        full = _load_cifar10(big, "train", config.seed)
        pair_split = _load_cifar10(ds, "train", config.seed)
        # drop anything selected for the paired split
        used = {img.tobytes() for img in pair_split.images}
        keep = [i for i, img in enumerate(full.images) if img.tobytes() not in used]
        chosen = []
        for cls in range(ds.num_classes):
            members = [i for i in keep if full.labels[i] == cls][:per_class]
            if len(members) < per_class:
                raise ConfigError(
                    f"dataset.classifier_train_per_class: class {cls} has only "
                    f"{len(members)} images left after the paired split")
            chosen.extend(members)
        return full.subset(np.asarray(chosen))
    raise ConfigError(f"dataset.name: unknown dataset {ds.name!r}")


def load_dataset(config: ExperimentConfig, split: str) -> LabeledImageSet:
    """Load the configured dataset split, deterministic under the seed."""
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    ds = config.dataset
    try:
        loader = _LOADERS[ds.name]
    except KeyError:
        raise ConfigError(
            f"dataset.name: unknown dataset {ds.name!r}; "
            f"registered: {sorted(_LOADERS)}") from None
    out = loader(ds, split, config.seed)
    log.info("loaded %s/%s: %d images (%dx%d)", ds.name, split, len(out),
             ds.image_size, ds.image_size)
    return out
