import numpy as np
import pytest

from advdef.config import DatasetConfig, ExperimentConfig
from advdef.data import (LabeledImageSet, load_classifier_training_set,
                         load_dataset, render_synthetic_image)
from advdef.errors import ConfigError
from advdef.seeding import derive_rng
from conftest import tiny_config


def test_desk_train_counts(cfg, datasets):
    train = datasets["train"]
    assert len(train) == cfg.dataset.num_classes * cfg.dataset.train_per_class
    counts = np.bincount(train.labels, minlength=cfg.dataset.num_classes)
    assert (counts == cfg.dataset.train_per_class).all()


def test_desk_default_is_180_train_images():
    from advdef.config import default_desk_config
    cfg = default_desk_config()
    assert cfg.dataset.num_classes * cfg.dataset.train_per_class == 180


def test_paper_scale_counts():
    # the full-scale setting: 18 per class over 1000 classes, 5 for test
    cfg = ExperimentConfig(seed=0, dataset=DatasetConfig(
        num_classes=1000, train_per_class=18, test_per_class=5,
        classifier_train_per_class=1))
    cfg.validate()
    assert len(load_dataset(cfg, "train")) == 18_000
    assert len(load_dataset(cfg, "test")) == 5_000


def test_images_in_range_and_shape(datasets, cfg):
    imgs = datasets["test"].images
    s = cfg.dataset.image_size
    assert imgs.shape[1:] == (s, s, 3)
    assert imgs.dtype == np.float32
    assert imgs.min() >= 0.0 and imgs.max() <= 1.0


def test_deterministic_under_seed(cfg):
    a = load_dataset(cfg, "train")
    b = load_dataset(cfg, "train")
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)


def test_seed_changes_data():
    a = load_dataset(tiny_config(seed=0), "train")
    b = load_dataset(tiny_config(seed=1), "train")
    assert not np.array_equal(a.images, b.images)


def test_splits_differ(cfg):
    train = load_dataset(tiny_config(dataset=cfg.dataset), "train")
    test = load_dataset(tiny_config(dataset=cfg.dataset), "test")
    n = min(len(train), len(test))
    assert not np.array_equal(train.images[:n], test.images[:n])


def test_classifier_pool_disjoint_from_train_stream(cfg, datasets):
    pool = datasets["clf_train"]
    train = datasets["train"]
    assert len(pool) == cfg.dataset.num_classes * cfg.dataset.classifier_train_per_class
    seen = {img.tobytes() for img in train.images}
    overlap = sum(img.tobytes() in seen for img in pool.images)
    assert overlap == 0


def test_unknown_dataset_name():
    cfg = tiny_config()
    cfg.dataset.name = "imagenet22k"
    with pytest.raises(ConfigError, match="imagenet22k"):
        load_dataset(cfg, "train")


def test_invalid_split():
    with pytest.raises(ValueError, match="split"):
        load_dataset(tiny_config(), "validation")


def test_renderer_deterministic_per_stream():
    a = render_synthetic_image(derive_rng(0, "x"), 3, 32)
    b = render_synthetic_image(derive_rng(0, "x"), 3, 32)
    assert np.array_equal(a, b)


def test_labeled_set_is_immutable(datasets):
    with pytest.raises(ValueError):
        datasets["train"].images[0, 0, 0, 0] = 0.5


def test_subset_keeps_alignment(datasets):
    sub = datasets["test"].subset(np.arange(5))
    assert len(sub) == 5
    assert np.array_equal(sub.images, datasets["test"].images[:5])
    assert np.array_equal(sub.labels, datasets["test"].labels[:5])
