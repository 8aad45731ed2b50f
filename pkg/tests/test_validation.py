import numpy as np
import pytest

from advdef.validation import (check_image_batch, check_labels, frozen,
                               to_nchw, to_nhwc)


def test_single_image_promoted_to_batch():
    img = np.zeros((8, 8, 3), dtype=np.float32)
    out = check_image_batch(img)
    assert out.shape == (1, 8, 8, 3)


def test_rejects_wrong_rank():
    with pytest.raises(ValueError, match="batch, H, W, C"):
        check_image_batch(np.zeros((8, 8)))


def test_rejects_out_of_range():
    bad = np.full((1, 4, 4, 3), 1.5, dtype=np.float32)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        check_image_batch(bad)


def test_rejects_non_finite():
    bad = np.zeros((1, 4, 4, 3), dtype=np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        check_image_batch(bad)


def test_size_and_channel_checks():
    x = np.zeros((2, 8, 8, 3), dtype=np.float32)
    with pytest.raises(ValueError, match="16x16"):
        check_image_batch(x, size=16)
    with pytest.raises(ValueError, match="channels"):
        check_image_batch(x, channels=1)


def test_labels_validation():
    assert check_labels([0, 1, 2]).dtype == np.int64
    with pytest.raises(ValueError, match="1-D"):
        check_labels([[0, 1]])
    with pytest.raises(ValueError, match="outside"):
        check_labels([0, 5], num_classes=3)
    with pytest.raises(ValueError, match="expected 3"):
        check_labels([0, 1], n=3)


def test_nchw_round_trip():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (4, 8, 8, 3)).astype(np.float32)
    assert np.array_equal(to_nhwc(to_nchw(x)), x)


def test_frozen_is_read_only():
    x = frozen(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        x[0, 0] = 1.0
