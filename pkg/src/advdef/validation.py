"""Input validation helpers for image batches and labels.

The public data contract everywhere in this package is: images are numpy
float32 arrays of shape (batch, height, width, channels) with values in
[0, 1]; labels are int64 class indices. Torch tensors (NCHW) are an
internal detail of the models.
"""

import numpy as np
import torch

RANGE_TOL = 1e-6


def check_image_batch(x, name: str = "X", size: int | None = None,
                      channels: int | None = None) -> np.ndarray:
    """Validate and return an image batch as float32 NHWC in [0, 1].

    A single HWC image is promoted to a batch of one. Raises ValueError
    on wrong rank, wrong size/channels, non-finite values or values
    outside [0, 1] (beyond float tolerance).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"{name} must have shape (batch, H, W, C), got {x.shape}")
    if size is not None and (x.shape[1] != size or x.shape[2] != size):
        raise ValueError(f"{name} must be {size}x{size}, got {x.shape[1]}x{x.shape[2]}")
    if channels is not None and x.shape[3] != channels:
        raise ValueError(f"{name} must have {channels} channels, got {x.shape[3]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(x.min(initial=0.0)), float(x.max(initial=1.0))
    if lo < -RANGE_TOL or hi > 1.0 + RANGE_TOL:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{lo}, {hi}]")
    return np.clip(x, 0.0, 1.0)


def check_labels(y, name: str = "y", num_classes: int | None = None,
                 n: int | None = None) -> np.ndarray:
    """Validate and return labels as an int64 vector."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be a 1-D label vector, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError(f"{name} must contain integer class indices")
    y = y.astype(np.int64)
    if n is not None and len(y) != n:
        raise ValueError(f"{name} has {len(y)} entries, expected {n}")
    if len(y) and (y.min() < 0 or (num_classes is not None and y.max() >= num_classes)):
        raise ValueError(f"{name} contains labels outside [0, {num_classes})")
    return y


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{names[0]} and {names[1]} shapes differ: {a.shape} vs {b.shape}")


def to_nchw(x: np.ndarray, device="cpu") -> torch.Tensor:
    """NHWC numpy batch -> NCHW float32 torch tensor (always a copy)."""
    return torch.tensor(np.transpose(x, (0, 3, 1, 2)), dtype=torch.float32, device=device)


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    """NCHW torch tensor -> NHWC float32 numpy array."""
    return t.detach().cpu().permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32)


def frozen(x: np.ndarray) -> np.ndarray:
    """Own a read-only copy; returned datasets are immutable by contract."""
    out = np.array(x)
    out.setflags(write=False)
    return out
