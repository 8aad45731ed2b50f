"""Target classifier: a small CNN with sklearn-style fit/predict.

This is the model the attacks perturb and the defense protects. Besides
the usual estimator surface it exposes the two contracts the rest of the
pipeline builds on: cross-entropy input gradients (for gradient attacks)
and named intermediate feature maps (for the perceptual loss).

Inputs are NHWC float32 in [0, 1]; pixel standardization happens inside
the network, so attack budgets are always in raw pixel units.
"""

import copy
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .seeding import derive_seed, derive_torch_generator
from .validation import check_image_batch, check_labels, to_nchw, to_nhwc

log = logging.getLogger(__name__)

FEATURE_LAYERS = ("block1", "block2", "block3", "block4")


@dataclass
class Prediction:
    """One classification outcome: argmax label, its probability, raw logits."""

    label: int
    confidence: float
    logits: np.ndarray


class SmallCNN(nn.Module):
    """Four conv blocks with pooling and a global-average-pool dense head.

    The head is size-agnostic (inputs only need >= 16 px per side), which
    lets resize-and-pad style defenses feed slightly larger canvases.
    """

    def __init__(self, num_classes: int = 10, in_channels: int = 3,
                 widths=(32, 64, 128, 256)):
        super().__init__()
        if len(widths) != len(FEATURE_LAYERS):
            raise ValueError(f"widths must have {len(FEATURE_LAYERS)} entries")
        blocks = []
        prev = in_channels
        for w in widths:
            blocks.append(nn.Sequential(
                nn.Conv2d(prev, w, 3, padding=1),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(prev, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = (x - 0.5) / 0.25
        for block in self.blocks:
            h = block(h)
        return self.head(h.mean(dim=(2, 3)))

    def forward_features(self, x: torch.Tensor):
        """Logits plus the output of every conv block, shallow to deep."""
        feats = {}
        h = (x - 0.5) / 0.25
        for name, block in zip(FEATURE_LAYERS, self.blocks):
            h = block(h)
            feats[name] = h
        return self.head(h.mean(dim=(2, 3))), feats


class CNNClassifier(BaseEstimator, ClassifierMixin):
    """sklearn-style wrapper around :class:`SmallCNN`.

    Parameters mirror the experiment config; `fit` is deterministic on
    CPU for a fixed seed. After fitting, `module_` holds the torch model.
    """

    def __init__(self, num_classes=10, widths=(32, 64, 128, 256), epochs=30,
                 lr=1e-3, batch_size=64, seed=0, device="cpu"):
        self.num_classes = num_classes
        self.widths = widths
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.device = device

    # -- estimator surface ---------------------------------------------------

    def fit(self, X, y):
        X = check_image_batch(X, "X")
        y = check_labels(y, "y", num_classes=self.num_classes, n=len(X))
        if len(X) == 0:
            raise ValueError("X must be non-empty")
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(self.seed, "classifier", "init"))
            module = SmallCNN(self.num_classes, X.shape[3], tuple(self.widths))
        module = module.to(self.device).train()
        opt = torch.optim.Adam(module.parameters(), lr=self.lr)
        xs = to_nchw(X, self.device)
        ys = torch.tensor(y, device=self.device)
        n = len(X)
        history = []
        for epoch in range(self.epochs):
            gen = derive_torch_generator(self.seed, "classifier", "shuffle", epoch)
            order = torch.randperm(n, generator=gen)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                logits = module(xs[idx])
                loss = F.cross_entropy(logits, ys[idx])
                if not torch.isfinite(loss) or not torch.isfinite(logits).all():
                    raise RuntimeError(
                        f"classifier training diverged (non-finite loss at epoch {epoch})")
                opt.zero_grad()
                loss.backward()
                opt.step()
            # post-epoch training accuracy, evaluated with frozen batch stats
            module.eval()
            with torch.no_grad():
                correct = sum(int((module(xs[s:s + 512]).argmax(1)
                                   == ys[s:s + 512]).sum())
                              for s in range(0, n, 512))
            module.train()
            history.append(correct / n)
        module.eval()
        self.module_ = module
        self.classes_ = np.arange(self.num_classes)
        self.input_size_ = X.shape[1]
        self.train_accuracy_ = history[-1] if history else 0.0
        self.history_ = history
        log.info("classifier trained: %d epochs, final train accuracy %.3f",
                 self.epochs, self.train_accuracy_)
        return self

    def _require_fitted(self) -> SmallCNN:
        if not hasattr(self, "module_"):
            raise NotFittedError("CNNClassifier is not fitted yet")
        return self.module_

    def _check_input(self, X) -> np.ndarray:
        X = check_image_batch(X, "X")
        if X.shape[1] < 16 or X.shape[2] < 16:
            raise ValueError(f"inputs must be at least 16x16, got {X.shape[1]}x{X.shape[2]}")
        return X

    def decision_function(self, X) -> np.ndarray:
        """Raw logits, shape (N, num_classes)."""
        module = self._require_fitted()
        X = self._check_input(X)
        with torch.no_grad():
            logits = module(to_nchw(X, self.device))
        return logits.cpu().numpy()

    def predict(self, X) -> np.ndarray:
        # np.argmax breaks ties toward the lowest index by contract
        return np.argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predictions(self, X) -> list:
        """Per-image :class:`Prediction` records (label, confidence, logits)."""
        logits = self.decision_function(X)
        proba = self.predict_proba(X)
        out = []
        for row_logits, row_proba in zip(logits, proba):
            label = int(np.argmax(row_logits))
            out.append(Prediction(label, float(row_proba[label]), row_logits))
        return out

    # -- gradient / feature contracts ----------------------------------------

    def loss_gradient(self, X, y) -> np.ndarray:
        """Gradient of per-sample cross-entropy w.r.t. the input pixels.

        Returns an array shaped like X; model parameters are untouched.
        """
        module = self._require_fitted()
        X = self._check_input(X)
        y = check_labels(y, "y", num_classes=self.num_classes, n=len(X))
        xt = to_nchw(X, self.device).requires_grad_(True)
        yt = torch.tensor(y, device=self.device)
        loss = F.cross_entropy(module(xt), yt, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xt)
        return to_nhwc(grad)

    @property
    def feature_layer_names(self) -> tuple:
        return FEATURE_LAYERS

    def feature_activations(self, X, layers) -> list:
        """Feature maps for the requested layers, NHWC, in request order."""
        module = self._require_fitted()
        unknown = [name for name in layers if name not in FEATURE_LAYERS]
        if unknown:
            raise ValueError(
                f"unknown feature layer(s) {unknown}; valid names: {list(FEATURE_LAYERS)}")
        if not layers:
            return []
        X = self._check_input(X)
        with torch.no_grad():
            _, feats = module.forward_features(to_nchw(X, self.device))
        return [to_nhwc(feats[name]) for name in layers]

    def frozen_feature_module(self) -> SmallCNN:
        """Detached copy with frozen parameters, for use as a loss extractor."""
        module = copy.deepcopy(self._require_fitted()).eval()
        for p in module.parameters():
            p.requires_grad_(False)
        return module

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        module = self._require_fitted()
        torch.save({
            "format": 1,
            "params": self.get_params(),
            "state": module.state_dict(),
            "input_size": self.input_size_,
            "train_accuracy": self.train_accuracy_,
        }, path)

    @classmethod
    def load(cls, path, device="cpu") -> "CNNClassifier":
        blob = torch.load(path, map_location=device, weights_only=False)
        if blob.get("format") != 1:
            raise ValueError(f"unsupported classifier checkpoint format in {path}")
        params = dict(blob["params"])
        params["device"] = device
        est = cls(**params)
        module = SmallCNN(est.num_classes, 3, tuple(est.widths)).to(device)
        module.load_state_dict(blob["state"])
        module.eval()
        est.module_ = module
        est.classes_ = np.arange(est.num_classes)
        est.input_size_ = blob["input_size"]
        est.train_accuracy_ = blob["train_accuracy"]
        est.history_ = []
        return est


def parameter_digest(module: nn.Module) -> str:
    """Hash of all parameters/buffers; used to assert purity of inference."""
    import hashlib
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
