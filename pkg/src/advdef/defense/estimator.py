"""sklearn-style front door for the reconstruction defense.

``fit(X, y)`` takes perturbed images as X and their clean originals as
the target y; ``transform(X)`` maps (possibly attacked) images through
the trained generator. The underlying checkpoint is exposed for the
evaluation harness and the CLI.
"""

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ..classifier import FEATURE_LAYERS
from ..validation import check_image_batch
from .losses import TrainingSchedule, multistep_schedule
from .training import DefenseCheckpoint, load_checkpoint, reconstruct, train_defense


class ReconstructionDefense(BaseEstimator, TransformerMixin):
    """Conditional-GAN image reconstruction defense.

    Parameters
    ----------
    extractor : fitted CNNClassifier or None
        Source of the feature maps for the perceptual term. Required
        unless every schedule phase has lambda2 == 0.
    schedule : TrainingSchedule, list of config rows, or None
        None selects the default multi-step weight schedule over
        ``epochs``.
    """

    def __init__(self, extractor=None, epochs=100, schedule=None,
                 perceptual_layers=None, batch_size=16, lr=2e-4, beta1=0.5,
                 beta2=0.999, base_channels=32, val_fraction=0.1,
                 checkpoint_every=0, out_dir=None, loss_csv=None, seed=0,
                 device="cpu", inference_dropout=False, config_hash=""):
        self.extractor = extractor
        self.epochs = epochs
        self.schedule = schedule
        self.perceptual_layers = perceptual_layers
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.base_channels = base_channels
        self.dropout = dropout
        self.val_fraction = val_fraction
        self.checkpoint_every = checkpoint_every
        self.out_dir = out_dir
        self.loss_csv = loss_csv
        self.seed = seed
        self.device = device
        self.inference_dropout = inference_dropout
        self.config_hash = config_hash

    def _resolve_schedule(self) -> TrainingSchedule:
        if self.schedule is None:
            return multistep_schedule(self.epochs)
        if isinstance(self.schedule, TrainingSchedule):
            return self.schedule
        return TrainingSchedule.from_config_rows(self.schedule)

    def fit(self, X, y, attack_tags=()):
        """Train on perturbed inputs X against clean targets y."""
        X = check_image_batch(X, "X")
        y = check_image_batch(y, "y")
        schedule = self._resolve_schedule()
        extractor_module = None
        layers = ()
        if any(w.lambda2 > 0 for _, _, w in schedule.phases):
            if self.extractor is None:
                raise ValueError(
                    "schedule uses a nonzero perceptual weight; "
                    "pass extractor=<fitted classifier>")
            extractor_module = self.extractor.frozen_feature_module()
            layers = tuple(self.perceptual_layers
                           if self.perceptual_layers is not None else FEATURE_LAYERS)
        pairs = (X, y) if not attack_tags else _TaggedPairs(X, y, tuple(attack_tags))
        self.checkpoint_ = train_defense(
            pairs, schedule,
            extractor=extractor_module, perceptual_layers=layers,
            batch_size=self.batch_size, lr=self.lr,
            betas=(self.beta1, self.beta2), base_channels=self.base_channels,
            dropout=self.dropout, seed=self.seed, device=self.device,
            val_fraction=self.val_fraction,
            checkpoint_every=self.checkpoint_every, out_dir=self.out_dir,
            loss_csv=self.loss_csv, config_hash=self.config_hash,
            inference_dropout=self.inference_dropout,
        )
        return self

    def fit_pairs(self, pairs):
        """Train directly from a PairedImageSet (keeps the attack tags)."""
        return self.fit(pairs.perturbed, pairs.clean, attack_tags=pairs.attack_tags)

    def transform(self, X):
        if not hasattr(self, "checkpoint_"):
            raise NotFittedError("ReconstructionDefense is not fitted yet")
        return reconstruct(self.checkpoint_, X)

    @classmethod
    def from_checkpoint(cls, checkpoint) -> "ReconstructionDefense":
        """Wrap an existing checkpoint (or a path to one) for inference."""
        if not isinstance(checkpoint, DefenseCheckpoint):
            checkpoint = load_checkpoint(checkpoint)
        est = cls(epochs=checkpoint.schedule.total_epochs,
                  base_channels=checkpoint.base_channels,
                  inference_dropout=checkpoint.inference_dropout)
        est.checkpoint_ = checkpoint
        return est


class _TaggedPairs:
    """Minimal pairs carrier so tag metadata reaches the checkpoint."""

    def __init__(self, perturbed, clean, attack_tags):
        self.perturbed = perturbed
        self.clean = clean
        self.attack_tags = attack_tags

    def __len__(self):
        return len(self.attack_tags)
