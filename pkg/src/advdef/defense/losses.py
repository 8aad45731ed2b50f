"""Loss terms for the reconstruction defense and the epoch weight schedule.

The generator objective is the non-saturating adversarial term plus a
weighted L1 pixel term and a weighted feature-space (perceptual) term;
the weights follow a multi-step schedule over epochs. Public functions
take numpy arrays and return floats; the torch twins used inside the
training loop live alongside so both paths share one definition.
"""

from dataclasses import dataclass

import numpy as np
import torch

_EPS = 1e-7  # probability clamp keeping log() finite


@dataclass(frozen=True)
class LossWeights:
    """Weights of the L1 term (lambda1) and the perceptual term (lambda2)."""

    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainingSchedule:
    """Contiguous (epoch_start, epoch_end, LossWeights) phases."""

    phases: tuple

    def __post_init__(self):
        phases = tuple((int(s), int(e), w if isinstance(w, LossWeights)
                        else LossWeights(*w)) for s, e, w in self.phases)
        expected = 0
        for s, e, _ in phases:
            if s != expected or e <= s:
                raise ValueError(
                    f"schedule phases must be contiguous and non-empty; "
                    f"expected start {expected}, got [{s}, {e})")
            expected = e
        object.__setattr__(self, "phases", phases)

    @property
    def total_epochs(self) -> int:
        return self.phases[-1][1]

    @classmethod
    def from_config_rows(cls, rows) -> "TrainingSchedule":
        return cls(tuple((r["start"], r["end"],
                          LossWeights(float(r["lambda1"]), float(r["lambda2"])))
                         for r in rows))

    @classmethod
    def fixed(cls, total_epochs: int, lambda1: float = 100.0,
              lambda2: float = 1.0) -> "TrainingSchedule":
        return cls(((0, total_epochs, LossWeights(lambda1, lambda2)),))


def multistep_schedule(total_epochs: int = 100) -> TrainingSchedule:
    """The default three-phase weight schedule, scaled to the epoch count.

    Phase boundaries sit at 40% and 70% of training: lambda2 decays
    100 -> 50 -> 1 while lambda1 stays at 100.
    """
    b1 = max(1, round(total_epochs * 0.4))
    b2 = max(b1 + 1, round(total_epochs * 0.7))
    if total_epochs < 3:
        return TrainingSchedule.fixed(total_epochs, 100.0, 100.0)
    return TrainingSchedule((
        (0, b1, LossWeights(100.0, 100.0)),
        (b1, b2, LossWeights(100.0, 50.0)),
        (b2, total_epochs, LossWeights(100.0, 1.0)),
    ))


def loss_weight_schedule(schedule: TrainingSchedule, epoch: int) -> LossWeights:
    """Weights of the phase containing ``epoch``; raises when out of range."""
    epoch = int(epoch)
    if epoch < 0 or epoch >= schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside schedule range [0, {schedule.total_epochs})")
    for start, end, weights in schedule.phases:
        if start <= epoch < end:
            return weights
    raise AssertionError("contiguous schedule must cover every epoch")


# ---------------------------------------------------------------------------
# loss terms (numpy public API + torch twins)
# ---------------------------------------------------------------------------

def cgan_losses_t(d_real: torch.Tensor, d_fake: torch.Tensor):
    d_real = d_real.clamp(_EPS, 1.0 - _EPS)
    d_fake = d_fake.clamp(_EPS, 1.0 - _EPS)
    d_loss = -torch.log(d_real).mean() - torch.log(1.0 - d_fake).mean()
    g_adv = -torch.log(d_fake).mean()
    return g_adv, d_loss


def cgan_losses(d_real, d_fake):
    """(generator adversarial loss, discriminator loss) from patch grids.

    Discriminator loss is -mean log d_real - mean log(1 - d_fake); the
    generator term is the non-saturating -mean log d_fake.
    """
    g_adv, d_loss = cgan_losses_t(torch.as_tensor(np.asarray(d_real, dtype=np.float64)),
                                  torch.as_tensor(np.asarray(d_fake, dtype=np.float64)))
    g_adv, d_loss = float(g_adv), float(d_loss)
    if not (np.isfinite(g_adv) and np.isfinite(d_loss)):
        raise ValueError("cgan losses non-finite; discriminator outputs invalid")
    return g_adv, d_loss


def l1_loss_t(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (generated - target).abs().mean()


def l1_loss(generated, target) -> float:
    """Mean absolute pixel difference."""
    generated = np.asarray(generated, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {generated.shape} vs {target.shape}")
    return float(np.abs(generated - target).mean())


def perceptual_loss_t(module, layer_names, generated: torch.Tensor,
                      target: torch.Tensor) -> torch.Tensor:
    """Feature-space distance: per-layer mean |V_k(target) - V_k(generated)|,
    averaged over the requested layers (equal layer weights)."""
    if not layer_names:
        return torch.zeros((), device=generated.device)
    _, feats_gen = module.forward_features(generated)
    with torch.no_grad():
        _, feats_tgt = module.forward_features(target)
    terms = [(feats_tgt[name].detach() - feats_gen[name]).abs().mean()
             for name in layer_names]
    return torch.stack(terms).mean()


def perceptual_loss(extractor, layers, generated, target) -> float:
    """Feature distance between two image batches through the extractor.

    ``extractor`` is a fitted classifier exposing feature_activations;
    zero iff the images are identical, invariant to layer order.
    """
    layers = list(layers)
    if not layers:
        return 0.0
    feats_gen = extractor.feature_activations(generated, layers)
    feats_tgt = extractor.feature_activations(target, layers)
    terms = [float(np.abs(ft.astype(np.float64) - fg.astype(np.float64)).mean())
             for fg, ft in zip(feats_gen, feats_tgt)]
    return float(np.mean(terms))


def combined_generator_objective(adv_term: float, l1_term: float,
                                 perc_term: float, weights: LossWeights) -> float:
    """adv + lambda1*l1 + lambda2*perceptual."""
    terms = (adv_term, l1_term, perc_term)
    if not all(np.isfinite(t) for t in terms):
        raise ValueError(f"loss terms must be finite, got {terms}")
    return float(adv_term + weights.lambda1 * l1_term + weights.lambda2 * perc_term)
