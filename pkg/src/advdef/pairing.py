"""Paired (perturbed, clean) training-set assembly for the defense.

Within each class the attacks take turns round-robin over the clean
images, so every class contributes the same number of pairs per attack.
All perturbed images are produced and kept in memory; nothing touches
disk on the way to training or evaluation.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .attacks import ATTACK_METHODS, AttackSpec, make_attack
from .data import LabeledImageSet
from .seeding import derive_seed
from .validation import check_image_batch, frozen

log = logging.getLogger(__name__)

# attacks whose contract defines per-image failure (no adversarial found);
# failed pairs are skipped instead of training on an identity pair
FALLIBLE_METHODS = ("cw_l2", "deepfool")


@dataclass(frozen=True)
class PairedImageSet:
    """Index-aligned perturbed/clean image pairs with per-pair attack tags."""

    perturbed: np.ndarray          # (N, H, W, C), attack outputs
    clean: np.ndarray              # (N, H, W, C), reconstruction targets
    attack_tags: tuple             # length N, registered attack names
    skipped: tuple = field(default=(), compare=False)  # (index, reason) log

    def __post_init__(self):
        perturbed = check_image_batch(self.perturbed, "perturbed")
        clean = check_image_batch(self.clean, "clean")
        if perturbed.shape != clean.shape:
            raise ValueError(
                f"perturbed and clean shapes differ: {perturbed.shape} vs {clean.shape}")
        tags = tuple(self.attack_tags)
        if len(tags) != len(clean):
            raise ValueError(f"{len(tags)} attack_tags for {len(clean)} pairs")
        unknown = sorted({t for t in tags if t not in ATTACK_METHODS})
        if unknown:
            raise ValueError(f"unregistered attack tags: {unknown}")
        object.__setattr__(self, "perturbed", frozen(perturbed))
        object.__setattr__(self, "clean", frozen(clean))
        object.__setattr__(self, "attack_tags", tags)

    def __len__(self) -> int:
        return len(self.attack_tags)

    def with_tag(self, tag: str) -> "PairedImageSet":
        idx = np.array([i for i, t in enumerate(self.attack_tags) if t == tag])
        if len(idx) == 0:
            return PairedImageSet(
                self.perturbed[:0], self.clean[:0], ())
        return PairedImageSet(self.perturbed[idx], self.clean[idx],
                              tuple(self.attack_tags[i] for i in idx))

    def tag_counts(self) -> dict:
        counts = {}
        for t in self.attack_tags:
            counts[t] = counts.get(t, 0) + 1
        return counts


def build_paired_training_set(clean: LabeledImageSet, attacks: list,
                              classifier, per_attack: int,
                              seed: int = 0) -> PairedImageSet:
    """Attack the clean set and pair each output with its original.

    Each clean image is attacked exactly once; attacks rotate round-robin
    within every class so each (class, attack) cell gets ``per_attack``
    images. Images where a fallible attack reports failure are skipped
    with a warning and recorded in ``skipped``.
    """
    attacks = list(attacks)
    if not attacks:
        raise ValueError("at least one attack is required")
    for spec in attacks:
        if not isinstance(spec, AttackSpec):
            raise TypeError(f"expected AttackSpec, got {type(spec).__name__}")
    n_attacks = len(attacks)
    labels = clean.labels
    per_class_counts = np.bincount(labels)
    for cls, count in enumerate(per_class_counts):
        if count and per_attack * n_attacks > count:
            raise ValueError(
                f"class {cls} has {count} clean images but "
                f"per_attack x attacks = {per_attack * n_attacks}")

    # round-robin assignment within each class, in dataset order
    assignment = np.empty(len(clean), dtype=np.int64)
    position_in_class = {}
    for i, cls in enumerate(labels):
        j = position_in_class.get(int(cls), 0)
        assignment[i] = j % n_attacks
        position_in_class[int(cls)] = j + 1

    perturbed = np.empty_like(clean.images)
    ok = np.ones(len(clean), dtype=bool)
    skipped = []
    for a, spec in enumerate(attacks):
        idx = np.flatnonzero(assignment == a)
        if len(idx) == 0:
            continue
        attack_fn = make_attack(spec)
        result = attack_fn(classifier, clean.images[idx], labels[idx],
                           seed=derive_seed(seed, "pairing", spec.method))
        perturbed[idx] = result.adversarial
        if spec.method in FALLIBLE_METHODS:
            failed = idx[~result.success_mask]
            for i in failed:
                skipped.append((int(i), f"{spec.method} found no adversarial"))
                ok[i] = False
            if len(failed):
                log.warning("%s failed on %d/%d images; pairs skipped",
                            spec.method, len(failed), len(idx))

    keep = np.flatnonzero(ok)
    tags = tuple(attacks[assignment[i]].method for i in keep)
    return PairedImageSet(perturbed[keep], clean.images[keep], tags,
                          skipped=tuple(skipped))
