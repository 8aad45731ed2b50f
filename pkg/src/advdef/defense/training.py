"""Training loop and checkpointing for the reconstruction defense.

Alternates one discriminator and one generator update per batch; the
generator minimizes the adversarial term plus schedule-weighted L1 and
perceptual terms. Per-step loss values go to a CSV, checkpoints are
written on a fixed cadence plus a best-validation-L1 snapshot, and the
whole run is deterministic for a fixed seed on CPU.
"""

import copy
import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from ..seeding import derive_seed, derive_torch_generator
from ..validation import check_image_batch, to_nchw, to_nhwc
from .losses import (TrainingSchedule, cgan_losses_t, l1_loss_t,
                     loss_weight_schedule, perceptual_loss_t)
from .networks import PatchDiscriminator, UNetGenerator

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class DefenseCheckpoint:
    """Trained generator plus everything needed to resume or audit a run."""

    generator: UNetGenerator
    discriminator: PatchDiscriminator | None
    g_opt_state: dict | None
    d_opt_state: dict | None
    epoch: int
    schedule: TrainingSchedule
    config_hash: str = ""
    attack_list: tuple = ()
    image_size: int = 32
    base_channels: int = 32
    in_channels: int = 3
    inference_dropout: bool = False
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.epoch <= self.schedule.total_epochs):
            raise ValueError(
                f"epoch counter {self.epoch} outside schedule coverage "
                f"[0, {self.schedule.total_epochs}]")


def save_checkpoint(ckpt: DefenseCheckpoint, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "generator": ckpt.generator.state_dict(),
        "discriminator": None if ckpt.discriminator is None
        else ckpt.discriminator.state_dict(),
        "g_opt_state": ckpt.g_opt_state,
        "d_opt_state": ckpt.d_opt_state,
        "epoch": ckpt.epoch,
        "schedule": [{"start": s, "end": e,
                      "lambda1": w.lambda1, "lambda2": w.lambda2}
                     for s, e, w in ckpt.schedule.phases],
        "config_hash": ckpt.config_hash,
        "attack_list": list(ckpt.attack_list),
        "image_size": ckpt.image_size,
        "base_channels": ckpt.base_channels,
        "in_channels": ckpt.in_channels,
        "inference_dropout": ckpt.inference_dropout,
        "history": ckpt.history,
    }, path)


def load_checkpoint(path, device="cpu") -> DefenseCheckpoint:
    blob = torch.load(path, map_location=device, weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported defense checkpoint format in {path}")
    gen = UNetGenerator(blob["in_channels"], blob["base_channels"],
                        blob["image_size"]).to(device)
    gen.load_state_dict(blob["generator"])
    gen.eval()
    disc = None
    if blob["discriminator"] is not None:
        disc = PatchDiscriminator(2 * blob["in_channels"]).to(device)
        disc.load_state_dict(blob["discriminator"])
        disc.eval()
    return DefenseCheckpoint(
        generator=gen, discriminator=disc,
        g_opt_state=blob["g_opt_state"], d_opt_state=blob["d_opt_state"],
        epoch=blob["epoch"],
        schedule=TrainingSchedule.from_config_rows(blob["schedule"]),
        config_hash=blob["config_hash"], attack_list=tuple(blob["attack_list"]),
        image_size=blob["image_size"], base_channels=blob["base_channels"],
        in_channels=blob["in_channels"],
        inference_dropout=blob["inference_dropout"], history=blob["history"],
    )


def train_defense(pairs, schedule: TrainingSchedule, epochs: int | None = None,
                  *, extractor=None, perceptual_layers=(),
                  batch_size: int = 16, lr: float = 2e-4, betas=(0.5, 0.999),
                  base_channels: int = 32, seed: int = 0, device: str = "cpu",
                  val_fraction: float = 0.1, checkpoint_every: int = 10,
                  out_dir=None, loss_csv=None, config_hash: str = "",
                  inference_dropout: bool = False, lr_decay: bool = True,
                  dropout: float = 0.5) -> DefenseCheckpoint:
    """Train generator/discriminator on a paired set under the schedule.

    ``pairs`` is a PairedImageSet or a plain (perturbed, clean) tuple.
    ``extractor`` is a frozen feature module (see
    CNNClassifier.frozen_feature_module); it is required whenever any
    schedule phase has a nonzero perceptual weight. With ``lr_decay`` the
    learning rate decays linearly to zero over the second half of
    training, which sharpens late-phase pixel fidelity. Raises
    RuntimeError on non-finite losses; checkpoints already written stay
    on disk.
    """
    if isinstance(pairs, tuple):
        perturbed, clean = pairs
        attack_tags = ()
    else:
        perturbed, clean = pairs.perturbed, pairs.clean
        attack_tags = tuple(pairs.attack_tags)
    perturbed = check_image_batch(perturbed, "perturbed")
    clean = check_image_batch(clean, "clean")
    if perturbed.shape != clean.shape:
        raise ValueError(
            f"perturbed and clean shapes differ: {perturbed.shape} vs {clean.shape}")
    if len(clean) == 0:
        raise ValueError("paired training set is empty")
    if epochs is None:
        epochs = schedule.total_epochs
    if epochs != schedule.total_epochs:
        raise ValueError(
            f"schedule covers [0, {schedule.total_epochs}) but epochs={epochs}")
    needs_extractor = any(w.lambda2 > 0 for _, _, w in schedule.phases)
    if needs_extractor and (extractor is None or not perceptual_layers):
        raise ValueError(
            "schedule uses a nonzero perceptual weight; pass extractor and "
            "perceptual_layers")

    size = clean.shape[1]
    channels = clean.shape[3]
    x_all = to_nchw(perturbed, device)
    y_all = to_nchw(clean, device)
    n = len(clean)

    # held-out pairs for the best-checkpoint criterion
    n_val = int(round(val_fraction * n)) if n >= 10 else 0
    perm = torch.randperm(n, generator=derive_torch_generator(seed, "defense", "valsplit"))
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "defense", "train"))
        gen = UNetGenerator(channels, base_channels, size, dropout=dropout).to(device)
        disc = PatchDiscriminator(2 * channels).to(device)
        g_opt = torch.optim.Adam(gen.parameters(), lr=lr, betas=tuple(betas))
        d_opt = torch.optim.Adam(disc.parameters(), lr=lr, betas=tuple(betas))

        csv_writer = fh = None
        if loss_csv is not None:
            os.makedirs(os.path.dirname(os.path.abspath(loss_csv)), exist_ok=True)
            fh = open(loss_csv, "w", newline="")
            csv_writer = csv.writer(fh)
            csv_writer.writerow(["epoch", "step", "adv", "l1", "perc",
                                 "lambda1", "lambda2"])

        best_val = float("inf")
        best_state = None
        val_history, epoch_l1 = [], []
        try:
            for epoch in range(epochs):
                weights = loss_weight_schedule(schedule, epoch)
                if lr_decay:
                    # hold lr for the first half, then decay linearly to zero
                    half = epochs // 2
                    factor = 1.0 if epoch < half else \
                        (epochs - epoch) / max(epochs - half, 1)
                    for opt in (g_opt, d_opt):
                        for group in opt.param_groups:
                            group["lr"] = lr * factor
                order = train_idx[torch.randperm(
                    len(train_idx),
                    generator=derive_torch_generator(seed, "defense", "shuffle", epoch))]
                gen.train()
                disc.train()
                l1_sum, batches = 0.0, 0
                for step, start in enumerate(range(0, len(order), batch_size)):
                    idx = order[start:start + batch_size]
                    x, y = x_all[idx], y_all[idx]

                    fake = gen(x)

                    d_real = disc(x, y)
                    d_fake = disc(x, fake.detach())
                    _, d_loss = cgan_losses_t(d_real, d_fake)
                    d_opt.zero_grad()
                    d_loss.backward()
                    d_opt.step()

                    g_adv, _ = cgan_losses_t(d_real.detach(), disc(x, fake))
                    l1 = l1_loss_t(fake, y)
                    perc = perceptual_loss_t(extractor, perceptual_layers, fake, y) \
                        if weights.lambda2 > 0 else torch.zeros((), device=device)
                    g_total = g_adv + weights.lambda1 * l1 + weights.lambda2 * perc
                    if not torch.isfinite(g_total) or not torch.isfinite(d_loss):
                        raise RuntimeError(
                            f"defense training diverged at epoch {epoch} step {step}; "
                            "last written checkpoint retained")
                    g_opt.zero_grad()
                    g_total.backward()
                    g_opt.step()

                    l1_sum += float(l1.detach())
                    batches += 1
                    if csv_writer is not None:
                        csv_writer.writerow([epoch, step, f"{float(g_adv):.6f}",
                                             f"{float(l1):.6f}", f"{float(perc):.6f}",
                                             weights.lambda1, weights.lambda2])
                epoch_l1.append(l1_sum / max(batches, 1))

                if n_val:
                    gen.eval()
                    with torch.no_grad():
                        val_l1 = float(l1_loss_t(gen(x_all[val_idx]), y_all[val_idx]))
                    val_history.append(val_l1)
                    if val_l1 < best_val:
                        best_val = val_l1
                        best_state = copy.deepcopy(gen.state_dict())

                if out_dir and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                    ckpt = _snapshot(gen, disc, g_opt, d_opt, epoch + 1, schedule,
                                     config_hash, attack_tags, size, base_channels,
                                     channels, inference_dropout,
                                     val_history, epoch_l1)
                    save_checkpoint(ckpt, os.path.join(out_dir, f"epoch_{epoch + 1:04d}.pt"))
        finally:
            if fh is not None:
                fh.close()

    gen.eval()
    disc.eval()
    final = _snapshot(gen, disc, g_opt, d_opt, epochs, schedule, config_hash,
                      attack_tags, size, base_channels, channels,
                      inference_dropout, val_history, epoch_l1)
    if out_dir:
        save_checkpoint(final, os.path.join(out_dir, "final.pt"))
        if best_state is not None:
            best_gen = UNetGenerator(channels, base_channels, size).to(device)
            best_gen.load_state_dict(best_state)
            best = _snapshot(best_gen, None, None, None, epochs, schedule,
                             config_hash, attack_tags, size, base_channels,
                             channels, inference_dropout, val_history, epoch_l1)
            save_checkpoint(best, os.path.join(out_dir, "best.pt"))
    log.info("defense trained: %d epochs on %d pairs (final epoch L1 %.4f)",
             epochs, n, epoch_l1[-1] if epoch_l1 else float("nan"))
    return final


def _snapshot(gen, disc, g_opt, d_opt, epoch, schedule, config_hash, attack_tags,
              size, base_channels, channels, inference_dropout,
              val_history, epoch_l1) -> DefenseCheckpoint:
    return DefenseCheckpoint(
        generator=gen,
        discriminator=disc,
        g_opt_state=None if g_opt is None else copy.deepcopy(g_opt.state_dict()),
        d_opt_state=None if d_opt is None else copy.deepcopy(d_opt.state_dict()),
        epoch=epoch,
        schedule=schedule,
        config_hash=config_hash,
        attack_list=tuple(sorted(set(attack_tags))),
        image_size=size,
        base_channels=base_channels,
        in_channels=channels,
        inference_dropout=inference_dropout,
        history={"val_l1": list(val_history), "train_l1": list(epoch_l1)},
    )


def reconstruct(checkpoint: DefenseCheckpoint, x_adv, batch_size: int = 64) -> np.ndarray:
    """Run the generator over a batch, in memory end to end.

    Dropout stays off unless the checkpoint was built with
    inference_dropout; outputs are NHWC float32 in [0, 1].
    """
    x = check_image_batch(x_adv, "x_adv")
    if x.shape[1] != checkpoint.image_size or x.shape[2] != checkpoint.image_size:
        raise ValueError(
            f"input is {x.shape[1]}x{x.shape[2]} but the generator expects "
            f"{checkpoint.image_size}x{checkpoint.image_size}")
    gen = checkpoint.generator
    gen.eval()
    if checkpoint.inference_dropout:
        for m in gen.modules():
            if isinstance(m, torch.nn.Dropout):
                m.train()
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xt = to_nchw(x[start:start + batch_size])
            outs.append(to_nhwc(gen(xt)))
    gen.eval()
    return np.clip(np.concatenate(outs, axis=0), 0.0, 1.0)
