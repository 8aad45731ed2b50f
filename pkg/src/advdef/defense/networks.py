"""Generator and discriminator for the image reconstruction defense.

The generator is a U-Net encoder/decoder with skip connections whose
depth scales with the input side (5 down/up blocks at 32x32); decoder
dropout doubles as the stochastic noise source. The discriminator is a
patch-wise classifier over the channel concatenation of the conditioning
image and the candidate, emitting a grid of real/fake probabilities.
"""

import torch
import torch.nn as nn


def _depth_for(image_size: int) -> int:
    depth = 0
    side = image_size
    while side > 1:
        if side % 2:
            raise ValueError(f"image size {image_size} is not a power of two")
        side //= 2
        depth += 1
    if depth < 3:
        raise ValueError(f"image size {image_size} too small for the U-Net")
    return depth


class UNetGenerator(nn.Module):
    def __init__(self, in_channels: int = 3, base_channels: int = 32,
                 image_size: int = 32, dropout: float = 0.5):
        super().__init__()
        depth = _depth_for(image_size)
        enc_ch = [min(base_channels * 2 ** i, base_channels * 8) for i in range(depth)]

        self.encoders = nn.ModuleList()
        prev = in_channels
        for i, ch in enumerate(enc_ch):
            layers = [nn.Conv2d(prev, ch, 4, stride=2, padding=1)]
            if 0 < i < depth - 1:       # no norm on the outermost and innermost
                layers.append(nn.BatchNorm2d(ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            self.encoders.append(nn.Sequential(*layers))
            prev = ch

        self.decoders = nn.ModuleList()
        self.dropouts = nn.ModuleList()
        dec_in = enc_ch[-1]
        for i in range(depth - 1, 0, -1):
            out_ch = enc_ch[i - 1]
            self.decoders.append(nn.Sequential(
                nn.ConvTranspose2d(dec_in, out_ch, 4, stride=2, padding=1),
                nn.BatchNorm2d(out_ch),
                nn.ReLU(inplace=True),
            ))
            # dropout on the three innermost decoder blocks acts as noise z
            use_drop = len(self.decoders) <= 3 and dropout > 0
            self.dropouts.append(nn.Dropout(dropout) if use_drop else nn.Identity())
            dec_in = out_ch * 2          # skip concatenation
        self.final = nn.ConvTranspose2d(dec_in, in_channels, 4, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
        h = skips[-1]
        for i, (dec, drop) in enumerate(zip(self.decoders, self.dropouts)):
            h = drop(dec(h))
            h = torch.cat([h, skips[-2 - i]], dim=1)
        # tanh squashed and rescaled so outputs live in [0, 1]
        return (torch.tanh(self.final(h)) + 1.0) / 2.0


class PatchDiscriminator(nn.Module):
    """Probability grid over patches of a (condition, candidate) pair."""

    def __init__(self, in_channels: int = 6, base_channels: int = 64):
        super().__init__()
        b = base_channels
        # receptive field 8 px: about a quarter of a 32-px side
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, b, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b, 2 * b, 3, stride=1, padding=1),
            nn.BatchNorm2d(2 * b),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * b, 1, 1),
        )

    def forward(self, condition: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(torch.cat([condition, candidate], dim=1)))
