"""Convolutional encoder/decoder and the patch discriminator."""
import torch
from torch import nn
import torch.nn.functional as F


def _norm(c):
    return nn.GroupNorm(min(8, c), c)


class ResBlock(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.body = nn.Sequential(
            _norm(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
            _norm(c), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class Encoder(nn.Module):
    """Image (B, 3, H, W) -> latent (B, d, H / 2^n_down, W / 2^n_down)."""

    def __init__(self, in_channels=3, channels=64, code_dim=32, n_down=2):
        super().__init__()
        layers = [nn.Conv2d(in_channels, channels, 3, padding=1)]
        for _ in range(n_down):
            layers += [ResBlock(channels), nn.Conv2d(channels, channels, 4, stride=2, padding=1)]
        layers += [ResBlock(channels), _norm(channels), nn.SiLU(), nn.Conv2d(channels, code_dim, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    """Latent (B, d, h, w) -> image in [0, 1] via a final sigmoid."""

    def __init__(self, out_channels=3, channels=64, code_dim=32, n_down=2):
        super().__init__()
        layers = [nn.Conv2d(code_dim, channels, 3, padding=1), ResBlock(channels)]
        for _ in range(n_down):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"),
                       nn.Conv2d(channels, channels, 3, padding=1), ResBlock(channels)]
        layers += [_norm(channels), nn.SiLU(), nn.Conv2d(channels, out_channels, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.net(z))


class PatchDiscriminator(nn.Module):
    """PatchGAN-style critic returning one logit per receptive-field patch."""

    def __init__(self, in_channels=3, channels=32, n_layers=2):
        super().__init__()
        layers = [nn.Conv2d(in_channels, channels, 4, 2, 1), nn.LeakyReLU(0.2)]
        c = channels
        for i in range(1, n_layers + 1):
            c_next = channels * min(2 ** i, 8)
            layers += [nn.Conv2d(c, c_next, 4, 2 if i < n_layers else 1, 1),
                       _norm(c_next), nn.LeakyReLU(0.2)]
            c = c_next
        layers.append(nn.Conv2d(c, 1, 4, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def hinge_d_loss(logits_real, logits_fake):
    return F.relu(1.0 - logits_real).mean() + F.relu(1.0 + logits_fake).mean()


def hinge_g_loss(logits_fake):
    return -logits_fake.mean()
