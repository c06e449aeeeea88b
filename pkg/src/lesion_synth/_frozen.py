"""Frozen, seeded random convolutional stacks.

Used as the default perceptual network and as the default evaluation feature
extractor. Weights depend only on the seed, so features are reproducible
without any download.
"""
import torch
from torch import nn


class FrozenConvStack(nn.Module):
    def __init__(self, channels=(16, 32, 64), in_channels=3, seed=0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers = []
            c_in = in_channels
            for i, c in enumerate(channels):
                conv = nn.Conv2d(c_in, c, 3, stride=1 if i == 0 else 2, padding=1)
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)
                layers.append(conv)
                c_in = c
        self.convs = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always frozen
        return super().train(False)

    def forward(self, x):
        """Return the list of post-activation feature maps, one per layer."""
        feats = []
        for conv in self.convs:
            x = torch.relu(conv(x))
            feats.append(x)
        return feats
