"""Small reference backbone for local checkpoints.

The exporter works with any ``nn.Module`` whose classifier is the last
``nn.Linear`` in module order; this class exists so that locally trained
checkpoints can be pickled/unpickled by name in CLI subprocesses.
"""

from __future__ import annotations

import torch
from torch import nn


class TinyCnn(nn.Module):
    """Two conv blocks, a hidden linear layer, and a softmax head.

    The head's input (the hidden layer activations) is the exported feature
    vector.
    """

    def __init__(self, n_classes: int, width: int = 16, hidden: int = 32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(2 * width * 16, hidden),
            nn.ReLU(),
        )
        self.head = nn.Linear(hidden, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))
