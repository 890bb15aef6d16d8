"""Small CNN classifiers with named layers.

Convolutional weights are exposed in (F, F, I, O) order, i.e. kernel height,
kernel width, input channels, output channels. Torch stores them as
(O, I, F, F); the accessors below do the permutation so callers never see it.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class Classifier(nn.Module):
    """Base class: ``forward`` takes NHWC images in [0, 1] and returns logits."""

    kind = "classifier"

    def __init__(self, num_classes: int, input_shape: tuple[int, int, int]):
        super().__init__()
        if num_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.layers = nn.ModuleDict()

    # -- layer access -----------------------------------------------------

    @property
    def conv_names(self) -> list[str]:
        return [name for name, m in self.layers.items() if isinstance(m, nn.Conv2d)]

    @property
    def prunable_names(self) -> list[str]:
        return [name for name, m in self.layers.items() if isinstance(m, (nn.Conv2d, nn.Linear))]

    def layer(self, name: str) -> nn.Module:
        if name not in self.layers:
            raise KeyError(f"no layer named {name!r}; have {list(self.layers)}")
        return self.layers[name]

    def conv_weight(self, name: str) -> torch.Tensor:
        """Differentiable (F, F, I, O) view of a convolutional kernel."""
        conv = self.layer(name)
        if not isinstance(conv, nn.Conv2d):
            raise KeyError(f"layer {name!r} is not convolutional")
        return conv.weight.permute(2, 3, 1, 0)

    def get_conv_weight(self, name: str) -> np.ndarray:
        return self.conv_weight(name).detach().cpu().numpy().copy()

    def set_conv_weight(self, name: str, value) -> None:
        current = self.conv_weight(name)
        value = torch.as_tensor(np.asarray(value), dtype=current.dtype)
        if tuple(value.shape) != tuple(current.shape):
            raise ValueError(f"shape {tuple(value.shape)} does not match {tuple(current.shape)}")
        with torch.no_grad():
            self.layer(name).weight.copy_(value.permute(3, 2, 0, 1))

    # -- inference --------------------------------------------------------

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def _as_input(self, pixels) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(np.asarray(pixels), dtype=dtype)

    @torch.no_grad()
    def logits(self, pixels, batch_size: int = 2048) -> np.ndarray:
        self.eval()
        x = self._as_input(pixels)
        out = [self(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return torch.cat(out).cpu().numpy()

    @torch.no_grad()
    def probabilities(self, pixels, batch_size: int = 2048) -> np.ndarray:
        self.eval()
        x = self._as_input(pixels)
        out = [torch.softmax(self(x[i : i + batch_size]), dim=1) for i in range(0, len(x), batch_size)]
        return torch.cat(out).cpu().numpy()

    def predict(self, pixels) -> np.ndarray:
        return self.logits(pixels).argmax(axis=1)

    def architecture(self) -> dict:
        return {"kind": self.kind, "num_classes": self.num_classes}


class LeNet5(Classifier):
    """LeNet-5 for 28x28 grayscale digits.

    conv 1: (5, 5, 1, 6), padding 2 -> 28x28x6 -> pool -> 14x14x6
    conv 2: (5, 5, 6, 16)           -> 10x10x16 -> pool -> 5x5x16
    fc 1: 400 -> 120, fc 2: 120 -> 84, fc 3: 84 -> K
    """

    kind = "lenet5"

    def __init__(self, num_classes: int = 10):
        super().__init__(num_classes, (28, 28, 1))
        self.layers["conv 1"] = nn.Conv2d(1, 6, 5, padding=2)
        self.layers["conv 2"] = nn.Conv2d(6, 16, 5)
        self.layers["fc 1"] = nn.Linear(16 * 5 * 5, 120)
        self.layers["fc 2"] = nn.Linear(120, 84)
        self.layers["fc 3"] = nn.Linear(84, num_classes)

    def forward(self, x):
        x = x.permute(0, 3, 1, 2)
        x = F.max_pool2d(F.relu(self.layers["conv 1"](x)), 2)
        x = F.max_pool2d(F.relu(self.layers["conv 2"](x)), 2)
        x = x.flatten(1)
        x = F.relu(self.layers["fc 1"](x))
        x = F.relu(self.layers["fc 2"](x))
        return self.layers["fc 3"](x)


class SmallCifarCNN(Classifier):
    """Desk-scale stand-in for 32x32 RGB images. Not a Wide ResNet.

    conv 1: (3, 3, 3, 32)  -> 32x32x32 -> pool -> 16x16x32
    conv 2: (3, 3, 32, 64) -> 16x16x64 -> pool -> 8x8x64   (default watermark layer)
    conv 3: (3, 3, 64, 64) -> 8x8x64   -> pool -> 4x4x64
    fc 1: 1024 -> 128, fc 2: 128 -> K
    """

    kind = "small_cifar_cnn"

    def __init__(self, num_classes: int = 10):
        super().__init__(num_classes, (32, 32, 3))
        self.layers["conv 1"] = nn.Conv2d(3, 32, 3, padding=1)
        self.layers["conv 2"] = nn.Conv2d(32, 64, 3, padding=1)
        self.layers["conv 3"] = nn.Conv2d(64, 64, 3, padding=1)
        self.layers["fc 1"] = nn.Linear(4 * 4 * 64, 128)
        self.layers["fc 2"] = nn.Linear(128, num_classes)

    def forward(self, x):
        x = x.permute(0, 3, 1, 2)
        x = F.max_pool2d(F.relu(self.layers["conv 1"](x)), 2)
        x = F.max_pool2d(F.relu(self.layers["conv 2"](x)), 2)
        x = F.max_pool2d(F.relu(self.layers["conv 3"](x)), 2)
        x = F.relu(self.layers["fc 1"](x.flatten(1)))
        return self.layers["fc 2"](x)


ARCHITECTURES = {LeNet5.kind: LeNet5, SmallCifarCNN.kind: SmallCifarCNN}

DEFAULT_WATERMARK_LAYER = "conv 2"


def build_lenet5(num_classes: int = 10, seed: int | None = None) -> LeNet5:
    if seed is not None:
        torch.manual_seed(seed)
    return LeNet5(num_classes)


def build_small_cifar_cnn(num_classes: int = 10, seed: int | None = None) -> SmallCifarCNN:
    if seed is not None:
        torch.manual_seed(seed)
    return SmallCifarCNN(num_classes)


def build(kind: str, num_classes: int = 10, seed: int | None = None) -> Classifier:
    try:
        cls = ARCHITECTURES[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; choose from {sorted(ARCHITECTURES)}") from None
    if seed is not None:
        torch.manual_seed(seed)
    return cls(num_classes)
