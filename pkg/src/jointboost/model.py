"""Joint classifier-discriminator model wrapper.

A single C-class backbone serves three readings of its logit vector:

* ``class_probs`` — softmax class posterior,
* ``real_prob``   — sigmoid of the labeled-class logit, the real/fake
  probability the discriminator side uses (never the pooled energy),
* ``energy``      — negative log-sum-exp of the logits, exposed for
  analysis and diagnostics only.

The backbone is injected, not fixed; any module mapping an NCHW float
tensor to (N, C) logits works. Forward evaluation is reentrant for
read-only parameters: concurrent evaluations are safe as long as no
parameter update is in flight, and there are no internal mutable caches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .datapipe import ImageBatch
from .errors import ConfigurationError


def batch_to_tensor(batch: ImageBatch) -> torch.Tensor:
    """NHWC float32 numpy pixels -> NCHW float32 torch tensor."""
    return torch.from_numpy(np.ascontiguousarray(batch.pixels)).permute(0, 3, 1, 2).contiguous()


def tensor_to_pixels(t: torch.Tensor) -> np.ndarray:
    """NCHW torch tensor -> NHWC float32 numpy pixels."""
    return t.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy().astype(np.float32)


class JointModel(nn.Module):
    """Backbone wrapper fixing the class count and the valid pixel range."""

    def __init__(self, backbone: nn.Module, num_classes: int, input_range=(0.0, 1.0)):
        super().__init__()
        if num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        self.backbone = backbone
        self.num_classes = int(num_classes)
        self.input_range = (float(input_range[0]), float(input_range[1]))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.backbone(x)
        if out.ndim != 2 or out.shape[-1] != self.num_classes:
            raise ConfigurationError(
                f"backbone produced shape {tuple(out.shape)}, expected (N, {self.num_classes})"
            )
        return out

    def logits(self, batch) -> torch.Tensor:
        """Per-image logit vectors for an ImageBatch or an NCHW tensor.

        Tensor inputs stay on the autograd tape so attack code can take
        pixel gradients; ImageBatch inputs are converted first.
        """
        if isinstance(batch, ImageBatch):
            x = batch_to_tensor(batch)
        else:
            x = batch
        if not torch.is_floating_point(x):
            raise ValueError("input must be a floating-point tensor")
        if not torch.isfinite(x).all():
            raise ValueError("non-finite pixel values in model input")
        lo, hi = self.input_range
        if x.min() < lo - 1e-6 or x.max() > hi + 1e-6:
            raise ValueError(f"pixel values outside input range [{lo}, {hi}]")
        out = self(x)
        if not torch.isfinite(out).all():
            raise ValueError("backbone produced non-finite logits")
        return out

    def parameter_names(self) -> list:
        # Stable sorted order; checkpoints rely on this naming convention.
        return sorted(name for name, _ in self.named_parameters())


def class_probs(logits: torch.Tensor) -> torch.Tensor:
    """Softmax posterior over classes, stable under large logit magnitudes."""
    logits = torch.as_tensor(logits)
    return torch.softmax(logits, dim=-1)


def pick_class_logit(logits: torch.Tensor, c) -> torch.Tensor:
    """Select the class-c entry per logit vector; c may be an int or per-row labels."""
    logits = torch.as_tensor(logits)
    num_classes = logits.shape[-1]
    c_t = torch.as_tensor(c, dtype=torch.long)
    if c_t.numel() == 0 or c_t.min() < 0 or c_t.max() >= num_classes:
        raise IndexError(f"class index out of range [0, {num_classes})")
    if logits.ndim == 1:
        if c_t.ndim != 0:
            raise IndexError("per-row labels need batched logits")
        return logits[c_t]
    rows = logits.reshape(-1, num_classes)
    if c_t.ndim == 0:
        idx = c_t.expand(rows.shape[0])
    else:
        idx = c_t.reshape(-1)
        if idx.shape[0] != rows.shape[0]:
            raise IndexError(f"got {idx.shape[0]} labels for {rows.shape[0]} logit vectors")
    picked = rows.gather(1, idx.unsqueeze(1)).squeeze(1)
    return picked.reshape(logits.shape[:-1])


def real_prob(logits: torch.Tensor, c) -> torch.Tensor:
    """Sigmoid of the class-c logit: the probability the image is real."""
    return torch.sigmoid(pick_class_logit(logits, c))


def energy(logits: torch.Tensor) -> torch.Tensor:
    """Classifier-induced energy: -log sum_c exp(logit_c), log-sum-exp stabilized.

    Exposed for analysis; the discriminator path uses the class-c logit
    alone, not this pooled value.
    """
    logits = torch.as_tensor(logits)
    return -torch.logsumexp(logits, dim=-1)


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------


class ConstantBackbone(nn.Module):
    """Returns a fixed logit vector for every image; zero pixel gradient."""

    def __init__(self, values: Sequence[float]):
        super().__init__()
        self.register_buffer("values", torch.as_tensor(values, dtype=torch.float32))

    def forward(self, x):
        zero = x.flatten(1).sum(dim=1, keepdim=True) * 0.0
        return zero + self.values.to(x.dtype)


class LinearBackbone(nn.Module):
    """Single linear map on flattened pixels; weight settable for tests."""

    def __init__(self, in_features: int, num_classes: int, bias: bool = False):
        super().__init__()
        self.linear = nn.Linear(in_features, num_classes, bias=bias)

    def forward(self, x):
        return self.linear(x.flatten(1))


class TinyConvBackbone(nn.Module):
    """Two conv layers + pooled linear head; the desk-scale test backbone."""

    def __init__(self, in_channels: int = 1, num_classes: int = 2, width: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1, stride=2)
        self.act = nn.ReLU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        h = self.pool(h).flatten(1)
        return self.head(h)


@dataclass
class ModelConfig:
    arch: str = "tiny_conv"
    width: int = 16
    in_channels: int = 1
    input_dim: Optional[int] = None  # linear arch only

    def __post_init__(self):
        if self.arch not in ("tiny_conv", "linear"):
            raise ConfigurationError(f"unknown backbone arch {self.arch!r}")


def build_model(cfg: ModelConfig, num_classes: int) -> JointModel:
    if cfg.arch == "tiny_conv":
        backbone = TinyConvBackbone(cfg.in_channels, num_classes, cfg.width)
    else:
        if cfg.input_dim is None:
            raise ConfigurationError("linear backbone requires input_dim")
        backbone = LinearBackbone(cfg.input_dim, num_classes)
    return JointModel(backbone, num_classes)


def reinit_head(model: JointModel, scale: float, generator: Optional[torch.Generator] = None) -> None:
    """Re-draw the final linear head uniformly in [-scale, scale].

    Mirrors swapping a pre-trained backbone's classification head for a
    freshly initialized one; only backbones exposing ``.head`` qualify.
    """
    head = getattr(model.backbone, "head", None)
    if head is None or not isinstance(head, nn.Linear):
        raise ConfigurationError("backbone has no re-initializable linear head")
    with torch.no_grad():
        head.weight.uniform_(-scale, scale, generator=generator)
        if head.bias is not None:
            head.bias.uniform_(-scale, scale, generator=generator)
