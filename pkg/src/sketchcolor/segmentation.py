"""Frozen segmentation backends and operations on their probability maps.

A backend maps a batch of color images in [-1, 1] to per-pixel class
probabilities (N, C, H', W'). Backends are consumed as frozen artifacts: their
parameters are never updated here, but gradients do flow through them to the
generator. Discriminators consume the soft probability maps; hard label maps
exist only for visualization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class BackendLoadError(RuntimeError):
    """Backend weights missing or unusable; raised at startup, not mid-training."""


class BackendInferenceError(RuntimeError):
    """Backend blew up on a batch mid-training; carries shape context."""


class PartitionError(ValueError):
    """Foreground/background partition does not cover the class set."""


@dataclass(frozen=True)
class FgBgPartition:
    """Disjoint split of all class indices into foreground and background."""

    fg_classes: frozenset[int]
    num_classes: int

    def __post_init__(self) -> None:
        bad = [c for c in self.fg_classes if not 0 <= c < self.num_classes]
        if bad:
            raise PartitionError(f"foreground indices out of range: {sorted(bad)}")

    @property
    def bg_classes(self) -> frozenset[int]:
        return frozenset(range(self.num_classes)) - self.fg_classes

    @classmethod
    def things_stuff(cls, num_classes: int = 135, num_things: int = 80) -> "FgBgPartition":
        """Countable "thing" categories (the leading block of the taxonomy) as
        foreground, amorphous "stuff" categories as background."""
        if not 0 < num_things <= num_classes:
            raise PartitionError(f"num_things must be in 1..{num_classes}, got {num_things}")
        return cls(fg_classes=frozenset(range(num_things)), num_classes=num_classes)

    @classmethod
    def from_file(cls, path: str | Path, num_classes: int) -> "FgBgPartition":
        """Parse one ``<class_index> FG|BG`` entry per line; must cover every class."""
        seen: dict[int, str] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1].upper() not in ("FG", "BG"):
                raise PartitionError(f"{path}:{lineno}: expected '<index> FG|BG', got {raw!r}")
            idx = int(parts[0])
            if idx in seen:
                raise PartitionError(f"{path}:{lineno}: class {idx} listed twice")
            seen[idx] = parts[1].upper()
        missing = set(range(num_classes)) - set(seen)
        if missing:
            raise PartitionError(f"{path}: partition misses classes {sorted(missing)[:10]}...")
        extra = set(seen) - set(range(num_classes))
        if extra:
            raise PartitionError(f"{path}: indices beyond num_classes={num_classes}: {sorted(extra)[:10]}")
        fg = frozenset(idx for idx, tag in seen.items() if tag == "FG")
        return cls(fg_classes=fg, num_classes=num_classes)

    @classmethod
    def from_spec(cls, spec: str, num_classes: int) -> "FgBgPartition":
        """Resolve "things:<n>" or a partition file path."""
        if spec.startswith("things:"):
            return cls.things_stuff(num_classes, num_things=int(spec.split(":", 1)[1]))
        return cls.from_file(spec, num_classes)


def collapse_binary(probs: torch.Tensor, partition: FgBgPartition) -> torch.Tensor:
    """Sum class probabilities into a 2-channel (FG, BG) map.

    A fixed linear map, so it is differentiable and preserves the per-pixel
    simplex: FG + BG stays 1 wherever the input channels sum to 1.
    """
    if probs.shape[1] != partition.num_classes:
        raise PartitionError(
            f"partition covers {partition.num_classes} classes but map has {probs.shape[1]} channels"
        )
    fg_idx = torch.tensor(sorted(partition.fg_classes), dtype=torch.long, device=probs.device)
    bg_idx = torch.tensor(sorted(partition.bg_classes), dtype=torch.long, device=probs.device)
    fg = probs.index_select(1, fg_idx).sum(dim=1, keepdim=True)
    bg = probs.index_select(1, bg_idx).sum(dim=1, keepdim=True)
    return torch.cat([fg, bg], dim=1)


def hard_labels(probs: torch.Tensor) -> np.ndarray:
    """Per-pixel argmax label map; ties break toward the lowest class index."""
    array = probs.detach().cpu().numpy()
    return np.argmax(array, axis=-3)  # numpy argmax picks the first maximum


def resize_map(probs: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize to size x size; convex weights keep channel sums intact."""
    if probs.shape[-1] == size and probs.shape[-2] == size:
        return probs
    return F.interpolate(probs, size=(size, size), mode="bilinear", align_corners=False)


def check_simplex(probs: torch.Tensor, tol: float = 1e-5) -> None:
    if probs.min().item() < -tol:
        raise ValueError(f"negative probability {probs.min().item()} in segmentation map")
    sums = probs.sum(dim=1)
    err = (sums - 1.0).abs().max().item()
    if err > tol:
        raise ValueError(f"per-pixel probabilities sum to 1 +/- {err}, tolerance {tol}")


class ColorQuantizationBackend(nn.Module):
    """Deterministic differentiable stand-in for a real segmentation network.

    Each class owns an anchor color in [-1, 1]^3; a pixel's class logits are
    the (scaled) negative squared distances to the anchors. Because the
    squared pixel norm is shared across classes it cancels in the softmax, so
    the whole stack is a fixed 1x1 convolution followed by softmax: frozen,
    differentiable, and fast. ``stride`` average-pools the input first to
    mimic a backend with a coarser output grid.
    """

    def __init__(self, num_classes: int = 135, sharpness: float = 25.0,
                 stride: int = 1, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        anchors = torch.rand((num_classes, 3), generator=generator) * 2.0 - 1.0
        self.num_classes = num_classes
        self.sharpness = sharpness
        self.stride = stride
        self.register_buffer("anchors", anchors)
        # -s*||p - a||^2 = -s*|p|^2 + 2s*a.p - s*|a|^2; the first term is
        # class-independent, so logits reduce to a linear map of the pixel.
        self.classify = nn.Conv2d(3, num_classes, kernel_size=1)
        with torch.no_grad():
            self.classify.weight.copy_((2.0 * sharpness * anchors)[:, :, None, None])
            self.classify.bias.copy_(-sharpness * (anchors ** 2).sum(dim=1))
        for p in self.parameters():
            p.requires_grad_(False)

    def class_of(self, color) -> int:
        """Nearest-anchor lookup for a flat color; ties go to the lowest index."""
        color = torch.as_tensor(color, dtype=self.anchors.dtype)
        d2 = ((self.anchors - color[None, :]) ** 2).sum(dim=1)
        return int(np.argmin(d2.numpy()))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if self.stride > 1:
            images = F.avg_pool2d(images, self.stride)
        return torch.softmax(self.classify(images), dim=1)


class TorchScriptBackend(nn.Module):
    """A real segmentation network loaded from a TorchScript file.

    The wrapped module takes normalized (N, 3, H, W) input and returns
    (N, C, H', W') scores; ``apply_softmax`` turns logits into probabilities.
    Input in [-1, 1] is remapped to [0, 1] and standardized with the given
    per-channel statistics before the call.
    """

    def __init__(self, path: str | Path, num_classes: int,
                 apply_softmax: bool = True,
                 input_mean: tuple[float, float, float] = (0.5, 0.5, 0.5),
                 input_std: tuple[float, float, float] = (0.5, 0.5, 0.5)):
        super().__init__()
        path = Path(path)
        if not path.is_file():
            raise BackendLoadError(f"segmentation weights not found: {path}")
        try:
            self.module = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise BackendLoadError(f"cannot load segmentation backend {path}: {exc}") from exc
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.num_classes = num_classes
        self.apply_softmax = apply_softmax
        self.register_buffer("input_mean", torch.tensor(input_mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(input_std).view(1, 3, 1, 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = (images + 1.0) / 2.0
        x = (x - self.input_mean) / self.input_std
        out = self.module(x)
        if out.shape[1] != self.num_classes:
            raise BackendLoadError(
                f"backend emits {out.shape[1]} channels, configured for {self.num_classes}"
            )
        return torch.softmax(out, dim=1) if self.apply_softmax else out


def load_backend(spec: str, num_classes: int, seed: int = 0) -> nn.Module:
    """Resolve a backend spec: "mock[:stride]" or a TorchScript file path."""
    if spec == "mock" or spec.startswith("mock:"):
        stride = int(spec.split(":", 1)[1]) if ":" in spec else 1
        return ColorQuantizationBackend(num_classes=num_classes, stride=stride, seed=seed)
    return TorchScriptBackend(spec, num_classes=num_classes)


def segment(images: torch.Tensor, backend: nn.Module, out_size: int | None = None) -> torch.Tensor:
    """Run the frozen backend; optionally resize the map for discrimination."""
    probs = backend(images)
    if out_size is not None:
        probs = resize_map(probs, out_size)
    return probs
