"""Fréchet-distance evaluation with self-contained numerics.

Two image sets are summarized as Gaussians over deep features and compared
with ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``. The matrix
square root goes through symmetric eigendecompositions only, which keeps the
whole computation real, deterministic, and easy to cross-check against the
per-dimension closed form for diagonal covariances.

The feature extractor is pluggable: a seeded random-weight convolutional
stack for desk-scale runs, or a pretrained classification backbone's pooled
features for full-scale scores.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .data import list_images, load_color, load_sketch
from .gan import load_generator

logger = logging.getLogger(__name__)

EIG_CLIP = 1e-10  # eigenvalues below this count as zero in the matrix root


class FidNumericsError(RuntimeError):
    """Eigendecomposition failed; message carries condition diagnostics."""


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError(f"inconsistent stats shapes: mean {mean.shape}, "
                             f"cov {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-8):
            raise ValueError("covariance is not symmetric within 1e-8")

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased (n-1) covariance, explicitly symmetrized."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"expected an n x d feature matrix, got shape {features.shape}")
    n = features.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit a Gaussian, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean=mean, cov=cov)


def _sqrt_psd(sym: np.ndarray, context: str) -> np.ndarray:
    try:
        vals, vecs = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:
        raise FidNumericsError(
            f"eigendecomposition failed for {context}: {exc}; "
            f"cond={np.linalg.cond(sym):.3e}") from exc
    vals = np.where(vals < EIG_CLIP, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Distance between two Gaussian summaries; clamped to be nonnegative."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    sqrt_a = _sqrt_psd(a.cov, "first covariance")
    product = sqrt_a @ b.cov @ sqrt_a
    product = 0.5 * (product + product.T)
    try:
        vals = np.linalg.eigvalsh(product)
    except np.linalg.LinAlgError as exc:
        raise FidNumericsError(
            f"eigendecomposition failed for the covariance product: {exc}; "
            f"cond(a)={np.linalg.cond(a.cov):.3e} "
            f"cond(b)={np.linalg.cond(b.cov):.3e}") from exc
    vals = np.where(vals < EIG_CLIP, 0.0, vals)
    trace_term = np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.sum(np.sqrt(vals))
    return max(0.0, float(diff @ diff + trace_term))


# --------------------------------------------------------------------------
# Feature extractors
# --------------------------------------------------------------------------

class SmallConvExtractor(nn.Module):
    """Seeded random-weight convolutional features for desk-scale FID.

    The weights come from a private generator, so results do not depend on
    global RNG state, and the same seed always yields the same extractor.
    """

    def __init__(self, feature_dim: int = 64, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.spec_id = f"smallconv:{feature_dim}:{seed}"
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, feature_dim, 3, stride=2, padding=1),
            nn.AdaptiveAvgPool2d(1),
        )
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                p.copy_(torch.randn(p.shape, generator=generator) * 0.1)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).flatten(start_dim=1)


class InceptionExtractor(nn.Module):
    """2048-d pooled features from a pretrained classification backbone.

    Full-scale evaluation only; needs torchvision with downloaded weights.
    """

    def __init__(self):
        super().__init__()
        try:
            from torchvision import models
        except ImportError as exc:
            raise RuntimeError("the pretrained extractor needs torchvision; "
                               "install the 'fullscale' extra") from exc
        weights = models.Inception_V3_Weights.IMAGENET1K_V1
        model = models.inception_v3(weights=weights)
        model.fc = nn.Identity()
        model.aux_logits = False
        model.AuxLogits = None
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.feature_dim = 2048
        self.spec_id = "inception-v3-pool"
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        self.register_buffer("input_mean", mean)
        self.register_buffer("input_std", std)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = (x + 1.0) / 2.0
        x = (x - self.input_mean) / self.input_std
        x = nn.functional.interpolate(x, size=(299, 299), mode="bilinear",
                                      align_corners=False)
        return self.model(x)


def make_extractor(spec: str = "small", seed: int = 0) -> nn.Module:
    """Resolve "small[:dim]" or "inception" into a feature extractor."""
    if spec == "small" or spec.startswith("small:"):
        dim = int(spec.split(":", 1)[1]) if ":" in spec else 64
        return SmallConvExtractor(feature_dim=dim, seed=seed)
    if spec == "inception":
        return InceptionExtractor()
    raise ValueError(f"unknown extractor spec {spec!r} (expected small[:dim] "
                     f"or inception)")


# --------------------------------------------------------------------------
# Directory-level FID
# --------------------------------------------------------------------------

def _extract_dir_features(directory: Path, extractor: nn.Module,
                          batch_size: int, image_size: int) -> np.ndarray:
    paths = list_images(directory)
    if not paths:
        raise ValueError(f"no images in {directory}")
    chunks: list[np.ndarray] = []
    batch: list[torch.Tensor] = []

    def flush():
        if batch:
            with torch.no_grad():
                feats = extractor(torch.stack(batch))
            chunks.append(feats.cpu().numpy())
            batch.clear()

    for path in paths:
        try:
            batch.append(load_color(path, image_size))
        except (OSError, ValueError) as exc:
            logger.warning("skipping undecodable image %s: %s", path, exc)
            continue
        if len(batch) == batch_size:
            flush()
    flush()
    if not chunks:
        raise ValueError(f"no decodable images in {directory}")
    return np.concatenate(chunks, axis=0)


def compute_fid(dir_a: str | Path, dir_b: str | Path, extractor: nn.Module,
                batch_size: int = 32, image_size: int = 256) -> float:
    feats_a = _extract_dir_features(Path(dir_a), extractor, batch_size, image_size)
    feats_b = _extract_dir_features(Path(dir_b), extractor, batch_size, image_size)
    return frechet_distance(fit_gaussian(feats_a), fit_gaussian(feats_b))


# --------------------------------------------------------------------------
# Qualitative sample grids
# --------------------------------------------------------------------------

def _to_uint8(img: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    arr = ((img.clamp(-1.0, 1.0) + 1.0) * 127.5).round().byte().numpy()
    arr = arr.transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def emit_sample_grid(checkpoint: str | Path, sketch_dir: str | Path,
                     out_path: str | Path, columns: int = 4,
                     image_size: int | None = None, limit: int | None = None) -> Path:
    """Render (input sketch, generated color) cells row-major into one PNG."""
    gen = load_generator(checkpoint)
    sketches = list_images(sketch_dir)
    if limit is not None:
        sketches = sketches[:limit]
    if not sketches:
        raise ValueError(f"no sketches in {sketch_dir}")
    if columns < 1:
        raise ValueError("columns must be >= 1")
    if image_size is None:
        image_size = int(torch.load(Path(checkpoint), weights_only=True)
                         ["arch"]["image_size"])

    cells: list[np.ndarray] = []
    with torch.no_grad():
        for path in sketches:
            sketch = load_sketch(path, image_size)
            fake = gen(sketch[None])[0]
            left = _to_uint8(sketch * 2.0 - 1.0)  # sketch is [0,1]; rescale for display
            cells.append(np.concatenate([left, _to_uint8(fake)], axis=1))

    rows = math.ceil(len(cells) / columns)
    cell_h, cell_w = cells[0].shape[:2]
    canvas = np.full((rows * cell_h, columns * cell_w, 3), 255, dtype=np.uint8)
    for i, cell in enumerate(cells):
        r, c = divmod(i, columns)
        canvas[r * cell_h:(r + 1) * cell_h, c * cell_w:(c + 1) * cell_w] = cell
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(out_path, format="PNG")
    return out_path
