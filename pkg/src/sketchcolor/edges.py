"""Sketch synthesis from color images.

The built-in operator is a thresholded extended difference-of-Gaussians in its
line-drawing regime; a learned edge detector can be plugged in as an external
TorchScript module when pretrained weights are available. Sketches follow the
white-paper convention: 1.0 is blank paper, 0.0 a full stroke.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}

# Rec. 601 luminance weights, fixed for reproducibility.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class SketchParamError(ValueError):
    """Invalid operator parameters."""


@dataclass(frozen=True)
class XdogParams:
    """Extended difference-of-Gaussians parameters (line-drawing regime)."""

    sigma: float = 0.8    # scale of the narrow Gaussian, in pixels
    k: float = 1.6        # wide scale = k * sigma
    gamma: float = 0.98   # mixing weight of the wide blur
    epsilon: float = -0.1 # threshold on the blurred difference
    phi: float = 200.0    # sharpness of the soft threshold

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise SketchParamError(f"sigma must be > 0, got {self.sigma}")
        if self.k <= 1:
            raise SketchParamError(f"k must be > 1, got {self.k}")
        if self.phi <= 0:
            raise SketchParamError(f"phi must be > 0, got {self.phi}")


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Unit-mass 1-D Gaussian sampled at integer offsets, radius truncate*sigma."""
    if sigma <= 0:
        raise SketchParamError(f"sigma must be > 0, got {sigma}")
    radius = max(1, int(truncate * sigma + 0.5))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian convolution with reflective (edge-repeating) padding."""
    if img.ndim != 2:
        raise SketchParamError(f"expected a single-channel image, got shape {img.shape}")
    kernel = gaussian_kernel1d(sigma)
    out = np.asarray(img, dtype=np.float64)
    # scipy's "reflect" repeats the edge sample, i.e. np.pad mode="symmetric".
    out = ndimage.correlate1d(out, kernel, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="reflect")
    return out


def xdog(gray: np.ndarray, p: XdogParams = XdogParams()) -> np.ndarray:
    """Render a grayscale image in [0, 1] as a line drawing in [0, 1]."""
    gray = np.asarray(gray, dtype=np.float64)
    d = gaussian_blur(gray, p.sigma) - p.gamma * gaussian_blur(gray, p.k * p.sigma)
    out = np.where(d >= p.epsilon, 1.0, 1.0 + np.tanh(p.phi * (d - p.epsilon)))
    return np.clip(out, 0.0, 1.0)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Luminance of an (H, W, 3) array; output range matches the input range."""
    r, g, b = LUMA_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


class TorchScriptSketcher:
    """External learned edge detector behind a TorchScript file.

    The module must map a (1, 1, H, W) grayscale tensor in [0, 1] to an edge
    probability map of the same shape (1.0 = edge). The result is inverted to
    the white-paper sketch convention.
    """

    def __init__(self, weights_path: str | Path):
        import torch

        path = Path(weights_path)
        if not path.is_file():
            raise FileNotFoundError(f"edge-detector weights not found: {path}")
        self.module = torch.jit.load(str(path), map_location="cpu")
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    def __call__(self, gray: np.ndarray) -> np.ndarray:
        import torch

        x = torch.from_numpy(np.ascontiguousarray(gray, dtype=np.float32))[None, None]
        with torch.no_grad():
            edges = self.module(x)
        edges = edges.squeeze().numpy().astype(np.float64)
        return np.clip(1.0 - edges, 0.0, 1.0)


@dataclass(frozen=True)
class ExtractReport:
    written: int
    skipped: int


def sketch_from_color(path: str | Path, backend, image_size: int | None = None) -> np.ndarray:
    """Decode one color image and run the sketch backend on its luminance."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if image_size is not None:
            im = im.resize((image_size, image_size), Image.Resampling.BILINEAR)
        rgb = np.asarray(im, dtype=np.float64) / 255.0
    return backend(rgb_to_gray(rgb))


def extract_sketch_dir(
    src_dir: str | Path,
    dst_dir: str | Path,
    backend: str = "xdog",
    params: XdogParams | None = None,
    hed_weights: str | Path | None = None,
    image_size: int | None = None,
) -> ExtractReport:
    """Write one 8-bit single-channel PNG sketch per decodable image in src_dir.

    Output files keep the source stem. Undecodable files are skipped with a
    logged warning; an empty source directory is an error.
    """
    src = Path(src_dir)
    if not src.is_dir():
        raise FileNotFoundError(f"source directory not found: {src}")
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not files:
        raise ValueError(f"no images found in {src}")

    if backend == "xdog":
        operator = lambda gray: xdog(gray, params or XdogParams())
    elif backend in ("hed-external", "hed"):
        if hed_weights is None:
            raise SketchParamError("backend 'hed-external' needs a weights path")
        operator = TorchScriptSketcher(hed_weights)
    else:
        raise SketchParamError(f"unknown sketch backend: {backend!r}")

    dst = Path(dst_dir)
    dst.mkdir(parents=True, exist_ok=True)
    written = 0
    skipped = 0
    for path in files:
        try:
            sketch = sketch_from_color(path, operator, image_size=image_size)
        except (UnidentifiedImageError, OSError) as exc:
            logger.warning("skipping undecodable image %s: %s", path.name, exc)
            skipped += 1
            continue
        data = np.round(sketch * 255.0).astype(np.uint8)
        Image.fromarray(data, mode="L").save(dst / f"{path.stem}.png")
        written += 1
    return ExtractReport(written=written, skipped=skipped)
