"""Boundary-condition images: source sketches, Canny edge maps, the
coordinate reference planes, and the 9-channel condition tensor."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, GeometryError


@dataclass(frozen=True)
class SourceGeometrySpec:
    """Axis-aligned source rectangle in image coordinates (x = column, y = row)."""

    x: int
    y: int
    width: int
    height: int
    amplitude: float = 1.0
    wavelength: float = 20.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"source extents must be >= 1, got {self.width}x{self.height}")

    def check_inside(self, height: int, width: int, margin: int = 0) -> None:
        lo_x, lo_y = margin, margin
        hi_x, hi_y = width - margin, height - margin
        if self.x < lo_x or self.y < lo_y or self.x + self.width > hi_x or self.y + self.height > hi_y:
            raise GeometryError(
                f"rectangle ({self.x},{self.y},{self.width},{self.height}) "
                f"outside [{lo_x},{hi_x})x[{lo_y},{hi_y})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SourceGeometrySpec":
        return cls(**d)


@dataclass
class BoundarySample:
    sketch: np.ndarray  # (H, W) in {0, 1}
    edge: np.ndarray  # (H, W) in [0, 1]
    spatial_ref: np.ndarray  # (3, H, W)
    target: np.ndarray  # (3, H, W) in [0, 1]
    geometry: SourceGeometrySpec
    seed: int
    split: str = "train"

    def __post_init__(self):
        for name in ("sketch", "edge", "spatial_ref", "target"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float32))


def rasterize_sketch(spec: SourceGeometrySpec, height: int, width: int) -> np.ndarray:
    spec.check_inside(height, width)
    img = np.zeros((height, width), dtype=np.float32)
    img[spec.y : spec.y + spec.height, spec.x : spec.x + spec.width] = 1.0
    return img


# gradient direction bins (0..7, 45 degrees each) -> (drow, dcol) of the forward neighbour
_DIRECTION_OFFSETS = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)]


def canny_edges(image: np.ndarray, sigma: float = 1.0, lo: float = 0.1, hi: float = 0.3) -> np.ndarray:
    """Binary Canny edge map.

    Gaussian blur, Sobel gradients, non-maximum suppression along the
    quantized gradient direction, then hysteresis with ``lo``/``hi`` given as
    fractions of the maximum gradient magnitude. Ties in the suppression step
    keep the pixel on the bright side of the gradient, so a step edge yields
    a one-pixel-wide line.
    """
    if not lo < hi:
        raise ValueError("hysteresis thresholds need lo < hi")
    img = np.asarray(image, dtype=np.float64)
    blurred = ndimage.gaussian_filter(img, sigma, mode="nearest") if sigma > 0 else img
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12 * max(1.0, np.abs(img).max()):
        return np.zeros(img.shape, dtype=np.float32)

    angle = np.arctan2(gy, gx)
    bins = np.round(angle / (np.pi / 4)).astype(int) % 8
    padded = np.pad(mag, 1)
    h, w = mag.shape
    rows, cols = np.indices((h, w))
    keep = np.zeros((h, w), dtype=bool)
    for b, (dr, dc) in enumerate(_DIRECTION_OFFSETS):
        sel = bins == b
        if not sel.any():
            continue
        r, c = rows[sel], cols[sel]
        m = mag[sel]
        fwd = padded[r + 1 + dr, c + 1 + dc]
        bwd = padded[r + 1 - dr, c + 1 - dc]
        keep[sel] = (m >= bwd) & (m > fwd)
    # noise floor: treat magnitudes below a relative epsilon as zero
    keep &= mag > 1e-9 * peak

    strong = keep & (mag >= hi * peak)
    weak = keep & (mag >= lo * peak)
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros(img.shape, dtype=np.float32)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels].astype(np.float32)


def spatial_reference(height: int, width: int) -> np.ndarray:
    """Coordinate planes: x/(W-1), y/(H-1), and radial distance from the
    centre normalized to 1 at the corners."""
    if height < 2 or width < 2:
        raise DimensionError("spatial reference needs H, W >= 2")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    r = np.hypot(xs - cx, ys - cy) / np.hypot(cx, cy)
    return np.stack([xs / (width - 1), ys / (height - 1), r]).astype(np.float32)


def assemble_condition_tensor(sample: BoundarySample) -> np.ndarray:
    """Channels: sketch x3, edge x3, spatial reference (3)."""
    return condition_tensor(sample.sketch, sample.edge, sample.spatial_ref)


def condition_tensor(sketch: np.ndarray, edge: np.ndarray, spatial_ref: np.ndarray) -> np.ndarray:
    h, w = sketch.shape
    if edge.shape != (h, w) or spatial_ref.shape != (3, h, w):
        raise DimensionError(
            f"component extents differ: sketch {sketch.shape}, edge {edge.shape}, ref {spatial_ref.shape}"
        )
    return np.concatenate(
        [np.broadcast_to(sketch, (3, h, w)), np.broadcast_to(edge, (3, h, w)), spatial_ref]
    ).astype(np.float32)


def boundary_inputs(spec: SourceGeometrySpec, height: int, width: int, canny: tuple = (1.0, 0.1, 0.3)):
    """Sketch, edge map and spatial reference for one source rectangle."""
    sketch = rasterize_sketch(spec, height, width)
    edge = canny_edges(sketch, *canny)
    return sketch, edge, spatial_reference(height, width)
