"""Shared domain types: rasters, circle labels, scored boxes, and box geometry."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

REFERENCE_IMAGE_SIZE = 1200
DIFFICULT_BOX_SIDE = 30.0


class RoostkitError(Exception):
    """Base class for errors raised by this package."""


class FormatError(RoostkitError):
    """Malformed or missing on-disk artifact."""


class Product(str, enum.Enum):
    REFLECTIVITY = "reflectivity"
    RADIAL_VELOCITY = "radial_velocity"
    RHO_HV = "rho_hv"


class Provenance(str, enum.Enum):
    DETECTOR = "detector"
    RESCORED = "rescored"


@dataclass(frozen=True, eq=False)
class Channel:
    """One radar product raster at a fixed elevation.

    `values` is a (height, width) float32 array; missing gates are NaN and
    are excluded from all pixel statistics.
    """

    product: Product
    elevation_deg: float
    values: np.ndarray

    @property
    def name(self) -> str:
        return f"{self.product.value}_{self.elevation_deg:g}"


@dataclass(frozen=True, eq=False)
class Scan:
    """A multi-channel raster frame with station/time metadata.

    The default rendering convention is a 1200x1200 image covering +/-150 km
    around the radar (0.25 km per pixel); smaller rasters keep the same
    km_per_pixel semantics.  `minutes_from_sunrise` is negative before
    sunrise.  Channel arrays are marked read-only so scans can be shared
    freely between workers.
    """

    scan_id: str
    station_id: str
    timestamp: float
    minutes_from_sunrise: float
    width: int
    height: int
    km_per_pixel: float
    channels: tuple[Channel, ...]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("scan dimensions must be positive")
        if self.km_per_pixel <= 0:
            raise ValueError("km_per_pixel must be positive")
        names = [ch.name for ch in self.channels]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate channel names in scan {self.scan_id}")
        for ch in self.channels:
            if ch.values.shape != (self.height, self.width):
                raise ValueError(
                    f"channel {ch.name} shape {ch.values.shape} does not match "
                    f"scan {self.scan_id} ({self.height}, {self.width})"
                )
            ch.values.flags.writeable = False

    def channel(self, product: Product, elevation_deg: float | None = None) -> Channel:
        """Return the channel for `product`, lowest elevation first.

        Raises RoostkitError naming the product when absent.
        """
        matches = [ch for ch in self.channels if ch.product == product]
        if elevation_deg is not None:
            matches = [ch for ch in matches if ch.elevation_deg == elevation_deg]
        if not matches:
            raise RoostkitError(f"scan {self.scan_id} has no {product.value} channel")
        return min(matches, key=lambda ch: ch.elevation_deg)

    def has_channel(self, product: Product) -> bool:
        return any(ch.product == product for ch in self.channels)


@dataclass(frozen=True)
class Circle:
    """Circle label in pixel coordinates; the canonical annotation shape."""

    cx: float
    cy: float
    r: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("circle radius must be positive")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise ValueError("box must have positive extent")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class Annotation:
    """A user-attributed circle label on one scan."""

    annotation_id: str
    scan_id: str
    user_id: str
    shape: Circle

    def __post_init__(self):
        if not self.user_id:
            raise ValueError("annotation user_id must be non-empty")


@dataclass(frozen=True)
class Detection:
    """A machine-produced circle with a score in [0, 1]; higher is more roost-like."""

    detection_id: str
    scan_id: str
    shape: Circle
    score: float
    provenance: Provenance = Provenance.DETECTOR


def circle_to_box(c: Circle) -> Box:
    """Circumscribing square of side 2r centered on the circle."""
    return Box(c.cx - c.r, c.cy - c.r, c.cx + c.r, c.cy + c.r)


def box_to_circle(b: Box) -> Circle:
    """Inverse of circle_to_box: center of the box, radius = half the mean side."""
    r = 0.25 * ((b.xmax - b.xmin) + (b.ymax - b.ymin))
    return Circle(0.5 * (b.xmin + b.xmax), 0.5 * (b.ymin + b.ymax), r)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    ix = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    iy = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4)
    return np.array([[b.xmin, b.ymin, b.xmax, b.ymax] for b in boxes]).reshape(-1, 4)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU for two sequences of boxes (Box objects or (n, 4) arrays
    of xmin, ymin, xmax, ymax); shape (len(a), len(b))."""
    a = _box_array(boxes_a)
    b = _box_array(boxes_b)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def is_difficult(a: Annotation, scan: Scan) -> bool:
    """True for circles whose derived box side falls strictly under 30 px at
    the 1200x1200 reference resolution."""
    side = 2.0 * a.shape.r * (REFERENCE_IMAGE_SIZE / scan.width)
    return side < DIFFICULT_BOX_SIDE
