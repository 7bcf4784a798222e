"""Rule-based removal of rain and wind-farm false positives, plus habitat lookup.

Rain uses the dual-polarization rho_hv channel (precipitation has rho_hv near
1, biology much lower); wind farms use a database of turbine locations already
projected into the pixel frame of each station.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Box, Detection, Product, RoostkitError, Scan, circle_to_box

RAIN_RHO_THRESHOLD = 0.95


@dataclass(frozen=True)
class Turbine:
    turbine_id: str
    station_id: str
    x: float
    y: float


@dataclass
class TurbineDb:
    """Turbine locations, pixel coordinates per station."""

    turbines: list[Turbine]

    def for_station(self, station_id: str) -> list[Turbine]:
        return [t for t in self.turbines if t.station_id == station_id]

    def __len__(self) -> int:
        return len(self.turbines)


@dataclass
class HabitatRaster:
    """Land-cover class codes aligned to a scan pixel grid, plus a legend."""

    codes: np.ndarray  # (height, width), small integer codes; NaN = nodata
    legend: dict[int, str] = field(default_factory=dict)


@dataclass(frozen=True)
class FilterPolicy:
    """Knobs for filter_tracks; defaults follow the standard rules."""

    rain_enabled: bool = True
    rain_rho_threshold: float = RAIN_RHO_THRESHOLD
    rain_pixel_majority: float = 0.5
    rain_member_fraction: float = 0.5
    missing_rho: str = "skip"  # "skip" or "error"
    windfarm_enabled: bool = True


def box_pixel_slice(box: Box, width: int, height: int):
    """Index ranges of pixels whose centers fall inside the box, clipped to
    the raster; returns None when no pixel center is covered."""
    x0 = max(0, math.ceil(box.xmin - 0.5))
    x1 = min(width - 1, math.floor(box.xmax - 0.5))
    y0 = max(0, math.ceil(box.ymin - 0.5))
    y1 = min(height - 1, math.floor(box.ymax - 0.5))
    if x1 < x0 or y1 < y0:
        return None
    return slice(y0, y1 + 1), slice(x0, x1 + 1)


def is_rain(det: Detection, scan: Scan, threshold: float = RAIN_RHO_THRESHOLD,
            majority: float = 0.5) -> bool:
    """True iff strictly more than `majority` of the non-missing pixels inside
    the detection's box have rho_hv above `threshold`."""
    rho = scan.channel(Product.RHO_HV).values
    sl = box_pixel_slice(circle_to_box(det.shape), scan.width, scan.height)
    if sl is None:
        return False
    patch = rho[sl]
    valid = ~np.isnan(patch)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return False
    n_rain = int((patch[valid] > threshold).sum())
    return n_rain > majority * n_valid


def is_windfarm(det: Detection, turbines: TurbineDb,
                station_id: str | None = None) -> bool:
    """True iff any turbine lies inside the detection's box (boundary inclusive).

    When station_id is given, only that station's turbines are considered;
    turbine coordinates are assumed pre-projected into the detection's pixel
    frame, so no raster clipping is needed.
    """
    box = circle_to_box(det.shape)
    pool = turbines.turbines if station_id is None else turbines.for_station(station_id)
    return any(box.xmin <= t.x <= box.xmax and box.ymin <= t.y <= box.ymax
               for t in pool)


def filter_tracks(tracks, scans, turbines: TurbineDb | None,
                  policy: FilterPolicy = FilterPolicy()):
    """Drop rain and wind-farm tracks; returns (kept tracks, removal log).

    A track is rain when strictly more than `rain_member_fraction` of its
    members individually satisfy is_rain; it is a wind farm when any member
    box contains a turbine.  Kept tracks are returned unmodified.
    """
    scan_by_id = {s.scan_id: s for s in scans}
    kept = []
    removal_log: list[tuple[str, str]] = []
    for track in tracks:
        reason = None
        if policy.rain_enabled:
            votes = 0
            counted = 0
            for member in track.members:
                scan = scan_by_id.get(member.scan_id)
                if scan is None or not scan.has_channel(Product.RHO_HV):
                    if policy.missing_rho == "error":
                        raise RoostkitError(
                            f"scan {member.scan_id} has no rho_hv channel")
                    counted += 1
                    continue
                counted += 1
                if is_rain(member.detection, scan, policy.rain_rho_threshold,
                           policy.rain_pixel_majority):
                    votes += 1
            if counted and votes > policy.rain_member_fraction * counted:
                reason = "rain"
        if reason is None and policy.windfarm_enabled and turbines is not None:
            for member in track.members:
                scan = scan_by_id.get(member.scan_id)
                station = scan.station_id if scan is not None else None
                if is_windfarm(member.detection, turbines, station):
                    reason = "wind_farm"
                    break
        if reason is None:
            kept.append(track)
        else:
            removal_log.append((track.track_id, reason))
    return kept, removal_log


def habitat_class(det: Detection, habitat: HabitatRaster, window_km: float = 10.0,
                  km_per_pixel: float = 0.25) -> int:
    """Modal land-cover code in a window_km square window centered on the
    detection center; ties break toward the smallest code."""
    half_px = 0.5 * window_km / km_per_pixel
    height, width = habitat.codes.shape
    box = Box(det.shape.cx - half_px, det.shape.cy - half_px,
              det.shape.cx + half_px, det.shape.cy + half_px)
    sl = box_pixel_slice(box, width, height)
    if sl is None:
        raise RoostkitError("habitat window lies entirely outside the raster")
    patch = habitat.codes[sl]
    values = patch[~np.isnan(patch)].astype(int)
    if values.size == 0:
        raise RoostkitError("habitat window contains no valid pixels")
    codes, counts = np.unique(values, return_counts=True)
    return int(codes[int(np.argmax(counts))])
