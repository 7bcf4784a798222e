"""Synthetic radar-scene and annotator simulator with known planted ground truth.

Generates sequences of multi-channel scans containing expanding reflectivity
rings with diverging velocity dipoles (roosts), drifting rain blobs with high
rho_hv, persistent turbine clusters, and optional single-frame transients.
Each sequence is labeled by one annotator whose radius style is a known
scale/noise corruption of the truth, so recovery can be scored exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Annotation, Channel, Circle, Product, Scan
from .postfilter import Turbine, TurbineDb

RHO_BACKGROUND = 0.62
RHO_ROOST = 0.55
RHO_ROOST_MAX = 0.79
RHO_RAIN_MIN = 0.955
RAIN_MASK_LEVEL = 0.35  # blob weight above which pixels get rain rho_hv


@dataclass(frozen=True)
class AnnotatorSpec:
    """One simulated annotator: radius style plus labeling coverage.

    The forward corruption is r_hat = beta_true * r + additive_offset + noise,
    with noise ~ N(0, sigma_true^2).  additive_offset is 0 in the default
    scale-style mode and nonzero only in the model-mismatch mode.
    """

    user_id: str
    beta_true: float
    sigma_true: float
    coverage: float = 1.0
    additive_offset: float = 0.0

    def __post_init__(self):
        if not 0.1 <= self.beta_true <= 2.0:
            raise ValueError("beta_true must lie in [0.1, 2]")
        if self.sigma_true < 0:
            raise ValueError("sigma_true must be non-negative")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError("coverage must lie in (0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    """Scene model parameters; all sizes in pixels, all rates per the fields' units."""

    seed: int
    width: int = 200
    height: int = 200
    km_per_pixel: float = 0.25
    scan_interval_min: float = 5.0
    first_frame_min: float = -25.0  # minutes from sunrise of frame 0

    # roost spawn model
    roost_count: int = 2
    spawn_before_s: float = 1000.0
    spawn_jitter_s: float = 120.0
    dispersal_mps: float = 6.61
    r0_px: float = 6.0
    r_max_px: float = 40.0
    ring_amplitude: float = 12.0
    ring_width_px: float = 2.0
    center_drift_px: float = 0.6  # per frame

    # rain model
    rain_count: int = 0
    rain_sigma_px: float = 10.0
    rain_amplitude: float = 10.0
    rain_drift_px: float = 2.0

    # wind farm model
    windfarm_count: int = 0
    turbines_per_farm: int = 5
    turbine_amplitude: float = 18.0
    farm_spread_px: float = 6.0

    # single-frame ring-like distractors
    transient_count: int = 0

    noise_std: float = 1.0
    background_level: float = 2.0
    vel_noise_std: float = 1.0
    radar_origin: tuple[float, float] | None = None  # default: image center
    range_mask: bool = True

    def __post_init__(self):
        positive = {
            "width": self.width, "height": self.height,
            "km_per_pixel": self.km_per_pixel,
            "scan_interval_min": self.scan_interval_min,
            "dispersal_mps": self.dispersal_mps, "r0_px": self.r0_px,
            "r_max_px": self.r_max_px, "ring_amplitude": self.ring_amplitude,
            "ring_width_px": self.ring_width_px,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def growth_px_per_s(self) -> float:
        """Radius growth rate implied by the dispersal speed and pixel scale."""
        return self.dispersal_mps / (self.km_per_pixel * 1000.0)

    @property
    def origin(self) -> tuple[float, float]:
        if self.radar_origin is not None:
            return self.radar_origin
        return (self.width / 2.0, self.height / 2.0)


@dataclass
class SynthCorpus:
    """Generated corpus plus the hidden answers used only by tests.

    The pipeline under test consumes scans, annotations and turbine_db;
    true_labels and the manifest are evaluation-side oracles.
    """

    scans: list[Scan]
    true_labels: list[list[Circle]]
    annotations: list[Annotation]
    turbine_db: TurbineDb
    annotators: list[AnnotatorSpec]
    spec: SceneSpec
    n_sequences: int
    frames_per_sequence: int
    user_of_scan: dict[str, str]
    rain_regions: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)
    windfarm_regions: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)
    transient_regions: dict[str, list[tuple[float, float, float]]] = field(default_factory=dict)
    n_roost_objects: int = 0

    def labels_by_scan(self) -> dict[str, list[Circle]]:
        return {s.scan_id: labels for s, labels in zip(self.scans, self.true_labels)}


def _place_objects(rng, spec: SceneSpec, count: int, margin: float,
                   min_separation: float, avoid=(), avoid_origin: float = 25.0):
    """Rejection-sample object centers keeping separation from each other and
    from already-placed scene objects (avoid: list of centers)."""
    ox, oy = spec.origin
    centers = []
    tries = 0
    while len(centers) < count and tries < 500:
        tries += 1
        x = rng.uniform(margin, spec.width - margin)
        y = rng.uniform(margin, spec.height - margin)
        if math.hypot(x - ox, y - oy) < avoid_origin:
            continue
        if any(math.hypot(x - cx, y - cy) < min_separation
               for cx, cy in list(centers) + list(avoid)):
            continue
        centers.append((x, y))
    return centers


def _render_ring(refl, X, Y, cx, cy, r, amplitude, width):
    d = np.hypot(X - cx, Y - cy)
    refl += amplitude * np.exp(-0.5 * ((d - r) / width) ** 2)


def _render_dipole(vel, X, Y, cx, cy, r, speed, origin, edge_px=1.5):
    """Signed radial-velocity pattern of birds dispersing from (cx, cy).

    Positive on the half-disk facing away from the radar origin, negative on
    the near half, with a soft disk edge.
    """
    alpha = math.atan2(cy - origin[1], cx - origin[0])
    d = np.hypot(X - cx, Y - cy)
    theta = np.arctan2(Y - cy, X - cx)
    envelope = 1.0 / (1.0 + np.exp(-(r + edge_px - d) / edge_px))
    vel += speed * np.cos(theta - alpha) * envelope


class _Roost:
    def __init__(self, cx, cy, spawn_s, drift):
        self.cx = cx
        self.cy = cy
        self.spawn_s = spawn_s
        self.drift = drift

    def at(self, t_s: float, spec: SceneSpec, frame: int) -> Circle | None:
        if t_s < self.spawn_s:
            return None
        r = spec.r0_px + spec.growth_px_per_s * (t_s - self.spawn_s)
        if r > spec.r_max_px:
            return None
        cx = self.cx + self.drift[0] * frame
        cy = self.cy + self.drift[1] * frame
        return Circle(cx, cy, r)


def generate_corpus(spec: SceneSpec, annotators: list[AnnotatorSpec],
                    n_sequences: int, frames_per_sequence: int) -> SynthCorpus:
    """Generate a deterministic corpus of station-day sequences.

    Each sequence is one synthetic station; frames are scan_interval_min
    apart starting at first_frame_min relative to sunrise.  Returns scans,
    exact true labels per scan, style-corrupted annotations (one annotator
    per sequence, round robin), and the turbine database.
    """
    if not annotators:
        raise ValueError("at least one annotator is required")
    root = np.random.SeedSequence(spec.seed)
    seq_seeds = root.spawn(n_sequences)

    W, H = spec.width, spec.height
    X, Y = np.meshgrid(np.arange(W, dtype=np.float64) + 0.5,
                       np.arange(H, dtype=np.float64) + 0.5)
    ox, oy = spec.origin
    range_mask = None
    if spec.range_mask:
        range_mask = np.hypot(X - ox, Y - oy) > min(W, H) / 2.0

    scans: list[Scan] = []
    true_labels: list[list[Circle]] = []
    annotations: list[Annotation] = []
    turbines: list[Turbine] = []
    user_of_scan: dict[str, str] = {}
    rain_regions: dict[str, list] = {}
    windfarm_regions: dict[str, list] = {}
    transient_regions: dict[str, list] = {}
    n_roost_objects = 0
    base_epoch = 1_380_000_000.0  # fixed synthetic epoch, one day per sequence

    for seq in range(n_sequences):
        render_rng, label_rng = [np.random.default_rng(s) for s in seq_seeds[seq].spawn(2)]
        station = f"S{seq:03d}"
        annotator = annotators[seq % len(annotators)]

        margin = min(30.0, W / 6.0)
        roost_centers = _place_objects(render_rng, spec, spec.roost_count,
                                       margin=margin,
                                       min_separation=1.3 * spec.r_max_px + 20)
        roosts = []
        for cx, cy in roost_centers:
            spawn_s = -spec.spawn_before_s + render_rng.uniform(-spec.spawn_jitter_s,
                                                                spec.spawn_jitter_s)
            phi = render_rng.uniform(0, 2 * math.pi)
            drift = (spec.center_drift_px * math.cos(phi), spec.center_drift_px * math.sin(phi))
            roosts.append(_Roost(cx, cy, spawn_s, drift))
        n_roost_objects += len(roosts)

        # keep distractors clear of roosts so planted categories stay unambiguous
        clearance = spec.r_max_px + 2 * spec.rain_sigma_px + 8
        rain_blobs = [(x, y, render_rng.uniform(0, 2 * math.pi))
                      for x, y in _place_objects(render_rng, spec, spec.rain_count,
                                                 margin=25.0, min_separation=clearance,
                                                 avoid=roost_centers)]
        occupied = roost_centers + [(x, y) for x, y, _ in rain_blobs]
        farms = []
        for fx, fy in _place_objects(render_rng, spec, spec.windfarm_count,
                                     margin=25.0, min_separation=clearance,
                                     avoid=occupied):
            points = []
            for t in range(spec.turbines_per_farm):
                tx = fx + render_rng.uniform(-spec.farm_spread_px, spec.farm_spread_px)
                ty = fy + render_rng.uniform(-spec.farm_spread_px, spec.farm_spread_px)
                tid = f"{station}_wt{len(turbines) + len(points):03d}"
                points.append(Turbine(tid, station, tx, ty))
            turbines.extend(points)
            farms.append((fx, fy, points))

        transient_frames = render_rng.integers(0, frames_per_sequence, size=spec.transient_count)
        occupied += [(f[0], f[1]) for f in farms]
        transient_centers = _place_objects(render_rng, spec, spec.transient_count,
                                           margin=margin, min_separation=clearance,
                                           avoid=occupied)

        for k in range(frames_per_sequence):
            minutes = spec.first_frame_min + k * spec.scan_interval_min
            t_s = minutes * 60.0
            scan_id = f"{station}_f{k:02d}"

            refl05 = np.maximum(
                0.0, render_rng.normal(spec.background_level, spec.noise_std, (H, W)))
            refl15 = np.maximum(
                0.0, render_rng.normal(spec.background_level, spec.noise_std, (H, W)))
            vel = render_rng.normal(0.0, spec.vel_noise_std, (H, W))
            rho = np.clip(render_rng.normal(RHO_BACKGROUND, 0.04, (H, W)), 0.0, 0.93)

            labels = []
            for roost in roosts:
                circle = roost.at(t_s, spec, k)
                if circle is None:
                    continue
                labels.append(circle)
                _render_ring(refl05, X, Y, circle.cx, circle.cy, circle.r,
                             spec.ring_amplitude, spec.ring_width_px)
                _render_ring(refl15, X, Y, circle.cx, circle.cy, circle.r,
                             0.6 * spec.ring_amplitude, spec.ring_width_px)
                _render_dipole(vel, X, Y, circle.cx, circle.cy, circle.r,
                               spec.dispersal_mps, (ox, oy))
                d = np.hypot(X - circle.cx, Y - circle.cy)
                roost_mask = d <= circle.r + spec.ring_width_px
                rho[roost_mask] = np.clip(
                    RHO_ROOST + render_rng.normal(0.0, 0.05, int(roost_mask.sum())),
                    0.0, RHO_ROOST_MAX)

            frame_rain = []
            for bx, by, heading in rain_blobs:
                cx = bx + spec.rain_drift_px * k * math.cos(heading)
                cy = by + spec.rain_drift_px * k * math.sin(heading)
                d = np.hypot(X - cx, Y - cy)
                weight = np.exp(-0.5 * (d / spec.rain_sigma_px) ** 2)
                refl05 += spec.rain_amplitude * weight
                refl15 += 0.8 * spec.rain_amplitude * weight
                rain_mask = weight > RAIN_MASK_LEVEL
                rho[rain_mask] = np.clip(
                    0.98 + render_rng.normal(0.0, 0.008, int(rain_mask.sum())),
                    RHO_RAIN_MIN, 1.0)
                frame_rain.append((cx, cy, spec.rain_sigma_px))
            if frame_rain:
                rain_regions[scan_id] = frame_rain

            frame_farms = []
            for fx, fy, points in farms:
                for p in points:
                    d = np.hypot(X - p.x, Y - p.y)
                    refl05 += spec.turbine_amplitude * np.exp(-0.5 * (d / 1.5) ** 2)
                    refl15 += 0.5 * spec.turbine_amplitude * np.exp(-0.5 * (d / 1.5) ** 2)
                    blade = render_rng.normal(0.0, 8.0)
                    vel += blade * np.exp(-0.5 * (d / 1.5) ** 2)
                    rho[d <= 3.0] = 0.70
                frame_farms.append((fx, fy, spec.farm_spread_px + 3.0))
            if frame_farms:
                windfarm_regions[scan_id] = frame_farms

            frame_transients = []
            for idx, (tx, ty) in enumerate(transient_centers):
                if transient_frames[idx] != k:
                    continue
                tr = render_rng.uniform(spec.r0_px + 2, 0.6 * spec.r_max_px)
                _render_ring(refl05, X, Y, tx, ty, tr, 0.9 * spec.ring_amplitude,
                             spec.ring_width_px)
                _render_dipole(vel, X, Y, tx, ty, tr, spec.dispersal_mps, (ox, oy))
                frame_transients.append((tx, ty, tr))
            if frame_transients:
                transient_regions[scan_id] = frame_transients

            if range_mask is not None:
                for arr in (refl05, refl15, vel, rho):
                    arr[range_mask] = np.nan

            scan = Scan(
                scan_id=scan_id,
                station_id=station,
                timestamp=base_epoch + seq * 86_400.0 + k * spec.scan_interval_min * 60.0,
                minutes_from_sunrise=minutes,
                width=W, height=H,
                km_per_pixel=spec.km_per_pixel,
                channels=(
                    Channel(Product.REFLECTIVITY, 0.5, refl05.astype(np.float32)),
                    Channel(Product.RADIAL_VELOCITY, 0.5, vel.astype(np.float32)),
                    Channel(Product.REFLECTIVITY, 1.5, refl15.astype(np.float32)),
                    Channel(Product.RHO_HV, 0.5, rho.astype(np.float32)),
                ),
            )
            scans.append(scan)
            true_labels.append(labels)
            user_of_scan[scan_id] = annotator.user_id

            for circle in labels:
                if label_rng.random() > annotator.coverage:
                    continue
                r_hat = (annotator.beta_true * circle.r + annotator.additive_offset
                         + label_rng.normal(0.0, annotator.sigma_true))
                r_hat = max(0.5, r_hat)
                annotations.append(Annotation(
                    annotation_id=f"{scan_id}_a{len(annotations):05d}",
                    scan_id=scan_id,
                    user_id=annotator.user_id,
                    shape=Circle(circle.cx, circle.cy, r_hat),
                ))

    return SynthCorpus(
        scans=scans,
        true_labels=true_labels,
        annotations=annotations,
        turbine_db=TurbineDb(turbines),
        annotators=list(annotators),
        spec=spec,
        n_sequences=n_sequences,
        frames_per_sequence=frames_per_sequence,
        user_of_scan=user_of_scan,
        rain_regions=rain_regions,
        windfarm_regions=windfarm_regions,
        transient_regions=transient_regions,
        n_roost_objects=n_roost_objects,
    )


def corpus_manifest(corpus: SynthCorpus) -> dict:
    """Hidden-answer manifest for tests; the pipeline under test never reads this."""
    manifest = {
        "schema_version": 1,
        "seed": corpus.spec.seed,
        "image": {
            "width": corpus.spec.width,
            "height": corpus.spec.height,
            "km_per_pixel": corpus.spec.km_per_pixel,
        },
        "n_sequences": corpus.n_sequences,
        "frames_per_sequence": corpus.frames_per_sequence,
        "n_roost_objects": corpus.n_roost_objects,
        "annotators": [
            {
                "user_id": a.user_id,
                "beta_true": a.beta_true,
                "sigma_true": a.sigma_true,
                "coverage": a.coverage,
                "additive_offset": a.additive_offset,
            }
            for a in corpus.annotators
        ],
        "scans": [
            {
                "scan_id": s.scan_id,
                "station_id": s.station_id,
                "minutes_from_sunrise": s.minutes_from_sunrise,
                "user_id": corpus.user_of_scan[s.scan_id],
                "true_labels": [[c.cx, c.cy, c.r] for c in labels],
            }
            for s, labels in zip(corpus.scans, corpus.true_labels)
        ],
        "rain_regions": corpus.rain_regions,
        "windfarm_regions": corpus.windfarm_regions,
        "transient_regions": corpus.transient_regions,
    }
    payload = json.dumps(manifest, sort_keys=True).encode()
    manifest["digest"] = hashlib.sha256(payload).hexdigest()
    return manifest
