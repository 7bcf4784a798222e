"""Ring-template roost detector over a fixed candidate grid.

Candidates live on a regular (center, radius) grid.  Each candidate gets four
features computed from the radar raster:

  * matched-filter response of a zero-mean annular ring template on
    standardized reflectivity (roosts are expanding bright rings),
  * a radial-velocity dipole score: mean signed velocity difference between
    the half-disk facing away from the radar and the half facing it
    (birds dispersing outward recede on the far side, approach on the near
    side, so the signed difference is large and positive),
  * mean in-disk standardized reflectivity,
  * the candidate radius itself.

Scores are logistic in the (standardized) features.  Training assigns hard
positive labels to candidates by box IoU; the separate `loss` used by the
label-style EM assigns labels softly along the radius axis so the loss is
continuous in label radii, which a bracketed scalar minimizer needs.

All features depend only on the raster and grid, never on labels or weights,
so they are cached per scan keyed by raster content.
"""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.signal import fftconvolve

from .core import (
    Circle,
    Detection,
    Product,
    RoostkitError,
    Scan,
    circle_to_box,
    iou_matrix,
)

DEFAULT_RADII = (6.0, 9.0, 13.0, 19.0, 28.0, 42.0, 62.0)
N_ORIENTATIONS = 16  # velocity dipole kernels are quantized to this many headings


@dataclass(frozen=True)
class DetectorConfig:
    stride: int = 8
    radii: tuple[float, ...] = DEFAULT_RADII
    ring_width: float = 2.0
    min_valid_fraction: float = 0.5
    nms_iou: float = 0.5
    center_nms: bool = True
    score_floor: float = 0.05
    l2: float = 1e-4
    max_iter: int = 200
    refine: bool = True

    def __post_init__(self):
        if self.stride <= 0:
            raise RoostkitError("stride must be positive")
        if len(self.radii) < 2 or any(r <= 0 for r in self.radii):
            raise RoostkitError("need at least two positive radii")
        if list(self.radii) != sorted(self.radii):
            raise RoostkitError("radii must be increasing")


class CandidateGrid:
    """Regular lattice of candidate circles for one raster size."""

    def __init__(self, width: int, height: int, config: DetectorConfig):
        self.width = width
        self.height = height
        self.config = config
        s = config.stride
        # centers sit on pixel centers so sampled rasters line up exactly
        self.xs = np.arange(s // 2, width, s, dtype=float) + 0.5
        self.ys = np.arange(s // 2, height, s, dtype=float) + 0.5
        self.radii = np.asarray(config.radii, dtype=float)
        self.nx = len(self.xs)
        self.ny = len(self.ys)
        self.nr = len(self.radii)
        self.n = self.nr * self.ny * self.nx

    def signature(self) -> str:
        return f"{self.width}x{self.height}/s{self.config.stride}/r{tuple(self.radii)}"

    def flat_index(self, ir: int, iy: int, ix: int) -> int:
        return (ir * self.ny + iy) * self.nx + ix

    def unravel(self, idx: np.ndarray):
        ir, rem = np.divmod(idx, self.ny * self.nx)
        iy, ix = np.divmod(rem, self.nx)
        return ir, iy, ix

    def circles(self) -> np.ndarray:
        """All candidates as an (n, 3) array of (cx, cy, r), radius-major."""
        gy, gx = np.meshgrid(self.ys, self.xs, indexing="ij")
        out = np.empty((self.n, 3))
        per = self.ny * self.nx
        for ir, r in enumerate(self.radii):
            blk = slice(ir * per, (ir + 1) * per)
            out[blk, 0] = gx.ravel()
            out[blk, 1] = gy.ravel()
            out[blk, 2] = r
        return out

    def boxes(self) -> np.ndarray:
        c = self.circles()
        return np.stack([c[:, 0] - c[:, 2], c[:, 1] - c[:, 2],
                         c[:, 0] + c[:, 2], c[:, 1] + c[:, 2]], axis=1)

    def snap_center(self, cx: float, cy: float) -> tuple[int, int]:
        s = self.config.stride
        ix = int(np.clip(round((cx - self.xs[0]) / s), 0, self.nx - 1))
        iy = int(np.clip(round((cy - self.ys[0]) / s), 0, self.ny - 1))
        return iy, ix

    def radius_bracket(self, r: float) -> list[tuple[int, float]]:
        """Distribute unit weight over the one or two grid radii around r.

        Piecewise linear in r, which keeps the training loss continuous when
        label radii are rescaled.
        """
        radii = self.radii
        if r <= radii[0]:
            return [(0, 1.0)]
        if r >= radii[-1]:
            return [(self.nr - 1, 1.0)]
        j = int(np.searchsorted(radii, r, side="right")) - 1
        span = radii[j + 1] - radii[j]
        w_hi = (r - radii[j]) / span
        return [(j, 1.0 - w_hi), (j + 1, w_hi)]


def _disk_kernel(r: float) -> np.ndarray:
    n = int(math.ceil(r))
    ax = np.arange(-n, n + 1, dtype=float)
    dx, dy = np.meshgrid(ax, ax)
    return (dx * dx + dy * dy <= r * r).astype(float)

def _ring_kernel(r: float, width: float) -> np.ndarray:
    n = int(math.ceil(r + 3.0 * width))
    ax = np.arange(-n, n + 1, dtype=float)
    dx, dy = np.meshgrid(ax, ax)
    d = np.sqrt(dx * dx + dy * dy)
    support = d <= n
    g = np.exp(-0.5 * ((d - r) / width) ** 2) * support
    g -= g.sum() / support.sum() * support  # zero mean over the disk support
    norm = np.sqrt((g * g).sum())
    return g / norm if norm > 0 else g

def _dipole_kernels(r: float) -> np.ndarray:
    """Sign kernels for half-disk orientation bins 0..N/2-1; the remaining
    bins are the negations, so only half are materialized."""
    n = int(math.ceil(r))
    ax = np.arange(-n, n + 1, dtype=float)
    dx, dy = np.meshgrid(ax, ax)
    disk = (dx * dx + dy * dy <= r * r)
    out = np.empty((N_ORIENTATIONS // 2, 2 * n + 1, 2 * n + 1))
    for k in range(N_ORIENTATIONS // 2):
        a = 2.0 * math.pi * k / N_ORIENTATIONS
        out[k] = np.sign(math.cos(a) * dx + math.sin(a) * dy) * disk
    return out


def _corr(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # fftconvolve flips the kernel; flip first so this is a correlation,
    # which matters for the antisymmetric dipole kernels.
    return fftconvolve(img, kernel[::-1, ::-1], mode="same")


@dataclass
class ScanFeatures:
    """Cached per-scan candidate features; independent of labels and weights."""

    key: str
    features: np.ndarray      # (n, 4): ring response, dipole, mean refl, radius
    valid_fraction: np.ndarray  # (n,)


@dataclass
class ScanLossCache:
    """Per-candidate log terms at fixed detector weights, for fast loss evals."""

    nlp: np.ndarray    # -log p, (n,)
    nl1p: np.ndarray   # -log(1 - p), (n,)
    valid: np.ndarray  # (n,) bool
    neg_sum: float     # sum of nl1p over valid candidates
    grid: CandidateGrid


def _scan_key(scan: Scan, grid: CandidateGrid) -> str:
    h = hashlib.sha1()
    for product in (Product.REFLECTIVITY, Product.RADIAL_VELOCITY):
        values = scan.channel(product).values
        h.update(np.ascontiguousarray(values, dtype=np.float64).tobytes())
    h.update(grid.signature().encode())
    return h.hexdigest()


def _compute_features(scan: Scan, grid: CandidateGrid, config: DetectorConfig) -> ScanFeatures:
    refl = scan.channel(Product.REFLECTIVITY).values.astype(float)
    vel = scan.channel(Product.RADIAL_VELOCITY).values.astype(float)
    refl_valid = np.isfinite(refl)
    vel_valid = np.isfinite(vel)

    if refl_valid.any():
        mu = refl[refl_valid].mean()
        sd = refl[refl_valid].std()
        sd = sd if sd > 1e-9 else 1.0
    else:
        mu, sd = 0.0, 1.0
    z = np.where(refl_valid, (refl - mu) / sd, 0.0)
    v = np.where(vel_valid, vel, 0.0)
    refl_v = refl_valid.astype(float)
    vel_v = vel_valid.astype(float)

    # Orientation of "away from the radar" per grid center; rasters are
    # radar-centered so the origin is the image center.
    ox, oy = scan.width / 2.0, scan.height / 2.0
    gy, gx = np.meshgrid(grid.ys, grid.xs, indexing="ij")
    theta = np.arctan2(gy - oy, gx - ox)
    bins = np.round(theta / (2.0 * math.pi / N_ORIENTATIONS)).astype(int) % N_ORIENTATIONS
    half = N_ORIENTATIONS // 2
    kidx = bins % half
    ksign = np.where(bins < half, 1.0, -1.0)

    iy_idx = (grid.ys - 0.5).astype(int)
    ix_idx = (grid.xs - 0.5).astype(int)

    def at_centers(img: np.ndarray) -> np.ndarray:
        return img[np.ix_(iy_idx, ix_idx)]

    n = grid.n
    feats = np.empty((n, 4))
    vfrac = np.empty(n)
    per = grid.ny * grid.nx
    for ir, r in enumerate(grid.radii):
        blk = slice(ir * per, (ir + 1) * per)
        disk = _disk_kernel(r)
        area = disk.sum()
        ring = _ring_kernel(r, config.ring_width)

        n_refl = at_centers(_corr(refl_v, disk))
        n_vel = at_centers(_corr(vel_v, disk))
        ring_score = at_centers(_corr(z, ring))
        disk_mean = at_centers(_corr(z, disk)) / np.maximum(n_refl, 1.0)

        dip_kernels = _dipole_kernels(r)
        dip_stack = np.stack([_corr(v, k) for k in dip_kernels])
        dip_at = dip_stack[:, iy_idx[:, None], ix_idx[None, :]]
        dipole = ksign * dip_at[kidx, np.arange(grid.ny)[:, None],
                                np.arange(grid.nx)[None, :]]
        dipole = dipole / np.maximum(n_vel, 1.0)

        feats[blk, 0] = ring_score.ravel()
        feats[blk, 1] = dipole.ravel()
        feats[blk, 2] = disk_mean.ravel()
        feats[blk, 3] = r
        vfrac[blk] = (n_refl / area).ravel()

    return ScanFeatures(key="", features=feats, valid_fraction=vfrac)


class RingDetector:
    """Logistic scorer over ring-template candidate features."""

    def __init__(self, config: DetectorConfig = DetectorConfig()):
        self.config = config
        self.weights: np.ndarray | None = None  # (5,), last entry is the bias
        self.feature_mean: np.ndarray | None = None
        self.feature_std: np.ndarray | None = None
        self.pos_weight: float | None = None
        self._grids: dict[tuple[int, int], CandidateGrid] = {}
        self._cache: dict[str, ScanFeatures] = {}

    # -- plumbing ---------------------------------------------------------

    def grid_for(self, scan: Scan) -> CandidateGrid:
        key = (scan.width, scan.height)
        grid = self._grids.get(key)
        if grid is None:
            grid = CandidateGrid(scan.width, scan.height, self.config)
            self._grids[key] = grid
        return grid

    def scan_features(self, scan: Scan) -> ScanFeatures:
        grid = self.grid_for(scan)
        key = _scan_key(scan, grid)
        feats = self._cache.get(scan.scan_id)
        if feats is None or feats.key != key:
            feats = _compute_features(scan, grid, self.config)
            feats.key = key
            self._cache[scan.scan_id] = feats
        return feats

    def warm_cache(self, scans, workers: int | None = None) -> None:
        """Precompute features, optionally in a thread pool (the FFT work
        releases the interpreter lock for the most part)."""
        if workers is None:
            workers = int(os.environ.get("ROOSTKIT_WORKERS", "1"))
        if workers <= 1:
            for scan in scans:
                self.scan_features(scan)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(self.scan_features, scans))

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_mean) / self.feature_std

    def _logits(self, feats: ScanFeatures) -> np.ndarray:
        if self.weights is None:
            raise RoostkitError("detector is not fitted")
        xs = self._standardize(feats.features)
        return xs @ self.weights[:-1] + self.weights[-1]

    # -- training ---------------------------------------------------------

    def fit(self, scans, labels_by_scan: dict[str, list[Circle]],
            pos_weight: float | None = None) -> "RingDetector":
        """Train weights on hard candidate labels (positive iff box IoU with
        any label circle exceeds 0.5).

        The positive-class weight is the negative/positive count ratio; once
        set it is kept on refits so retraining under rescaled label radii
        optimizes the same objective.
        """
        xs_parts, ys_parts = [], []
        for scan in scans:
            feats = self.scan_features(scan)
            grid = self.grid_for(scan)
            valid = feats.valid_fraction >= self.config.min_valid_fraction
            if not valid.any():
                continue
            labels = labels_by_scan.get(scan.scan_id, [])
            y = np.zeros(grid.n)
            if labels:
                lab_boxes = np.array([[c.cx - c.r, c.cy - c.r, c.cx + c.r, c.cy + c.r]
                                      for c in labels])
                ious = iou_matrix(grid.boxes(), lab_boxes)
                y = (ious.max(axis=1) > 0.5).astype(float)
            xs_parts.append(feats.features[valid])
            ys_parts.append(y[valid])
        if not xs_parts:
            raise RoostkitError("no usable candidates to fit on")
        x = np.concatenate(xs_parts)
        y = np.concatenate(ys_parts)
        n_pos = float(y.sum())
        n_neg = float(len(y) - n_pos)
        if n_pos == 0:
            raise RoostkitError("no positive candidates; check labels")

        if pos_weight is not None:
            self.pos_weight = float(pos_weight)
        elif self.pos_weight is None:
            self.pos_weight = n_neg / n_pos

        self.feature_mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.feature_std = np.where(std > 1e-9, std, 1.0)
        xs = self._standardize(x)
        xb = np.concatenate([xs, np.ones((len(xs), 1))], axis=1)
        sample_w = np.where(y > 0, self.pos_weight, 1.0)
        scale = 1.0 / sample_w.sum()
        l2 = self.config.l2

        def objective(w):
            logits = xb @ w
            # log(1+e^z) computed stably
            nll = sample_w * (np.logaddexp(0.0, logits) - y * logits)
            p = 1.0 / (1.0 + np.exp(-logits))
            grad = xb.T @ (sample_w * (p - y))
            reg = l2 * float(w[:-1] @ w[:-1])
            grad_reg = np.concatenate([2.0 * l2 * w[:-1], [0.0]])
            return nll.sum() * scale + reg, grad * scale + grad_reg

        res = minimize(objective, np.zeros(xb.shape[1]), jac=True,
                       method="L-BFGS-B",
                       options={"maxiter": self.config.max_iter})
        self.weights = res.x
        return self

    # -- loss used by the label-style EM -----------------------------------

    def loss_cache(self, scan: Scan) -> ScanLossCache:
        feats = self.scan_features(scan)
        grid = self.grid_for(scan)
        logits = self._logits(feats)
        p = np.clip(1.0 / (1.0 + np.exp(-logits)), 1e-12, 1.0 - 1e-12)
        valid = feats.valid_fraction >= self.config.min_valid_fraction
        nlp = -np.log(p)
        nl1p = -np.log1p(-p)
        neg_sum = float(nl1p[valid].sum())
        return ScanLossCache(nlp=nlp, nl1p=nl1p, valid=valid,
                             neg_sum=neg_sum, grid=grid)

    def loss_from_cache(self, cache: ScanLossCache, labels: list[Circle]) -> float:
        """Weighted cross-entropy with labels assigned softly along the radius
        axis at the nearest grid center.  Candidates a label claims lose their
        negative contribution in proportion to the claim."""
        if self.pos_weight is None:
            raise RoostkitError("detector is not fitted")
        total = cache.neg_sum
        claims: dict[int, float] = {}
        for c in labels:
            iy, ix = cache.grid.snap_center(c.cx, c.cy)
            for ir, w in cache.grid.radius_bracket(c.r):
                idx = cache.grid.flat_index(ir, iy, ix)
                if not cache.valid[idx]:
                    continue
                total += self.pos_weight * w * cache.nlp[idx]
                claims[idx] = min(1.0, claims.get(idx, 0.0) + w)
        for idx, claim in claims.items():
            total -= claim * cache.nl1p[idx]
        return total

    def loss(self, scans, labels_by_scan: dict[str, list[Circle]]) -> float:
        return sum(
            self.loss_from_cache(self.loss_cache(scan),
                                 labels_by_scan.get(scan.scan_id, []))
            for scan in scans)

    # -- inference ----------------------------------------------------------

    def detect(self, scan: Scan, top_k: int | None = None) -> list[Detection]:
        feats = self.scan_features(scan)
        grid = self.grid_for(scan)
        logits = self._logits(feats)
        scores = 1.0 / (1.0 + np.exp(-logits))
        keep = (feats.valid_fraction >= self.config.min_valid_fraction) \
            & (scores >= self.config.score_floor)
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            return []
        circles = grid.circles()[idx]
        order = np.lexsort((circles[:, 2], circles[:, 0], circles[:, 1],
                            -scores[idx]))
        idx = idx[order]
        min_dist = float(self.config.stride) if self.config.center_nms else 0.0
        chosen = _nms(grid.circles()[idx], self.config.nms_iou,
                      self.config.center_nms, min_dist)
        idx = idx[chosen]

        refined = grid.circles()[idx]
        if self.config.refine:
            z = _standardized_reflectivity(scan)
            polished = np.array([
                _polish(z, cx, cy, r, self.config.ring_width)
                for cx, cy, r in refined]).reshape(-1, 4)
            refined = polished[:, :3]
            refined[:, 0] = np.clip(refined[:, 0], 0, scan.width)
            refined[:, 1] = np.clip(refined[:, 1], 0, scan.height)
            refined[:, 2] = np.maximum(refined[:, 2], 0.5)
            # polish pulls neighboring cells onto the same object and can push
            # survivors back over the overlap cut; suppress again on the
            # refined shapes so the output-level guarantee holds.  Scores
            # saturate, so rank this pass by template response: among
            # near-duplicates the best-fitting geometry wins.
            order = np.lexsort((refined[:, 2], refined[:, 0], refined[:, 1],
                                -polished[:, 3]))
            idx, refined = idx[order], refined[order]
            final = _nms(refined, self.config.nms_iou,
                         self.config.center_nms, min_dist)
            idx, refined = idx[final], refined[final]
            # restore score ordering for ranking and top-k
            order = np.lexsort((refined[:, 2], refined[:, 0], refined[:, 1],
                                -scores[idx]))
            idx, refined = idx[order], refined[order]
        if top_k is not None:
            idx, refined = idx[:top_k], refined[:top_k]

        detections = []
        for k, flat in enumerate(idx):
            detections.append(Detection(
                detection_id=f"{scan.scan_id}_d{k:03d}",
                scan_id=scan.scan_id,
                shape=Circle(float(refined[k, 0]), float(refined[k, 1]),
                             float(refined[k, 2])),
                score=float(scores[flat]),
            ))
        return detections

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        if self.weights is None:
            raise RoostkitError("detector is not fitted")
        return {
            "schema_version": 1,
            "config": {
                "stride": self.config.stride,
                "radii": list(self.config.radii),
                "ring_width": self.config.ring_width,
                "min_valid_fraction": self.config.min_valid_fraction,
                "nms_iou": self.config.nms_iou,
                "score_floor": self.config.score_floor,
                "l2": self.config.l2,
                "max_iter": self.config.max_iter,
                "refine": self.config.refine,
            },
            "weights": self.weights.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "pos_weight": self.pos_weight,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "RingDetector":
        cfg = dict(blob["config"])
        cfg["radii"] = tuple(cfg["radii"])
        det = cls(DetectorConfig(**cfg))
        det.weights = np.asarray(blob["weights"], dtype=float)
        det.feature_mean = np.asarray(blob["feature_mean"], dtype=float)
        det.feature_std = np.asarray(blob["feature_std"], dtype=float)
        det.pos_weight = float(blob["pos_weight"])
        return det

    def clone_unfitted(self) -> "RingDetector":
        """Fresh detector sharing this one's feature cache (features do not
        depend on weights, so reuse is safe)."""
        det = RingDetector(self.config)
        det._grids = self._grids
        det._cache = self._cache
        det.pos_weight = self.pos_weight
        return det


def _nms(circles: np.ndarray, iou_cut: float, center_nms: bool = True,
         min_dist: float = 0.0) -> np.ndarray:
    """Greedy suppression over score-sorted circles; returns kept positions.

    Besides the box-overlap cut, a weaker detection is dropped when its
    center falls inside a kept detection's disk (or vice versa), or when the
    centers sit within min_dist of each other: concentric candidates at
    neighboring grid radii, and same-object candidates in adjacent cells,
    overlap below any reasonable box IoU cut.
    """
    boxes = np.stack([circles[:, 0] - circles[:, 2], circles[:, 1] - circles[:, 2],
                      circles[:, 0] + circles[:, 2], circles[:, 1] + circles[:, 2]],
                     axis=1)
    alive = np.ones(len(boxes), dtype=bool)
    kept = []
    for i in range(len(boxes)):
        if not alive[i]:
            continue
        kept.append(i)
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if rest.size:
            ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            drop = ious > iou_cut
            if center_nms:
                dist = np.hypot(circles[rest, 0] - circles[i, 0],
                                circles[rest, 1] - circles[i, 1])
                cut = np.maximum(np.maximum(circles[i, 2], circles[rest, 2]),
                                 min_dist)
                drop |= dist < cut
            alive[rest[drop]] = False
    return np.asarray(kept, dtype=int)


def _standardized_reflectivity(scan: Scan) -> np.ndarray:
    """Reflectivity standardized over valid pixels, missing filled with 0."""
    refl = scan.channel(Product.REFLECTIVITY).values.astype(float)
    valid = np.isfinite(refl)
    if valid.any():
        mu = refl[valid].mean()
        sd = refl[valid].std()
        sd = sd if sd > 1e-9 else 1.0
    else:
        mu, sd = 0.0, 1.0
    return np.where(valid, (refl - mu) / sd, 0.0)


def _padded_patch(img: np.ndarray, iy: int, ix: int, half: int) -> np.ndarray:
    """Square window of side 2*half+1 around a pixel, zero-padded at borders."""
    h, w = img.shape
    out = np.zeros((2 * half + 1, 2 * half + 1))
    y0, y1 = max(iy - half, 0), min(iy + half + 1, h)
    x0, x1 = max(ix - half, 0), min(ix + half + 1, w)
    out[y0 - iy + half:y1 - iy + half, x0 - ix + half:x1 - ix + half] = \
        img[y0:y1, x0:x1]
    return out


def _parabola_offset(lo: float, mid: float, hi: float) -> float:
    """Vertex offset in [-0.5, 0.5] steps of the parabola through three
    equally spaced samples; 0 when the fit is not concave."""
    denom = lo - 2.0 * mid + hi
    if denom >= -1e-12:
        return 0.0
    return float(np.clip(0.5 * (lo - hi) / denom, -0.5, 0.5))


# one full grid step either side: saturated scores make the grid-level
# suppression pick an arbitrary radius layer among concentric duplicates, so
# the survivor must be able to reach the true radius from a neighboring layer
_RADIUS_STEPS = 1.48 ** np.linspace(-1.0, 1.0, 13)


def _polish(z: np.ndarray, cx: float, cy: float, r: float, ring_width: float,
            search_px: int = 5) -> tuple[float, float, float, float]:
    """Local matched-filter peak search around a grid candidate.

    The ring template response is evaluated on a dense lattice (integer pixel
    offsets up to search_px, radii spanning a grid step either side), then the
    peak is interpolated to sub-pixel / sub-step precision with
    one-dimensional parabolas.  This recovers geometry between grid cells and
    radius levels, where box IoU against a mid-cell object would otherwise
    fall short.  Returns (cx, cy, r, peak response).
    """
    iy, ix = int(cy - 0.5), int(cx - 0.5)
    radii = r * _RADIUS_STEPS
    responses = []
    for rr in radii:
        kernel = _ring_kernel(rr, ring_width)
        half = kernel.shape[0] // 2 + search_px
        patch = _padded_patch(z, iy, ix, half)
        responses.append(fftconvolve(patch, kernel[::-1, ::-1], mode="valid"))
    stack = np.stack(responses)  # (n_radii, 2s+1, 2s+1)
    k, dy, dx = np.unravel_index(int(np.argmax(stack)), stack.shape)

    off_x = off_y = 0.0
    if 0 < dx < 2 * search_px:
        off_x = _parabola_offset(stack[k, dy, dx - 1], stack[k, dy, dx],
                                 stack[k, dy, dx + 1])
    if 0 < dy < 2 * search_px:
        off_y = _parabola_offset(stack[k, dy - 1, dx], stack[k, dy, dx],
                                 stack[k, dy + 1, dx])
    log_r = math.log(radii[k])
    if 0 < k < len(radii) - 1:
        # uniform spacing in log radius, so the same parabola applies
        step = math.log(_RADIUS_STEPS[1] / _RADIUS_STEPS[0])
        log_r += step * _parabola_offset(stack[k - 1, dy, dx],
                                         stack[k, dy, dx],
                                         stack[k + 1, dy, dx])
    return (ix + 0.5 + dx - search_px + off_x,
            iy + 0.5 + dy - search_px + off_y,
            math.exp(log_r),
            float(stack[k, dy, dx]))
