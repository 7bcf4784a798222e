"""Per-annotator label-style model learned jointly with the detector.

Each annotator u draws their radius label around a scaled version of the true
radius, r_hat ~ N(beta_u * r, sigma^2); the reverse model used to undo that
bias is r ~ N(phi_u * r_hat, sigma^2).  Training alternates three steps:

  1. per annotator, pick phi_u on [0.1, 2] minimizing detector loss on that
     annotator's scans with their radii rescaled by phi_u, plus the forward
     model's negative log likelihood at the implied true radius,
  2. re-impute every label radius and retrain the detector (centers are the
     annotator's own and are never modified),
  3. refit beta_u by least squares through the origin on (imputed radius,
     raw radius) pairs and pool a shared sigma across annotators.

Imputation is deterministic by default (posterior mean phi_u * r_hat); a
seeded sampling mode exists for step 2.  With deterministic imputation the
step-3 pairs are exactly collinear, so beta_u lands on 1/phi_u and sigma
collapses to its floor; that is by design, the floor keeps step 1 bounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .core import Annotation, Circle, Detection, RoostkitError, Scan, circle_to_box, iou
from .detector import RingDetector, ScanLossCache

PHI_MIN, PHI_MAX = 0.1, 2.0
SIGMA_FLOOR = 0.5
INIT_PAIR_IOU = 0.2
INIT_PAIR_SCORE = 0.9


@dataclass(frozen=True)
class UserStyle:
    user_id: str
    beta: float = 1.0
    phi: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.beta <= 0 or self.phi <= 0 or self.sigma <= 0:
            raise RoostkitError("style parameters must be positive")


def forward_logpdf(r_hat: float, r: float, style: UserStyle) -> float:
    """Log density of the annotator writing r_hat for a true radius r."""
    var = style.sigma ** 2
    return -0.5 * math.log(2.0 * math.pi * var) \
        - 0.5 * (r_hat - style.beta * r) ** 2 / var


def reverse_map_radius(r_hat: float, style: UserStyle) -> float:
    """Most probable true radius given the annotator's label."""
    return style.phi * r_hat


def impute_labels(annotations: list[Annotation], styles: dict[str, UserStyle],
                  mode: str = "map",
                  rng: np.random.Generator | None = None) -> dict[str, list[Circle]]:
    """Label circles with radii mapped through each annotator's reverse model.

    mode "map" uses the posterior mean; "sample" draws around it with the
    style's sigma (requires rng).  Radii are floored at half a pixel.  Centers
    pass through untouched.
    """
    if mode == "sample" and rng is None:
        raise RoostkitError("sampling imputation needs a random generator")
    out: dict[str, list[Circle]] = {}
    for a in annotations:
        style = styles.get(a.user_id)
        if style is None:
            raise RoostkitError(f"no style for annotator {a.user_id}")
        r = reverse_map_radius(a.shape.r, style)
        if mode == "sample":
            r += style.sigma * float(rng.standard_normal())
        out.setdefault(a.scan_id, []).append(
            Circle(a.shape.cx, a.shape.cy, max(r, 0.5)))
    return out


def raw_labels(annotations: list[Annotation]) -> dict[str, list[Circle]]:
    out: dict[str, list[Circle]] = {}
    for a in annotations:
        out.setdefault(a.scan_id, []).append(a.shape)
    return out


def init_styles(detections_by_scan: dict[str, list[Detection]],
                annotations: list[Annotation],
                pair_iou: float = INIT_PAIR_IOU,
                pair_score: float = INIT_PAIR_SCORE) -> dict[str, UserStyle]:
    """Start styles from confident detection/annotation pairs.

    An annotation pairs with the best-overlapping detection of its scan when
    that overlap exceeds pair_iou and the detection scores above pair_score.
    beta is the through-origin regression of labeled radius on detected
    radius; annotators with no pairs start at the identity style.
    """
    pairs: dict[str, list[tuple[float, float]]] = {}
    for a in annotations:
        dets = detections_by_scan.get(a.scan_id, [])
        abox = circle_to_box(a.shape)
        best, best_iou = None, pair_iou
        for d in dets:
            if d.score <= pair_score:
                continue
            v = iou(circle_to_box(d.shape), abox)
            if v > best_iou:
                best, best_iou = d, v
        if best is not None:
            pairs.setdefault(a.user_id, []).append((best.shape.r, a.shape.r))
    styles: dict[str, UserStyle] = {}
    for user in sorted({a.user_id for a in annotations}):
        user_pairs = pairs.get(user)
        if not user_pairs:
            styles[user] = UserStyle(user_id=user)
            continue
        r = np.array([p[0] for p in user_pairs])
        r_hat = np.array([p[1] for p in user_pairs])
        denom = float(r @ r)
        beta = float(r @ r_hat) / denom if denom > 0 else 1.0
        beta = min(max(beta, 1.0 / PHI_MAX), 1.0 / PHI_MIN)
        resid = r_hat - beta * r
        sigma = max(float(np.sqrt(np.mean(resid ** 2))), SIGMA_FLOOR)
        phi = min(max(1.0 / beta, PHI_MIN), PHI_MAX)
        styles[user] = UserStyle(user_id=user, beta=beta, phi=phi, sigma=sigma)
    return styles


@dataclass
class EmRound:
    round_index: int
    styles: dict[str, UserStyle]
    objectives: dict[str, float]
    train_loss: float


@dataclass
class EmResult:
    styles: dict[str, UserStyle]
    detector: RingDetector
    history: list[EmRound]


def _style_objective(detector: RingDetector, caches: list[ScanLossCache],
                     fixed_labels: list[list[Circle]],
                     own_annotations: list[list[Annotation]],
                     style: UserStyle, phi: float) -> float:
    """Detector loss with this annotator's radii rescaled by phi, plus the
    forward model's cost of explaining the raw labels at the implied radii."""
    total = 0.0
    for cache, fixed, own in zip(caches, fixed_labels, own_annotations):
        labels = list(fixed)
        for a in own:
            labels.append(Circle(a.shape.cx, a.shape.cy,
                                 max(phi * a.shape.r, 0.5)))
        total += detector.loss_from_cache(cache, labels)
    var = style.sigma ** 2
    log_norm = 0.5 * math.log(2.0 * math.pi * var)
    for own in own_annotations:
        for a in own:
            r = max(phi * a.shape.r, 0.5)
            total += log_norm + 0.5 * (a.shape.r - style.beta * r) ** 2 / var
    return total


def phi_objective(detector: RingDetector, scans: list[Scan],
                  annotations: list[Annotation], styles: dict[str, UserStyle],
                  user_id: str):
    """Build the scalar objective over phi for one annotator.

    Only scans carrying that annotator's labels enter the sum; other users'
    labels on those scans stay fixed at their current imputed radii.  Returns
    a callable phi -> objective, or None when the user labeled no scans.
    """
    style = styles[user_id]
    scan_ids = {a.scan_id for a in annotations if a.user_id == user_id}
    used = [s for s in scans if s.scan_id in scan_ids]
    if not used:
        return None
    caches = [detector.loss_cache(s) for s in used]
    fixed_labels: list[list[Circle]] = []
    own_annotations: list[list[Annotation]] = []
    for scan in used:
        fixed: list[Circle] = []
        own: list[Annotation] = []
        for a in annotations:
            if a.scan_id != scan.scan_id:
                continue
            if a.user_id == user_id:
                own.append(a)
            else:
                other = styles[a.user_id]
                fixed.append(Circle(a.shape.cx, a.shape.cy,
                                    max(other.phi * a.shape.r, 0.5)))
        fixed_labels.append(fixed)
        own_annotations.append(own)

    def objective(phi: float) -> float:
        return _style_objective(detector, caches, fixed_labels,
                                own_annotations, style, phi)

    return objective


def update_phi(detector: RingDetector, scans: list[Scan],
               annotations: list[Annotation], styles: dict[str, UserStyle],
               user_id: str, grid_step: float = 0.05,
               xatol: float = 1e-3) -> tuple[float, float]:
    """Step 1 for one annotator: bracketed scalar search for phi.

    A coarse grid scan locates the basin, bounded Brent refines it, and the
    result is safeguarded so the returned phi is never worse than either the
    incumbent value or the identity.  Returns (phi, objective at phi).
    """
    style = styles[user_id]
    objective = phi_objective(detector, scans, annotations, styles, user_id)
    if objective is None:
        return style.phi, 0.0

    grid = np.arange(PHI_MIN, PHI_MAX + 1e-9, grid_step)
    grid_vals = [objective(p) for p in grid]
    best = int(np.argmin(grid_vals))
    lo = max(PHI_MIN, grid[best] - grid_step)
    hi = min(PHI_MAX, grid[best] + grid_step)
    res = minimize_scalar(objective, bounds=(lo, hi), method="bounded",
                          options={"xatol": xatol, "maxiter": 100})
    candidates = [float(res.x), style.phi, 1.0]
    values = [float(res.fun), objective(style.phi), objective(1.0)]
    k = int(np.argmin(values))
    return candidates[k], values[k]


def run_em(detector: RingDetector, scans: list[Scan],
           annotations: list[Annotation], rounds: int = 2,
           styles: dict[str, UserStyle] | None = None,
           impute: str = "map", seed: int | None = None,
           phi_grid_step: float = 0.05) -> EmResult:
    """Alternate style and detector updates for a fixed number of rounds.

    The detector must already be fitted (typically on the raw labels); when
    styles is None they are initialized from confident detections of that
    detector.  Returns the final styles, the retrained detector and per-round
    diagnostics.
    """
    if detector.weights is None:
        detector.fit(scans, raw_labels(annotations))
    if styles is None:
        dets_by_scan = {s.scan_id: detector.detect(s) for s in scans}
        styles = init_styles(dets_by_scan, annotations)
    else:
        styles = dict(styles)
    rng = np.random.default_rng(np.random.SeedSequence(seed)) \
        if impute == "sample" else None

    history: list[EmRound] = []
    for round_index in range(rounds):
        objectives: dict[str, float] = {}
        for user_id in sorted(styles):
            phi, value = update_phi(detector, scans, annotations, styles,
                                    user_id, grid_step=phi_grid_step)
            styles[user_id] = replace(styles[user_id], phi=phi)
            objectives[user_id] = value

        imputed = impute_labels(annotations, styles, mode=impute, rng=rng)
        detector = detector.clone_unfitted().fit(scans, imputed)

        styles = refit_forward_model(annotations, imputed, styles)
        train_loss = detector.loss(scans, imputed)
        history.append(EmRound(round_index=round_index, styles=dict(styles),
                               objectives=objectives, train_loss=train_loss))
    return EmResult(styles=styles, detector=detector, history=history)


def refit_forward_model(annotations: list[Annotation],
                        imputed: dict[str, list[Circle]],
                        styles: dict[str, UserStyle]) -> dict[str, UserStyle]:
    """Step 3: per-annotator beta by least squares through the origin on
    (imputed radius, raw radius) pairs, and one sigma pooled over everyone,
    floored at half a pixel.

    Imputed circles are matched back to annotations by position within each
    scan's list, which impute_labels preserves.
    """
    position: dict[str, int] = {}
    pairs: dict[str, list[tuple[float, float]]] = {u: [] for u in styles}
    for a in annotations:
        k = position.get(a.scan_id, 0)
        position[a.scan_id] = k + 1
        r = imputed[a.scan_id][k].r
        pairs[a.user_id].append((r, a.shape.r))

    out: dict[str, UserStyle] = {}
    sq_sum, n_total = 0.0, 0
    residuals: dict[str, np.ndarray] = {}
    for user, style in styles.items():
        user_pairs = pairs.get(user, [])
        if not user_pairs:
            out[user] = style
            continue
        r = np.array([p[0] for p in user_pairs])
        r_hat = np.array([p[1] for p in user_pairs])
        denom = float(r @ r)
        beta = float(r @ r_hat) / denom if denom > 0 else style.beta
        beta = min(max(beta, 1.0 / PHI_MAX), 1.0 / PHI_MIN)
        out[user] = replace(style, beta=beta)
        resid = r_hat - beta * r
        residuals[user] = resid
        sq_sum += float(resid @ resid)
        n_total += len(resid)
    sigma = max(math.sqrt(sq_sum / n_total), SIGMA_FLOOR) if n_total else None
    if sigma is not None:
        out = {u: (replace(s, sigma=sigma) if u in residuals else s)
               for u, s in out.items()}
    return out
