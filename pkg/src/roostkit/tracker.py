"""Frame-to-frame association, linear-dynamics smoothing and track rescoring.

Association is detect-then-track: every confident detection seeds a track,
which grows forward and backward through its frame sequence by best box
overlap, tolerating short gaps.  Claims are not exclusive while growing;
detections owned by several tracks afterwards go to the longest one.  Tracks
are then smoothed with a constant-radius-growth linear dynamical system whose
noise terms are estimated from the tracks themselves by moment matching, and
optionally rescored with a linear SVM over whole-track features, which lets
evidence from good frames rescue weak ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.svm import LinearSVC

from .core import (Circle, Detection, Provenance, RoostkitError, Scan,
                   circle_to_box, iou)

VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class TrackerConfig:
    seed_score_min: float = 0.5
    link_iou_min: float = 0.2
    max_frame_gap: int = 2


@dataclass(frozen=True)
class TrackMember:
    scan_id: str
    frame_index: int
    detection: Detection


@dataclass
class Track:
    track_id: str
    members: list[TrackMember]
    seed_detection_id: str

    @property
    def score(self) -> float:
        return sum(m.detection.score for m in self.members)

    @property
    def frames(self) -> list[int]:
        return [m.frame_index for m in self.members]

    def __len__(self) -> int:
        return len(self.members)


def associate(detections_by_frame: list[list[Detection]],
              config: TrackerConfig = TrackerConfig(),
              id_prefix: str = "t") -> list[Track]:
    """Greedy detect-then-track association over one ordered frame sequence.

    Seeds are taken in descending score order; each grows both ways by best
    IoU against the track's current end box, skipping at most max_frame_gap
    frames between members.  A detection may be linked into several tracks
    during the pass; conflicts are settled afterwards in favor of the longest
    track (then higher total score, then smaller track id), with track
    lengths frozen at the moment resolution starts.
    """
    n_frames = len(detections_by_frame)
    seeds = []
    for f, dets in enumerate(detections_by_frame):
        for d in dets:
            if d.score >= config.seed_score_min:
                seeds.append((f, d))
    seeds.sort(key=lambda e: (-e[1].score, e[0], e[1].detection_id))

    claimed: set[str] = set()
    tracks: list[Track] = []
    for seed_frame, seed_det in seeds:
        if seed_det.detection_id in claimed:
            continue
        members = [TrackMember(seed_det.scan_id, seed_frame, seed_det)]
        claimed.add(seed_det.detection_id)

        for direction in (1, -1):
            end_frame = seed_frame
            end_box = circle_to_box(seed_det.shape)
            f = seed_frame + direction
            while 0 <= f < n_frames and abs(f - end_frame) <= config.max_frame_gap + 1:
                best, best_key = None, None
                for d in detections_by_frame[f]:
                    v = iou(end_box, circle_to_box(d.shape))
                    if v >= config.link_iou_min:
                        key = (-v, -d.score, d.detection_id)
                        if best is None or key < best_key:
                            best, best_key = d, key
                if best is not None:
                    members.append(TrackMember(best.scan_id, f, best))
                    claimed.add(best.detection_id)
                    end_frame = f
                    end_box = circle_to_box(best.shape)
                f += direction

        members.sort(key=lambda m: m.frame_index)
        tracks.append(Track(track_id=f"{id_prefix}{len(tracks):04d}",
                            members=members,
                            seed_detection_id=seed_det.detection_id))

    _resolve_conflicts(tracks, config)
    return [t for t in tracks if t.members]


def _resolve_conflicts(tracks: list[Track], config: TrackerConfig) -> None:
    owners: dict[str, list[int]] = {}
    for i, t in enumerate(tracks):
        for m in t.members:
            owners.setdefault(m.detection.detection_id, []).append(i)
    snapshot_len = [len(t.members) for t in tracks]
    snapshot_score = [t.score for t in tracks]

    contested = sorted(d for d, o in owners.items() if len(o) > 1)
    for det_id in contested:
        group = owners[det_id]
        winner = min(group, key=lambda i: (-snapshot_len[i],
                                           -snapshot_score[i],
                                           tracks[i].track_id))
        for i in group:
            if i != winner:
                tracks[i].members = [m for m in tracks[i].members
                                     if m.detection.detection_id != det_id]
    if contested:
        for t in tracks:
            _repair_gaps(t, config)


def _repair_gaps(track: Track, config: TrackerConfig) -> None:
    """After removals a track can violate its own gap budget; keep only the
    stretch around the seed (or the best surviving member if the seed lost)."""
    members = track.members
    if len(members) <= 1:
        return
    anchor = next((k for k, m in enumerate(members)
                   if m.detection.detection_id == track.seed_detection_id), None)
    if anchor is None:
        anchor = min(range(len(members)),
                     key=lambda k: (-members[k].detection.score,
                                    members[k].detection.detection_id))
    lo = anchor
    while lo > 0 and members[lo].frame_index - members[lo - 1].frame_index \
            <= config.max_frame_gap + 1:
        lo -= 1
    hi = anchor
    while hi < len(members) - 1 and members[hi + 1].frame_index - members[hi].frame_index \
            <= config.max_frame_gap + 1:
        hi += 1
    track.members = members[lo:hi + 1]


def retain_mature(tracks: list[Track], min_members: int = 2,
                  min_score: float = 0.7) -> list[Track]:
    """Keep tracks with at least min_members detections at or above
    min_score; the standard report filter."""
    return [t for t in tracks
            if sum(1 for m in t.members if m.detection.score >= min_score)
            >= min_members]


# -- linear dynamics ------------------------------------------------------

TRANSITION = np.array([[1.0, 0, 0, 0],
                       [0, 1.0, 0, 0],
                       [0, 0, 1.0, 1.0],
                       [0, 0, 0, 1.0]])
OBSERVATION = np.array([[1.0, 0, 0, 0],
                        [0, 1.0, 0, 0],
                        [0, 0, 1.0, 0]])


@dataclass
class LdsParams:
    """Constant-velocity radius, random-walk center; diagonal noises."""

    process_cov: np.ndarray  # (4,4)
    obs_cov: np.ndarray      # (3,3)
    mean_radius_slope: float
    slope_var: float

    def initial(self, z0: np.ndarray):
        mean = np.array([z0[0], z0[1], z0[2], self.mean_radius_slope])
        cov = np.diag([self.obs_cov[0, 0], self.obs_cov[1, 1],
                       self.obs_cov[2, 2], max(self.slope_var, VARIANCE_FLOOR)])
        return mean, cov


def _track_observations(track: Track) -> tuple[np.ndarray, np.ndarray]:
    frames = np.array([m.frame_index for m in track.members], dtype=float)
    obs = np.array([[m.detection.shape.cx, m.detection.shape.cy,
                     m.detection.shape.r] for m in track.members])
    return frames, obs


def fit_lds(tracks: list[Track]) -> LdsParams:
    """Moment-matched noise estimates from observed tracks.

    Radius measurement noise comes from per-track straight-line residuals;
    center noises come from first differences, whose lag-one autocovariance
    isolates measurement from process noise; radius process noise is what is
    left of the second-difference variance after the measurement part.
    """
    line_sq, line_dof = 0.0, 0
    slopes = []
    diffs_xy: list[np.ndarray] = []
    second_r: list[float] = []
    for track in tracks:
        frames, obs = _track_observations(track)
        if len(frames) >= 3:
            for dim in (2,):
                coef = np.polyfit(frames, obs[:, dim], 1)
                resid = obs[:, dim] - np.polyval(coef, frames)
                line_sq += float(resid @ resid)
                line_dof += len(frames) - 2
                slopes.append(float(coef[0]))
        step = np.diff(frames)
        unit = step == 1
        for dim in (0, 1):
            d = np.diff(obs[:, dim])[unit]
            if len(d):
                diffs_xy.append(d)
        contiguous = np.flatnonzero(unit[:-1] & unit[1:])
        for i in contiguous:
            second_r.append(float(obs[i + 2, 2] - 2.0 * obs[i + 1, 2] + obs[i, 2]))

    r_r = max(line_sq / line_dof, VARIANCE_FLOOR) if line_dof else 1.0
    if diffs_xy:
        d = np.concatenate(diffs_xy)
        dc = d - d.mean()
        var_d = float(dc @ dc) / max(len(dc) - 1, 1)
        lag1 = float(dc[:-1] @ dc[1:]) / max(len(dc) - 2, 1) if len(dc) >= 2 else 0.0
        r_xy = max(-lag1, VARIANCE_FLOOR)
        q_xy = max(var_d - 2.0 * r_xy, VARIANCE_FLOOR)
    else:
        r_xy, q_xy = 1.0, 0.1
    if second_r:
        var_dd = float(np.var(np.asarray(second_r)))
        q_rdot = max(var_dd - 6.0 * r_r, VARIANCE_FLOOR)
    else:
        q_rdot = VARIANCE_FLOOR

    mean_slope = float(np.mean(slopes)) if slopes else 0.0
    slope_var = float(np.var(slopes, ddof=1)) if len(slopes) >= 2 else 1.0
    return LdsParams(
        process_cov=np.diag([q_xy, q_xy, VARIANCE_FLOOR, q_rdot]),
        obs_cov=np.diag([r_xy, r_xy, r_r]),
        mean_radius_slope=mean_slope,
        slope_var=max(slope_var, VARIANCE_FLOOR),
    )


@dataclass
class TrackState:
    """Smoothed state over every frame from first to last member, gaps
    included (gap frames carry prediction only)."""

    track_id: str
    first_frame: int
    means: np.ndarray  # (T, 4): cx, cy, r, r-slope
    covs: np.ndarray   # (T, 4, 4)
    member_frames: np.ndarray
    residuals: np.ndarray  # per member, distance between observed and smoothed

    @property
    def mean_residual(self) -> float:
        return float(self.residuals.mean()) if len(self.residuals) else 0.0

    def at_frame(self, frame: int) -> np.ndarray:
        return self.means[frame - self.first_frame]


def smooth(track: Track, params: LdsParams) -> TrackState:
    """Kalman filter plus backward smoothing pass over one track."""
    if not track.members:
        raise RoostkitError("cannot smooth an empty track")
    frames, obs = _track_observations(track)
    f0, f1 = int(frames[0]), int(frames[-1])
    T = f1 - f0 + 1
    z_at = {int(f) - f0: obs[i] for i, f in enumerate(frames)}

    A, H = TRANSITION, OBSERVATION
    Q, R = params.process_cov, params.obs_cov
    eye = np.eye(4)

    prior_m = np.empty((T, 4))
    prior_c = np.empty((T, 4, 4))
    post_m = np.empty((T, 4))
    post_c = np.empty((T, 4, 4))

    m, c = params.initial(obs[0])
    for t in range(T):
        if t > 0:
            m = A @ post_m[t - 1]
            c = A @ post_c[t - 1] @ A.T + Q
            c = 0.5 * (c + c.T)
        prior_m[t], prior_c[t] = m, c
        z = z_at.get(t)
        if z is None:
            post_m[t], post_c[t] = m, c
            continue
        s = H @ c @ H.T + R
        k = c @ H.T @ np.linalg.inv(s)
        post_m[t] = m + k @ (z - H @ m)
        j = eye - k @ H
        pc = j @ c @ j.T + k @ R @ k.T
        post_c[t] = 0.5 * (pc + pc.T)

    sm = np.empty((T, 4))
    sc = np.empty((T, 4, 4))
    sm[-1], sc[-1] = post_m[-1], post_c[-1]
    for t in range(T - 2, -1, -1):
        g = post_c[t] @ A.T @ np.linalg.inv(prior_c[t + 1])
        sm[t] = post_m[t] + g @ (sm[t + 1] - prior_m[t + 1])
        cc = post_c[t] + g @ (sc[t + 1] - prior_c[t + 1]) @ g.T
        sc[t] = 0.5 * (cc + cc.T)
    sm[:, 2] = np.maximum(sm[:, 2], 0.5)

    residuals = np.array([
        float(np.linalg.norm(obs[i] - H @ sm[int(f) - f0]))
        for i, f in enumerate(frames)])
    return TrackState(track_id=track.track_id, first_frame=f0, means=sm,
                      covs=sc, member_frames=frames.astype(int),
                      residuals=residuals)


# -- rescoring --------------------------------------------------------------

@dataclass(frozen=True)
class TrackFeatures:
    score_sum: float
    n_members: float
    mean_score: float
    max_score: float
    duration_minutes: float
    mean_residual: float

    def vector(self) -> np.ndarray:
        return np.array([self.score_sum, self.n_members, self.mean_score,
                         self.max_score, self.duration_minutes,
                         self.mean_residual])


def track_features(track: Track, state: TrackState,
                   scans_by_id: dict[str, Scan]) -> TrackFeatures:
    scores = [m.detection.score for m in track.members]
    t0 = scans_by_id[track.members[0].scan_id].timestamp
    t1 = scans_by_id[track.members[-1].scan_id].timestamp
    return TrackFeatures(
        score_sum=float(sum(scores)),
        n_members=float(len(scores)),
        mean_score=float(np.mean(scores)),
        max_score=float(max(scores)),
        duration_minutes=float((t1 - t0) / 60.0),
        mean_residual=state.mean_residual,
    )


@dataclass
class Rescorer:
    """Linear margin over standardized whole-track features; the calibrated
    score is the logistic of the margin."""

    weights: np.ndarray
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def margin(self, features: TrackFeatures) -> float:
        x = (features.vector() - self.feat_mean) / self.feat_std
        return float(x @ self.weights + self.bias)

    def calibrated(self, features: TrackFeatures) -> float:
        return float(1.0 / (1.0 + math.exp(-self.margin(features))))

    def to_dict(self) -> dict:
        return {"schema_version": 1, "weights": self.weights.tolist(),
                "bias": self.bias, "feat_mean": self.feat_mean.tolist(),
                "feat_std": self.feat_std.tolist()}

    @classmethod
    def from_dict(cls, blob: dict) -> "Rescorer":
        return cls(weights=np.asarray(blob["weights"], dtype=float),
                   bias=float(blob["bias"]),
                   feat_mean=np.asarray(blob["feat_mean"], dtype=float),
                   feat_std=np.asarray(blob["feat_std"], dtype=float))


def _fit_margin_model(features: list[TrackFeatures],
                      labels: list[int]) -> Rescorer:
    """Hinge-loss linear separator on standardized feature vectors.

    Members of one track repeat the same vector; identical examples are
    collapsed into sample weights, which leaves the objective unchanged but
    lets the dual solver converge quickly.
    """
    y = np.asarray(labels, dtype=int)
    if len(set(y.tolist())) < 2:
        raise RoostkitError("rescorer training needs both classes")
    x = np.stack([f.vector() for f in features]).astype(float)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-9, std, 1.0)
    xs = (x - mean) / std

    groups: dict[bytes, int] = {}
    rows, labs, weights = [], [], []
    for vec, lab in zip(xs, y):
        key = np.int64(lab).tobytes() + vec.tobytes()
        if key in groups:
            weights[groups[key]] += 1.0
        else:
            groups[key] = len(rows)
            rows.append(vec)
            labs.append(lab)
            weights.append(1.0)
    order = sorted(range(len(rows)), key=lambda i: (labs[i], rows[i].tobytes()))

    svm = LinearSVC(C=1.0, loss="hinge", dual=True, tol=1e-5,
                    max_iter=20000, random_state=0)
    svm.fit(np.stack(rows)[order], np.asarray(labs)[order],
            sample_weight=np.asarray(weights)[order])
    return Rescorer(weights=svm.coef_[0].astype(float),
                    bias=float(svm.intercept_[0]),
                    feat_mean=mean, feat_std=std)


def _labels_by_scan(annotations) -> dict[str, list[Circle]]:
    if isinstance(annotations, dict):
        return annotations
    out: dict[str, list[Circle]] = {}
    for a in annotations:
        out.setdefault(a.scan_id, []).append(a.shape)
    return out


def train_rescorer(tracks: list[Track], states: list[TrackState],
                   scans_by_id: dict[str, Scan], annotations,
                   iou_min: float = 0.5) -> Rescorer:
    """Train the track rescorer against reference labels.

    One example per tracked detection: its track's feature vector, labeled
    positive when the detection overlaps any reference shape on its scan at
    IoU >= iou_min.  annotations may be a list of Annotation records or a
    dict scan_id -> [Circle].
    """
    shapes = _labels_by_scan(annotations)
    features: list[TrackFeatures] = []
    labels: list[int] = []
    for track, state in zip(tracks, states):
        vec = track_features(track, state, scans_by_id)
        for m in track.members:
            box = circle_to_box(m.detection.shape)
            hit = any(iou(box, circle_to_box(c)) >= iou_min
                      for c in shapes.get(m.scan_id, []))
            features.append(vec)
            labels.append(int(hit))
    return _fit_margin_model(features, labels)


def rescore(tracks: list[Track], states: list[TrackState],
            scans_by_id: dict[str, Scan], model: Rescorer) -> list[Track]:
    """Broadcast each track's calibrated score onto its member detections."""
    out = []
    for track, state in zip(tracks, states):
        value = model.calibrated(track_features(track, state, scans_by_id))
        members = [
            TrackMember(m.scan_id, m.frame_index,
                        replace(m.detection, score=value,
                                provenance=Provenance.RESCORED))
            for m in track.members]
        out.append(Track(track_id=track.track_id, members=members,
                         seed_detection_id=track.seed_detection_id))
    return out


@dataclass(frozen=True)
class RadiusGrowth:
    slope_mps: float
    intercept_m: float
    n_points: int


def radius_time_fit(tracks: list[Track], states: list[TrackState],
                    scans: list[Scan]) -> RadiusGrowth:
    """Pooled straight-line fit of smoothed radius (meters) against time from
    sunrise (seconds) across all member frames of all tracks."""
    scans_by_id = {s.scan_id: s for s in scans}
    ts, rs = [], []
    for track, state in zip(tracks, states):
        for m in track.members:
            scan = scans_by_id[m.scan_id]
            ts.append(scan.minutes_from_sunrise * 60.0)
            rs.append(state.at_frame(m.frame_index)[2]
                      * scan.km_per_pixel * 1000.0)
    if len(ts) < 2 or len(set(ts)) < 2:
        raise RoostkitError("radius growth fit needs at least two distinct times")
    slope, intercept = np.polyfit(np.asarray(ts), np.asarray(rs), 1)
    return RadiusGrowth(slope_mps=float(slope), intercept_m=float(intercept),
                        n_points=len(ts))
