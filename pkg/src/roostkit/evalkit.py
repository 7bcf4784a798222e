"""Detection evaluation: greedy matching, average precision, bootstrap spread.

Matching is per scan, greedy in descending detection score, with a strict IoU
threshold.  Annotations flagged difficult (too small to call reliably at the
reference image scale) are never counted as positives; a detection whose only
match is difficult is ignored outright so it costs neither precision nor
recall.  Per-station AP pools that station's scans into one ranking; the
summary number is the scan-count weighted mean of station APs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Annotation,
    Detection,
    RoostkitError,
    Scan,
    circle_to_box,
    iou,
    is_difficult,
)

TP, FP, IGNORED = 1, 0, -1


@dataclass
class ScanMatch:
    """Outcome of matching one scan, detections in descending score order."""

    scan_id: str
    station_id: str
    scores: np.ndarray  # (n_det,)
    flags: np.ndarray   # (n_det,) values TP / FP / IGNORED
    n_positives: int    # easy (non-difficult) annotations
    matched_pairs: list[tuple[str, str]] = field(default_factory=list)


def match_detections(detections: list[Detection], annotations: list[Annotation],
                     iou_threshold: float = 0.5,
                     difficult_ids: frozenset[str] | set[str] = frozenset(),
                     scan_id: str = "", station_id: str = "") -> ScanMatch:
    """Match one scan's detections against its annotations.

    Each detection, strongest first, consumes the unclaimed easy annotation it
    overlaps best, provided IoU strictly exceeds the threshold.  Failing that,
    sufficient overlap with a difficult annotation parks the detection as
    ignored; otherwise it is a false positive.  Difficult annotations are
    never consumed and never count as positives.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, detections[i].detection_id))
    easy = [a for a in annotations if a.annotation_id not in difficult_ids]
    hard = [a for a in annotations if a.annotation_id in difficult_ids]
    easy_boxes = [circle_to_box(a.shape) for a in easy]
    hard_boxes = [circle_to_box(a.shape) for a in hard]
    consumed = [False] * len(easy)

    scores = np.empty(len(order))
    flags = np.empty(len(order), dtype=int)
    pairs: list[tuple[str, str]] = []
    for rank, i in enumerate(order):
        det = detections[i]
        scores[rank] = det.score
        box = circle_to_box(det.shape)
        best_j, best_iou = -1, 0.0
        for j, abox in enumerate(easy_boxes):
            if consumed[j]:
                continue
            v = iou(box, abox)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou > iou_threshold:
            consumed[best_j] = True
            flags[rank] = TP
            pairs.append((det.detection_id, easy[best_j].annotation_id))
            continue
        if any(iou(box, hbox) > iou_threshold for hbox in hard_boxes):
            flags[rank] = IGNORED
            continue
        flags[rank] = FP
    return ScanMatch(scan_id=scan_id, station_id=station_id, scores=scores,
                     flags=flags, n_positives=len(easy), matched_pairs=pairs)


def average_precision(flags: np.ndarray, n_positives: int):
    """Area under the precision envelope of a score-sorted ranking.

    Ignored entries are dropped from the ranking first.  Returns
    (ap, precision, recall) where the arrays are the raw curve points.
    """
    if n_positives <= 0:
        raise RoostkitError("average precision needs at least one positive")
    flags = np.asarray(flags)
    flags = flags[flags != IGNORED]
    tp = np.cumsum(flags == TP)
    fp = np.cumsum(flags == FP)
    recall = tp / n_positives
    precision = tp / np.maximum(tp + fp, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev) * envelope))
    return ap, precision, recall


def precision_at_k(flags: np.ndarray, k: int) -> float:
    """Fraction of true positives among the top k non-ignored entries of a
    score-sorted ranking (all entries when fewer than k remain)."""
    flags = np.asarray(flags)
    flags = flags[flags != IGNORED][:k]
    if flags.size == 0:
        return 0.0
    return float((flags == TP).sum() / flags.size)


@dataclass
class StationEval:
    station_id: str
    ap: float | None
    n_scans: int
    n_positives: int
    precision: np.ndarray | None = None
    recall: np.ndarray | None = None


@dataclass
class EvalReport:
    mean_ap: float
    stations: dict[str, StationEval]
    n_scans: int
    n_detections: int
    n_positives: int


def _match_all(detections, annotations, scans, iou_threshold) -> list[ScanMatch]:
    scan_by_id = {s.scan_id: s for s in scans}
    dets_by_scan: dict[str, list[Detection]] = {s.scan_id: [] for s in scans}
    annos_by_scan: dict[str, list[Annotation]] = {s.scan_id: [] for s in scans}
    for d in detections:
        if d.scan_id not in dets_by_scan:
            raise RoostkitError(f"detection on unknown scan {d.scan_id}")
        dets_by_scan[d.scan_id].append(d)
    for a in annotations:
        if a.scan_id not in annos_by_scan:
            raise RoostkitError(f"annotation on unknown scan {a.scan_id}")
        annos_by_scan[a.scan_id].append(a)
    out = []
    for scan in scans:
        annos = annos_by_scan[scan.scan_id]
        difficult = {a.annotation_id for a in annos if is_difficult(a, scan)}
        out.append(match_detections(
            dets_by_scan[scan.scan_id], annos, iou_threshold, difficult,
            scan_id=scan.scan_id, station_id=scan.station_id))
    return out


def _pooled_station_ap(matches: list[ScanMatch]):
    """Pool scans of one station into a single ranking; ties in score break by
    (scan_id, original rank) so re-runs produce identical curves."""
    entries = []
    n_pos = 0
    for m in matches:
        n_pos += m.n_positives
        for rank in range(len(m.flags)):
            entries.append((-m.scores[rank], m.scan_id, rank, m.flags[rank]))
    if n_pos == 0:
        return None, None, None, 0
    entries.sort()
    flags = np.array([e[3] for e in entries], dtype=int) if entries else \
        np.empty(0, dtype=int)
    ap, precision, recall = average_precision(flags, n_pos)
    return ap, precision, recall, n_pos


def _mean_ap_from_matches(matches: list[ScanMatch]) -> tuple[float, dict[str, StationEval]]:
    by_station: dict[str, list[ScanMatch]] = {}
    for m in matches:
        by_station.setdefault(m.station_id, []).append(m)
    stations: dict[str, StationEval] = {}
    weighted = 0.0
    weight = 0
    for sid in sorted(by_station):
        group = by_station[sid]
        ap, precision, recall, n_pos = _pooled_station_ap(group)
        stations[sid] = StationEval(station_id=sid, ap=ap, n_scans=len(group),
                                    n_positives=n_pos, precision=precision,
                                    recall=recall)
        if ap is not None:
            weighted += ap * len(group)
            weight += len(group)
    if weight == 0:
        raise RoostkitError("no station has a positive annotation")
    return weighted / weight, stations


def evaluate(detections, annotations, scans, iou_threshold: float = 0.5) -> EvalReport:
    """Station-weighted detection evaluation over a scan corpus."""
    matches = _match_all(detections, annotations, scans, iou_threshold)
    mean_ap, stations = _mean_ap_from_matches(matches)
    return EvalReport(
        mean_ap=mean_ap,
        stations=stations,
        n_scans=len(scans),
        n_detections=len(detections),
        n_positives=sum(m.n_positives for m in matches),
    )


def user_rescale(detections: list[Detection], styles: dict,
                 user_of_scan: dict[str, str]) -> list[Detection]:
    """Scale each predicted radius by the labeling bias of the scan's
    annotator, so predictions are compared in the annotator's own units.
    Detections on scans with no known annotator pass through unchanged."""
    out = []
    for d in detections:
        user = user_of_scan.get(d.scan_id)
        style = styles.get(user) if user is not None else None
        if style is None:
            out.append(d)
            continue
        c = d.shape
        out.append(Detection(
            detection_id=d.detection_id, scan_id=d.scan_id,
            shape=type(c)(c.cx, c.cy, max(c.r * style.beta, 1e-6)),
            score=d.score, provenance=d.provenance))
    return out


def bootstrap_map(detections, annotations, scans, n_resamples: int = 20,
                  seed: int = 0, iou_threshold: float = 0.5):
    """Spread of the summary metric under scan resampling.

    Scans are drawn with replacement (duplicates count twice); per-scan match
    results are computed once and reused.  Returns (point estimate, standard
    error over resamples, per-resample values).
    """
    matches = _match_all(detections, annotations, scans, iou_threshold)
    point, _ = _mean_ap_from_matches(matches)
    children = np.random.SeedSequence(seed).spawn(n_resamples)
    values = []
    for child in children:
        rng = np.random.default_rng(child)
        picks = rng.integers(0, len(matches), size=len(matches))
        try:
            value, _ = _mean_ap_from_matches([matches[i] for i in picks])
        except RoostkitError:
            continue  # a resample can miss every positive scan
        values.append(value)
    values_arr = np.asarray(values)
    stderr = float(values_arr.std(ddof=1)) if len(values_arr) > 1 else float("nan")
    return point, stderr, values_arr
