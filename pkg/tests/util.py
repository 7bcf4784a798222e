"""Shared helpers for the test suite."""

from roostkit.core import Circle, Detection, Scan, circle_to_box, iou
from roostkit.tracker import Track, TrackMember, TrackerConfig, associate

# One verdict line per acceptance criterion, echoed in the terminal summary
# (see conftest.pytest_terminal_summary).
ACCEPTANCE_LINES: list[str] = []


def report_criterion(num: int, name: str, ok: bool, detail: str = "") -> None:
    """Record a pass/fail verdict for one acceptance criterion and assert it."""
    line = f"criterion {num:2d} {name}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def bare_scan(scan_id, minutes, timestamp=None, km_per_pixel=0.25, station="S000"):
    """Metadata-only scan for tracker tests; no channels needed there."""
    return Scan(scan_id=scan_id, station_id=station,
                timestamp=60.0 * minutes if timestamp is None else timestamp,
                minutes_from_sunrise=minutes, width=200, height=200,
                km_per_pixel=km_per_pixel, channels=())


def make_track(track_id, frames, centers, radii, scores=None, scan_ids=None):
    """Track from parallel lists; scan ids default to <track_id>_s<frame>."""
    members = []
    for i, f in enumerate(frames):
        sid = scan_ids[i] if scan_ids is not None else f"{track_id}_s{f}"
        score = 0.9 if scores is None else scores[i]
        det = Detection(f"{track_id}_d{i}", sid,
                        Circle(centers[i][0], centers[i][1], radii[i]), score)
        members.append(TrackMember(sid, f, det))
    return Track(track_id, members, members[0].detection.detection_id)


def scans_by_station(corpus):
    out = {}
    for s in corpus.scans:
        out.setdefault(s.station_id, []).append(s)
    for seq in out.values():
        seq.sort(key=lambda s: s.timestamp)
    return out


def detector_tracks(corpus, detector, config=None):
    """Run detect + associate over every station sequence."""
    tracks = []
    for st, scans in sorted(scans_by_station(corpus).items()):
        frames = [detector.detect(s) for s in scans]
        tracks.extend(associate(frames, config or TrackerConfig(),
                                id_prefix=f"{st}_t"))
    return tracks


def true_label_tracks(corpus):
    """One track per planted object, members taken straight from true labels.

    Objects are identified across frames by center proximity, which is
    unambiguous because the generator keeps planted objects well separated.
    """
    labels = corpus.labels_by_scan()
    tracks = []
    for st, scans in sorted(scans_by_station(corpus).items()):
        open_tracks = []
        for k, scan in enumerate(scans):
            for j, c in enumerate(labels.get(scan.scan_id, [])):
                det = Detection(f"{scan.scan_id}_g{j}", scan.scan_id, c, 1.0)
                home = None
                for t in open_tracks:
                    last = t.members[-1]
                    lc = last.detection.shape
                    if (last.frame_index == k - 1
                            and abs(lc.cx - c.cx) < 10 and abs(lc.cy - c.cy) < 10):
                        home = t
                if home is None:
                    tid = f"{st}_true{len(tracks):03d}"
                    t = Track(tid, [TrackMember(scan.scan_id, k, det)],
                              det.detection_id)
                    open_tracks.append(t)
                    tracks.append(t)
                else:
                    home.members.append(TrackMember(scan.scan_id, k, det))
    return tracks


def track_is_roost(track, labels_by_scan, iou_cut=0.5):
    """Majority of members overlap a true label."""
    hits = 0
    for m in track.members:
        box = circle_to_box(m.detection.shape)
        if any(iou(box, circle_to_box(c)) > iou_cut
               for c in labels_by_scan.get(m.scan_id, [])):
            hits += 1
    return hits > 0.5 * len(track.members)
