"""On-disk formats for every pipeline artifact.

Rasters are raw little-endian float32, row major, NaN for missing, one file
per channel next to a meta.json describing the scan.  Tabular data is plain
CSV with fixed headers; detections and tracks are JSON lines with a per-record
schema_version.  All writes go through a temp file and rename so a crashed
run never leaves a half-written artifact, and all JSON is emitted with sorted
keys so repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .core import Annotation, Channel, Circle, Detection, FormatError, Product, Provenance, Scan
from .postfilter import HabitatRaster, Turbine, TurbineDb
from .stylemodel import UserStyle
from .tracker import Track, TrackMember

SCHEMA_VERSION = 1

ANNOTATION_HEADER = ["annotation_id", "scan_id", "user_id", "cx", "cy", "r"]
STYLE_HEADER = ["user_id", "beta", "phi", "sigma"]
TURBINE_HEADER = ["turbine_id", "station_id", "x_px", "y_px"]


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def read_json(path: str | Path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# -- scans -------------------------------------------------------------------

def _channel_filename(product: str, elevation_deg: float) -> str:
    return f"{product}_{elevation_deg:g}.f32"


def save_scan(scan_dir: str | Path, scan: Scan) -> None:
    scan_dir = Path(scan_dir)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "scan_id": scan.scan_id,
        "station_id": scan.station_id,
        "timestamp": scan.timestamp,
        "minutes_from_sunrise": scan.minutes_from_sunrise,
        "width": scan.width,
        "height": scan.height,
        "km_per_pixel": scan.km_per_pixel,
        "channels": [{"product": ch.product.value,
                      "elevation_deg": ch.elevation_deg}
                     for ch in scan.channels],
    }
    for ch in scan.channels:
        raw = np.ascontiguousarray(ch.values, dtype="<f4").tobytes()
        atomic_write_bytes(
            scan_dir / _channel_filename(ch.product.value, ch.elevation_deg), raw)
    write_json(scan_dir / "meta.json", meta)


def load_scan(scan_dir: str | Path) -> Scan:
    scan_dir = Path(scan_dir)
    meta_path = scan_dir / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"missing {meta_path}")
    meta = read_json(meta_path)
    width, height = int(meta["width"]), int(meta["height"])
    channels = []
    for entry in meta["channels"]:
        product = Product(entry["product"])
        elevation = float(entry["elevation_deg"])
        path = scan_dir / _channel_filename(product.value, elevation)
        if not path.exists():
            raise FormatError(f"missing channel file {path}")
        raw = path.read_bytes()
        expected = width * height * 4
        if len(raw) != expected:
            raise FormatError(
                f"{path}: expected {expected} bytes, found {len(raw)}")
        values = np.frombuffer(raw, dtype="<f4").reshape(height, width)
        channels.append(Channel(product=product, elevation_deg=elevation,
                                values=values.astype(np.float64)))
    return Scan(
        scan_id=meta["scan_id"],
        station_id=meta["station_id"],
        timestamp=float(meta["timestamp"]),
        minutes_from_sunrise=float(meta["minutes_from_sunrise"]),
        width=width,
        height=height,
        km_per_pixel=float(meta["km_per_pixel"]),
        channels=tuple(channels),
    )


def save_scans(root: str | Path, scans) -> None:
    root = Path(root)
    for scan in scans:
        save_scan(root / scan.scan_id, scan)


def load_scans(root: str | Path) -> list[Scan]:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"scan directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise FormatError(f"no scans found under {root}")
    return [load_scan(p) for p in dirs]


# -- CSV tables ---------------------------------------------------------------

def _write_csv(path: str | Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _read_csv(path: str | Path, header: list[str]) -> list[list[str]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            got = next(reader, None)
            if got != header:
                raise FormatError(
                    f"{path}: expected header {','.join(header)}, got "
                    f"{','.join(got) if got else 'empty file'}")
            return [row for row in reader if row]
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def save_annotations_csv(path: str | Path, annotations: list[Annotation]) -> None:
    _write_csv(path, ANNOTATION_HEADER,
               [[a.annotation_id, a.scan_id, a.user_id,
                 a.shape.cx, a.shape.cy, a.shape.r] for a in annotations])


def load_annotations_csv(path: str | Path) -> list[Annotation]:
    out = []
    for row in _read_csv(path, ANNOTATION_HEADER):
        if len(row) != len(ANNOTATION_HEADER):
            raise FormatError(f"{path}: bad row {row}")
        out.append(Annotation(
            annotation_id=row[0], scan_id=row[1], user_id=row[2],
            shape=Circle(float(row[3]), float(row[4]), float(row[5]))))
    return out


def save_styles_csv(path: str | Path, styles: dict[str, UserStyle]) -> None:
    rows = [[s.user_id, s.beta, s.phi, s.sigma]
            for _, s in sorted(styles.items())]
    _write_csv(path, STYLE_HEADER, rows)


def load_styles_csv(path: str | Path) -> dict[str, UserStyle]:
    styles = {}
    for row in _read_csv(path, STYLE_HEADER):
        styles[row[0]] = UserStyle(user_id=row[0], beta=float(row[1]),
                                   phi=float(row[2]), sigma=float(row[3]))
    return styles


def save_turbines_csv(path: str | Path, db: TurbineDb) -> None:
    _write_csv(path, TURBINE_HEADER,
               [[t.turbine_id, t.station_id, t.x, t.y] for t in db.turbines])


def load_turbines_csv(path: str | Path) -> TurbineDb:
    turbines = [Turbine(turbine_id=row[0], station_id=row[1],
                        x=float(row[2]), y=float(row[3]))
                for row in _read_csv(path, TURBINE_HEADER)]
    return TurbineDb(turbines=turbines)


# -- JSON lines ---------------------------------------------------------------

def _detection_record(d: Detection) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "detection_id": d.detection_id,
        "scan_id": d.scan_id,
        "cx": d.shape.cx,
        "cy": d.shape.cy,
        "r": d.shape.r,
        "score": d.score,
        "provenance": d.provenance.value,
    }


def _detection_from_record(rec: dict) -> Detection:
    return Detection(
        detection_id=rec["detection_id"], scan_id=rec["scan_id"],
        shape=Circle(float(rec["cx"]), float(rec["cy"]), float(rec["r"])),
        score=float(rec["score"]),
        provenance=Provenance(rec.get("provenance", "detector")))


def save_detections_jsonl(path: str | Path, detections: list[Detection]) -> None:
    lines = [json.dumps(_detection_record(d), sort_keys=True)
             for d in detections]
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_detections_jsonl(path: str | Path) -> list[Detection]:
    out = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    out.append(_detection_from_record(json.loads(line)))
                except (KeyError, ValueError) as exc:
                    raise FormatError(f"{path}:{line_no}: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return out


def save_tracks_jsonl(path: str | Path, tracks: list[Track]) -> None:
    lines = []
    for t in tracks:
        rec = {
            "schema_version": SCHEMA_VERSION,
            "track_id": t.track_id,
            "seed_detection_id": t.seed_detection_id,
            "members": [{"scan_id": m.scan_id,
                         "frame_index": m.frame_index,
                         "detection": _detection_record(m.detection)}
                        for m in t.members],
        }
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def load_tracks_jsonl(path: str | Path) -> list[Track]:
    tracks = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    members = [TrackMember(
                        scan_id=m["scan_id"],
                        frame_index=int(m["frame_index"]),
                        detection=_detection_from_record(m["detection"]))
                        for m in rec["members"]]
                    tracks.append(Track(track_id=rec["track_id"],
                                        members=members,
                                        seed_detection_id=rec["seed_detection_id"]))
                except (KeyError, ValueError) as exc:
                    raise FormatError(f"{path}:{line_no}: {exc}") from exc
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return tracks


# -- habitat ------------------------------------------------------------------

def save_habitat(habitat_dir: str | Path, habitat: HabitatRaster) -> None:
    habitat_dir = Path(habitat_dir)
    height, width = habitat.codes.shape
    atomic_write_bytes(habitat_dir / "codes.f32",
                       np.ascontiguousarray(habitat.codes, dtype="<f4").tobytes())
    write_json(habitat_dir / "meta.json", {
        "schema_version": SCHEMA_VERSION,
        "width": width,
        "height": height,
        "legend": {str(k): v for k, v in sorted(habitat.legend.items())},
    })


def load_habitat(habitat_dir: str | Path) -> HabitatRaster:
    habitat_dir = Path(habitat_dir)
    meta = read_json(habitat_dir / "meta.json")
    raw = (habitat_dir / "codes.f32").read_bytes()
    width, height = int(meta["width"]), int(meta["height"])
    if len(raw) != width * height * 4:
        raise FormatError(f"{habitat_dir}/codes.f32 has the wrong size")
    codes = np.frombuffer(raw, dtype="<f4").reshape(height, width).astype(float)
    legend = {int(k): v for k, v in meta.get("legend", {}).items()}
    return HabitatRaster(codes=codes, legend=legend)


# -- evaluation reports ---------------------------------------------------------

def eval_report_dict(report) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "mean_ap": report.mean_ap,
        "n_scans": report.n_scans,
        "n_detections": report.n_detections,
        "n_positives": report.n_positives,
        "stations": {
            sid: {"ap": st.ap, "n_scans": st.n_scans,
                  "n_positives": st.n_positives}
            for sid, st in sorted(report.stations.items())
        },
    }


def save_pr_curves_csv(path: str | Path, report) -> None:
    rows = []
    for sid, st in sorted(report.stations.items()):
        if st.precision is None:
            continue
        for p, r in zip(st.precision, st.recall):
            rows.append([sid, float(p), float(r)])
    _write_csv(path, ["station_id", "precision", "recall"], rows)
