"""Command line front end for the full pipeline.

Commands read and write only documented on-disk formats, so any stage can be
swapped for another tool.  Failures print a single JSON object on stderr and
exit nonzero so wrapping scripts can branch on the error type without parsing
prose.  Outputs are deterministic for identical inputs; only the provenance
sidecar files (timestamps, library versions) differ between reruns.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import provenance_record
from .core import Detection, FormatError, Product, RoostkitError
from .detector import DetectorConfig, RingDetector
from .evalkit import bootstrap_map, evaluate, user_rescale
from .formats import (
    eval_report_dict,
    load_annotations_csv,
    load_detections_jsonl,
    load_habitat,
    load_scans,
    load_styles_csv,
    load_tracks_jsonl,
    load_turbines_csv,
    read_json,
    save_annotations_csv,
    save_detections_jsonl,
    save_pr_curves_csv,
    save_scans,
    save_styles_csv,
    save_tracks_jsonl,
    save_turbines_csv,
    write_json,
)
from .postfilter import FilterPolicy, filter_tracks, habitat_class
from .stylemodel import impute_labels, raw_labels, run_em
from .synth import AnnotatorSpec, SceneSpec, corpus_manifest, generate_corpus
from .tracker import (
    Track,
    TrackerConfig,
    associate,
    fit_lds,
    radius_time_fit,
    rescore,
    retain_mature,
    smooth,
    train_rescorer,
)


def _fail(exc: Exception) -> None:
    payload = {"error": {"type": type(exc).__name__, "message": str(exc)}}
    click.echo(json.dumps(payload), err=True)
    sys.exit(1)


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (RoostkitError, FormatError, OSError, ValueError) as exc:
            _fail(exc)
    return wrapper


def _write_provenance(path: Path, command: str, config: dict,
                      seed: int | None = None) -> None:
    write_json(path, provenance_record(command, config, seed))


def _sequences(scans):
    """Scans grouped per station, each group in time order."""
    groups: dict[str, list] = {}
    for scan in scans:
        groups.setdefault(scan.station_id, []).append(scan)
    for group in groups.values():
        group.sort(key=lambda s: (s.timestamp, s.scan_id))
    return dict(sorted(groups.items()))


@click.group()
@click.version_option(__version__)
def main():
    """Detect, track and screen expanding-ring roost signatures in radar scans."""


def _parse_annotator(text: str) -> AnnotatorSpec:
    """Parse 'user_id:beta=1.0,sigma=1.0[,coverage=..][,offset=..]'."""
    if ":" not in text:
        raise RoostkitError(f"bad annotator spec {text!r}")
    user, _, rest = text.partition(":")
    fields = {"beta": 1.0, "sigma": 1.0, "coverage": 1.0, "offset": 0.0}
    if rest:
        for item in rest.split(","):
            key, _, value = item.partition("=")
            if key not in fields or not value:
                raise RoostkitError(f"bad annotator field {item!r} in {text!r}")
            fields[key] = float(value)
    return AnnotatorSpec(user_id=user, beta_true=fields["beta"],
                         sigma_true=fields["sigma"],
                         coverage=fields["coverage"],
                         additive_offset=fields["offset"])


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--sequences", default=4, show_default=True, type=int)
@click.option("--frames", default=8, show_default=True, type=int)
@click.option("--annotator", "annotators", multiple=True,
              help="user:beta=..,sigma=..[,coverage=..][,offset=..]; repeatable.")
@click.option("--width", default=200, show_default=True, type=int)
@click.option("--height", default=200, show_default=True, type=int)
@click.option("--roosts", default=2, show_default=True, type=int)
@click.option("--rain", default=0, show_default=True, type=int)
@click.option("--windfarms", default=0, show_default=True, type=int)
@click.option("--transients", default=0, show_default=True, type=int)
@handle_errors
def synth(out_dir, seed, sequences, frames, annotators, width, height,
          roosts, rain, windfarms, transients):
    """Generate a synthetic labeled corpus with known ground truth."""
    specs = [_parse_annotator(a) for a in annotators] or \
        [AnnotatorSpec(user_id="u000", beta_true=1.0, sigma_true=1.0)]
    scene = SceneSpec(seed=seed, width=width, height=height,
                      roost_count=roosts, rain_count=rain,
                      windfarm_count=windfarms, transient_count=transients)
    corpus = generate_corpus(scene, specs, sequences, frames)
    out = Path(out_dir)
    save_scans(out / "scans", corpus.scans)
    save_annotations_csv(out / "annotations.csv", corpus.annotations)
    save_turbines_csv(out / "turbines.csv", corpus.turbine_db)
    write_json(out / "manifest.json", corpus_manifest(corpus))
    config = {"seed": seed, "sequences": sequences, "frames": frames,
              "annotators": list(annotators), "width": width, "height": height,
              "roosts": roosts, "rain": rain, "windfarms": windfarms,
              "transients": transients}
    _write_provenance(out / "provenance.json", "synth", config, seed)
    click.echo(f"wrote {len(corpus.scans)} scans, "
               f"{len(corpus.annotations)} annotations to {out}")


@main.command()
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--annotations", "annotations_path", required=True,
              type=click.Path(exists=True))
@click.option("--styles", "styles_path", type=click.Path(exists=True),
              help="Apply these label styles to radii before training.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--stride", default=8, show_default=True, type=int)
@handle_errors
def train(scans_dir, annotations_path, styles_path, out_path, stride):
    """Fit the ring detector on annotated scans."""
    scans = load_scans(scans_dir)
    annotations = load_annotations_csv(annotations_path)
    if styles_path:
        styles = load_styles_csv(styles_path)
        labels = impute_labels(annotations, styles)
    else:
        labels = raw_labels(annotations)
    detector = RingDetector(DetectorConfig(stride=stride))
    detector.warm_cache(scans)
    detector.fit(scans, labels)
    write_json(out_path, detector.to_dict())
    config = {"stride": stride, "styles": bool(styles_path)}
    _write_provenance(Path(out_path).with_suffix(".provenance.json"),
                      "train", config)
    click.echo(f"trained detector on {len(scans)} scans -> {out_path}")


@main.command()
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--annotations", "annotations_path", required=True,
              type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--rounds", default=2, show_default=True, type=int)
@click.option("--impute", default="map", show_default=True,
              type=click.Choice(["map", "sample"]))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--stride", default=8, show_default=True, type=int)
@handle_errors
def em(scans_dir, annotations_path, out_dir, rounds, impute, seed, stride):
    """Learn per-annotator label styles jointly with the detector."""
    scans = load_scans(scans_dir)
    annotations = load_annotations_csv(annotations_path)
    detector = RingDetector(DetectorConfig(stride=stride))
    detector.warm_cache(scans)
    result = run_em(detector, scans, annotations, rounds=rounds,
                    impute=impute, seed=seed)
    out = Path(out_dir)
    write_json(out / "detector.json", result.detector.to_dict())
    save_styles_csv(out / "styles.csv", result.styles)
    history = [{
        "round": h.round_index,
        "train_loss": h.train_loss,
        "objectives": h.objectives,
        "styles": {u: {"beta": s.beta, "phi": s.phi, "sigma": s.sigma}
                   for u, s in sorted(h.styles.items())},
    } for h in result.history]
    write_json(out / "history.json", history)
    config = {"rounds": rounds, "impute": impute, "stride": stride}
    _write_provenance(out / "provenance.json", "em", config, seed)
    click.echo(f"ran {rounds} rounds over {len(annotations)} annotations -> {out}")


@main.command()
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--detector", "detector_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--top-k", type=int, default=None,
              help="Keep at most this many detections per scan.")
@handle_errors
def detect(scans_dir, detector_path, out_path, top_k):
    """Run a trained detector over scans."""
    scans = load_scans(scans_dir)
    detector = RingDetector.from_dict(read_json(detector_path))
    detector.warm_cache(scans)
    detections = []
    for scan in scans:
        detections.extend(detector.detect(scan, top_k=top_k))
    save_detections_jsonl(out_path, detections)
    config = {"detector": Path(detector_path).name, "top_k": top_k}
    _write_provenance(Path(out_path).with_suffix(".provenance.json"),
                      "detect", config)
    click.echo(f"{len(detections)} detections over {len(scans)} scans -> {out_path}")


@main.command()
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--detections", "detections_path", required=True,
              type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed-score-min", default=0.5, show_default=True, type=float)
@click.option("--link-iou-min", default=0.2, show_default=True, type=float)
@click.option("--max-gap", default=2, show_default=True, type=int)
@click.option("--retain/--no-retain", default=True, show_default=True,
              help="Keep only tracks with enough confident members.")
@click.option("--retain-min-members", default=2, show_default=True, type=int)
@click.option("--retain-min-score", default=0.7, show_default=True, type=float)
@handle_errors
def track(scans_dir, detections_path, out_path, seed_score_min, link_iou_min,
          max_gap, retain, retain_min_members, retain_min_score):
    """Associate detections into tracks, one sequence per station."""
    scans = load_scans(scans_dir)
    detections = load_detections_jsonl(detections_path)
    config = TrackerConfig(seed_score_min=seed_score_min,
                           link_iou_min=link_iou_min, max_frame_gap=max_gap)
    dets_by_scan: dict[str, list[Detection]] = {}
    for d in detections:
        dets_by_scan.setdefault(d.scan_id, []).append(d)
    tracks: list[Track] = []
    for station, group in _sequences(scans).items():
        frames = [dets_by_scan.get(s.scan_id, []) for s in group]
        tracks.extend(associate(frames, config, id_prefix=f"{station}_t"))
    if retain:
        tracks = retain_mature(tracks, retain_min_members, retain_min_score)
    save_tracks_jsonl(out_path, tracks)
    cfg = {"seed_score_min": seed_score_min, "link_iou_min": link_iou_min,
           "max_gap": max_gap, "retain": retain,
           "retain_min_members": retain_min_members,
           "retain_min_score": retain_min_score}
    _write_provenance(Path(out_path).with_suffix(".provenance.json"),
                      "track", cfg)
    click.echo(f"{len(tracks)} tracks from {len(detections)} detections -> {out_path}")


@main.command()
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--tracks", "tracks_path", required=True, type=click.Path(exists=True))
@click.option("--annotations", "annotations_path", required=True,
              type=click.Path(exists=True),
              help="Supervision for the track classifier.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--model-out", "model_path", type=click.Path(), default=None)
@handle_errors
def rescore_cmd(scans_dir, tracks_path, annotations_path, out_path, model_path):
    """Smooth tracks and replace member scores with whole-track scores."""
    scans = load_scans(scans_dir)
    tracks = load_tracks_jsonl(tracks_path)
    annotations = load_annotations_csv(annotations_path)
    if not tracks:
        raise RoostkitError("no tracks to rescore")
    scans_by_id = {s.scan_id: s for s in scans}
    params = fit_lds(tracks)
    states = [smooth(t, params) for t in tracks]
    model = train_rescorer(tracks, states, scans_by_id, annotations)
    rescored = rescore(tracks, states, scans_by_id, model)
    save_tracks_jsonl(out_path, rescored)
    if model_path:
        write_json(model_path, model.to_dict())
    _write_provenance(Path(out_path).with_suffix(".provenance.json"),
                      "rescore", {"n_tracks": len(tracks)})
    click.echo(f"rescored {len(tracks)} tracks -> {out_path}")


main.add_command(rescore_cmd, name="rescore")


@main.command(name="filter")
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--tracks", "tracks_path", required=True, type=click.Path(exists=True))
@click.option("--turbines", "turbines_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--removed-out", "removed_path", type=click.Path(), default=None)
@click.option("--rain-threshold", default=0.95, show_default=True, type=float)
@handle_errors
def filter_cmd(scans_dir, tracks_path, turbines_path, out_path, removed_path,
               rain_threshold):
    """Drop rain and wind-farm tracks."""
    scans = load_scans(scans_dir)
    tracks = load_tracks_jsonl(tracks_path)
    turbines = load_turbines_csv(turbines_path) if turbines_path else None
    policy = FilterPolicy(rain_rho_threshold=rain_threshold)
    kept, removed = filter_tracks(tracks, scans, turbines, policy)
    save_tracks_jsonl(out_path, kept)
    if removed_path:
        write_json(removed_path, [{"track_id": tid, "reason": why}
                                  for tid, why in removed])
    _write_provenance(Path(out_path).with_suffix(".provenance.json"),
                      "filter", {"rain_threshold": rain_threshold,
                                 "turbines": bool(turbines_path)})
    click.echo(f"kept {len(kept)} of {len(tracks)} tracks -> {out_path}")


@main.command(name="eval")
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--annotations", "annotations_path", required=True,
              type=click.Path(exists=True))
@click.option("--detections", "detections_path", type=click.Path(exists=True))
@click.option("--tracks", "tracks_path", type=click.Path(exists=True))
@click.option("--styles", "styles_path", type=click.Path(exists=True))
@click.option("--rescale-by-user", is_flag=True,
              help="Scale predicted radii by each scan annotator's style.")
@click.option("--bootstrap", "n_bootstrap", default=0, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--pr-csv", "pr_path", type=click.Path(), default=None)
@handle_errors
def eval_cmd(scans_dir, annotations_path, detections_path, tracks_path,
             styles_path, rescale_by_user, n_bootstrap, seed, out_path, pr_path):
    """Score detections (or track members) against annotations."""
    if bool(detections_path) == bool(tracks_path):
        raise RoostkitError("pass exactly one of --detections or --tracks")
    scans = load_scans(scans_dir)
    annotations = load_annotations_csv(annotations_path)
    if detections_path:
        detections = load_detections_jsonl(detections_path)
    else:
        detections = [m.detection for t in load_tracks_jsonl(tracks_path)
                      for m in t.members]
    if rescale_by_user:
        if not styles_path:
            raise RoostkitError("--rescale-by-user needs --styles")
        styles = load_styles_csv(styles_path)
        user_of_scan = {a.scan_id: a.user_id for a in sorted(
            annotations, key=lambda a: a.annotation_id)}
        detections = user_rescale(detections, styles, user_of_scan)
    report = evaluate(detections, annotations, scans)
    blob = eval_report_dict(report)
    if n_bootstrap > 0:
        point, stderr, values = bootstrap_map(
            detections, annotations, scans, n_resamples=n_bootstrap, seed=seed)
        blob["bootstrap"] = {"n_resamples": n_bootstrap, "point": point,
                             "stderr": stderr, "values": values.tolist()}
    write_json(out_path, blob)
    if pr_path:
        save_pr_curves_csv(pr_path, report)
    _write_provenance(Path(out_path).with_suffix(".provenance.json"), "eval",
                      {"rescale_by_user": rescale_by_user,
                       "bootstrap": n_bootstrap}, seed)
    click.echo(f"mean AP {report.mean_ap:.4f} over "
               f"{report.n_scans} scans -> {out_path}")


@main.command()
@click.option("--scans", "scans_dir", required=True, type=click.Path(exists=True))
@click.option("--tracks", "tracks_path", required=True, type=click.Path(exists=True))
@click.option("--habitat", "habitat_dir", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--retain-min-members", default=2, show_default=True, type=int)
@click.option("--retain-min-score", default=0.7, show_default=True, type=float)
@handle_errors
def analyze(scans_dir, tracks_path, habitat_dir, out_path,
            retain_min_members, retain_min_score):
    """Rank retained tracks and fit the pooled radius growth rate."""
    scans = load_scans(scans_dir)
    tracks = load_tracks_jsonl(tracks_path)
    retained = retain_mature(tracks, retain_min_members, retain_min_score)
    retained.sort(key=lambda t: (-t.score, t.track_id))
    habitat = load_habitat(habitat_dir) if habitat_dir else None
    scans_by_id = {s.scan_id: s for s in scans}

    ranking = []
    for t in retained:
        first = t.members[0]
        entry = {
            "track_id": t.track_id,
            "score_sum": t.score,
            "n_members": len(t.members),
            "station_id": scans_by_id[first.scan_id].station_id,
            "first_scan_id": first.scan_id,
        }
        if habitat is not None:
            last = t.members[-1]
            entry["habitat_class"] = habitat_class(
                last.detection, habitat,
                km_per_pixel=scans_by_id[last.scan_id].km_per_pixel)
        ranking.append(entry)

    blob = {
        "schema_version": 1,
        "n_tracks": len(tracks),
        "n_retained": len(retained),
        "ranking": ranking,
    }
    if retained:
        params = fit_lds(retained)
        states = [smooth(t, params) for t in retained]
        try:
            growth = radius_time_fit(retained, states, scans)
            blob["radius_growth"] = {"slope_mps": growth.slope_mps,
                                     "intercept_m": growth.intercept_m,
                                     "n_points": growth.n_points}
        except RoostkitError:
            pass
    write_json(out_path, blob)
    _write_provenance(Path(out_path).with_suffix(".provenance.json"),
                      "analyze", {"retain_min_members": retain_min_members,
                                  "retain_min_score": retain_min_score})
    click.echo(f"retained {len(retained)} of {len(tracks)} tracks -> {out_path}")


if __name__ == "__main__":
    main()
