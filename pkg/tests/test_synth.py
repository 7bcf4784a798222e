"""Scene generator: determinism, planted-object geometry, label corruption."""

import numpy as np
import pytest

from roostkit import (
    AnnotatorSpec,
    Product,
    SceneSpec,
    corpus_manifest,
    generate_corpus,
)
from roostkit.synth import RHO_RAIN_MIN, RHO_ROOST_MAX


def _tiny(seed=5, **kw):
    return generate_corpus(
        SceneSpec(seed=seed, **kw), [AnnotatorSpec("u0", 1.0, 0.0)], 2, 6)


def test_rejects_empty_annotator_list():
    with pytest.raises(ValueError):
        generate_corpus(SceneSpec(seed=1), [], 1, 3)


def test_annotator_spec_validation():
    with pytest.raises(ValueError):
        AnnotatorSpec("u", 0.05, 0.0)  # scale below the allowed range
    with pytest.raises(ValueError):
        AnnotatorSpec("u", 1.0, -1.0)
    with pytest.raises(ValueError):
        AnnotatorSpec("u", 1.0, 0.0, coverage=0.0)


def test_scene_spec_validation():
    with pytest.raises(ValueError, match="km_per_pixel"):
        SceneSpec(seed=1, km_per_pixel=0.0)
    with pytest.raises(ValueError, match="r_max_px"):
        SceneSpec(seed=1, r_max_px=-1.0)


def test_growth_rate_unit_conversion():
    # 6.61 m/s at 250 m per pixel
    assert SceneSpec(seed=1).growth_px_per_s == pytest.approx(0.02644)


def test_deterministic_regeneration():
    a = _tiny(seed=9, rain_count=1, windfarm_count=1, transient_count=1)
    b = _tiny(seed=9, rain_count=1, windfarm_count=1, transient_count=1)
    assert [s.scan_id for s in a.scans] == [s.scan_id for s in b.scans]
    for sa, sb in zip(a.scans, b.scans):
        for ca, cb in zip(sa.channels, sb.channels):
            np.testing.assert_array_equal(ca.values, cb.values)
    assert a.annotations == b.annotations
    assert a.true_labels == b.true_labels


def test_scan_structure_and_timing():
    corpus = _tiny(seed=3)
    assert len(corpus.scans) == 12
    first = corpus.scans[0]
    assert first.scan_id == "S000_f00"
    assert first.station_id == "S000"
    assert first.minutes_from_sunrise == pytest.approx(-25.0)
    assert corpus.scans[1].minutes_from_sunrise == pytest.approx(-20.0)
    assert corpus.scans[1].timestamp - first.timestamp == pytest.approx(300.0)
    names = [ch.name for ch in first.channels]
    assert names == ["reflectivity_0.5", "radial_velocity_0.5",
                     "reflectivity_1.5", "rho_hv_0.5"]


def test_round_robin_annotator_assignment():
    ann = [AnnotatorSpec("a", 1.0, 0.0), AnnotatorSpec("b", 1.0, 0.0)]
    corpus = generate_corpus(SceneSpec(seed=4), ann, 3, 2)
    users = {s.station_id: corpus.user_of_scan[s.scan_id] for s in corpus.scans}
    assert users == {"S000": "a", "S001": "b", "S002": "a"}


def test_roost_growth_between_frames():
    corpus = _tiny(seed=7)
    spec = corpus.spec
    step = spec.growth_px_per_s * spec.scan_interval_min * 60.0
    by_scan = corpus.labels_by_scan()
    checked = 0
    for seq_scans in (corpus.scans[:6], corpus.scans[6:]):
        for prev, cur in zip(seq_scans, seq_scans[1:]):
            for c0 in by_scan[prev.scan_id]:
                # same object = nearest center; drift is under a pixel per frame
                match = [c1 for c1 in by_scan[cur.scan_id]
                         if np.hypot(c1.cx - c0.cx, c1.cy - c0.cy) < 5.0]
                if not match:
                    continue  # object hit r_max and vanished
                assert match[0].r - c0.r == pytest.approx(step, abs=1e-9)
                checked += 1
    assert checked >= 8
    for labels in corpus.true_labels:
        for c in labels:
            assert spec.r0_px <= c.r <= spec.r_max_px


def test_noiseless_scale_annotator_is_exact():
    ann = [AnnotatorSpec("half", 0.5, 0.0)]
    corpus = generate_corpus(SceneSpec(seed=8), ann, 2, 5)
    by_scan = corpus.labels_by_scan()
    assert corpus.annotations  # scenes at these sizes always plant visible roosts
    for a in corpus.annotations:
        truth = [c for c in by_scan[a.scan_id]
                 if (c.cx, c.cy) == (a.shape.cx, a.shape.cy)]
        assert len(truth) == 1
        assert a.shape.r == pytest.approx(0.5 * truth[0].r)
    # full coverage: one annotation per visible label
    assert len(corpus.annotations) == sum(len(v) for v in corpus.true_labels)


def test_additive_offset_mode():
    ann = [AnnotatorSpec("off", 1.0, 0.0, additive_offset=3.0)]
    corpus = generate_corpus(SceneSpec(seed=8), ann, 1, 4)
    by_scan = corpus.labels_by_scan()
    for a in corpus.annotations:
        truth = by_scan[a.scan_id][0] if len(by_scan[a.scan_id]) == 1 else None
        match = [c for c in by_scan[a.scan_id]
                 if (c.cx, c.cy) == (a.shape.cx, a.shape.cy)]
        assert a.shape.r == pytest.approx(match[0].r + 3.0)


def test_rho_hv_separates_planted_categories():
    corpus = _tiny(seed=12, rain_count=1, roost_count=1)
    by_scan = corpus.labels_by_scan()
    hit = False
    for scan in corpus.scans:
        rho = scan.channel(Product.RHO_HV).values
        h, w = rho.shape
        yy, xx = np.mgrid[0:h, 0:w]
        for cx, cy, sigma in corpus.rain_regions.get(scan.scan_id, []):
            core = np.hypot(xx + 0.5 - cx, yy + 0.5 - cy) < 0.5 * sigma
            vals = rho[core]
            vals = vals[np.isfinite(vals)]
            if len(vals):
                assert np.nanmin(vals) >= RHO_RAIN_MIN
                hit = True
        for c in by_scan[scan.scan_id]:
            inside = np.hypot(xx + 0.5 - c.cx, yy + 0.5 - c.cy) < 0.8 * c.r
            vals = rho[inside]
            vals = vals[np.isfinite(vals)]
            if len(vals):
                assert vals.max() <= RHO_ROOST_MAX + 1e-6
    assert hit


def test_range_mask_nans_corners():
    masked = _tiny(seed=6)
    refl = masked.scans[0].channel(Product.REFLECTIVITY).values
    assert np.isnan(refl[0, 0]) and np.isnan(refl[-1, -1])
    assert np.isfinite(refl[refl.shape[0] // 2, refl.shape[1] // 2])
    full = _tiny(seed=6, range_mask=False)
    assert np.isfinite(full.scans[0].channel(Product.REFLECTIVITY).values).all()


def test_turbine_db_and_regions():
    corpus = _tiny(seed=15, windfarm_count=1, roost_count=1)
    assert len(corpus.turbine_db) == 2 * corpus.spec.turbines_per_farm
    for station in ("S000", "S001"):
        points = corpus.turbine_db.for_station(station)
        assert len(points) == corpus.spec.turbines_per_farm
        assert all(t.turbine_id.startswith(f"{station}_wt") for t in points)
    # every frame of a farm sequence carries the farm region
    farm_scans = [s for s in corpus.scans if s.scan_id in corpus.windfarm_regions]
    assert len(farm_scans) == len(corpus.scans)


def test_transients_are_single_frame():
    corpus = _tiny(seed=21, transient_count=2, roost_count=1)
    per_station: dict[str, int] = {}
    for scan_id, items in corpus.transient_regions.items():
        station = scan_id.split("_")[0]
        per_station[station] = per_station.get(station, 0) + len(items)
    assert per_station and all(n <= 2 for n in per_station.values())
    # a given center shows up in exactly one frame
    seen: dict[tuple, list[str]] = {}
    for scan_id, items in corpus.transient_regions.items():
        for tx, ty, _ in items:
            seen.setdefault((round(tx, 3), round(ty, 3)), []).append(scan_id)
    assert all(len(v) == 1 for v in seen.values())


def test_manifest_summarizes_hidden_answers():
    corpus = _tiny(seed=30)
    m = corpus_manifest(corpus)
    assert m["seed"] == 30
    assert m["n_sequences"] == 2
    assert m["n_roost_objects"] == corpus.n_roost_objects
    assert m["annotators"][0]["user_id"] == "u0"
