"""On-disk formats and the command line front end."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from roostkit import (
    Annotation,
    Channel,
    Circle,
    Detection,
    FormatError,
    HabitatRaster,
    Product,
    Provenance,
    Scan,
    Turbine,
    TurbineDb,
    UserStyle,
)
from roostkit.cli import _parse_annotator, main
from roostkit.formats import (
    atomic_write_text,
    load_annotations_csv,
    load_detections_jsonl,
    load_habitat,
    load_scan,
    load_scans,
    load_styles_csv,
    load_tracks_jsonl,
    load_turbines_csv,
    save_annotations_csv,
    save_detections_jsonl,
    save_habitat,
    save_scan,
    save_styles_csv,
    save_tracks_jsonl,
    save_turbines_csv,
)

from util import make_track


def _demo_scan():
    rng = np.random.default_rng(1)
    refl = rng.normal(2.0, 1.0, (24, 24)).astype(np.float32)
    refl[0, :4] = np.nan
    rho = rng.uniform(0.4, 0.9, (24, 24)).astype(np.float32)
    return Scan(scan_id="S000_f00", station_id="S000", timestamp=1234.5,
                minutes_from_sunrise=-10.0, width=24, height=24,
                km_per_pixel=0.25,
                channels=(Channel(Product.REFLECTIVITY, 0.5, refl),
                          Channel(Product.RHO_HV, 0.5, rho)))


class TestScanIo:
    def test_round_trip(self, tmp_path):
        scan = _demo_scan()
        save_scan(tmp_path / "s0", scan)
        back = load_scan(tmp_path / "s0")
        assert back.scan_id == scan.scan_id
        assert back.timestamp == scan.timestamp
        assert back.minutes_from_sunrise == scan.minutes_from_sunrise
        assert back.km_per_pixel == scan.km_per_pixel
        assert [c.name for c in back.channels] == [c.name for c in scan.channels]
        for a, b in zip(scan.channels, back.channels):
            np.testing.assert_array_equal(a.values, b.values.astype(np.float32))

    def test_missing_meta_raises(self, tmp_path):
        with pytest.raises(FormatError, match="meta.json"):
            load_scan(tmp_path / "nothing")

    def test_truncated_channel_raises(self, tmp_path):
        save_scan(tmp_path / "s0", _demo_scan())
        victim = tmp_path / "s0" / "reflectivity_0.5.f32"
        victim.write_bytes(victim.read_bytes()[:100])
        with pytest.raises(FormatError, match="expected"):
            load_scan(tmp_path / "s0")

    def test_load_scans_requires_content(self, tmp_path):
        with pytest.raises(FormatError, match="does not exist"):
            load_scans(tmp_path / "missing")
        (tmp_path / "empty").mkdir()
        with pytest.raises(FormatError, match="no scans"):
            load_scans(tmp_path / "empty")


class TestCsvTables:
    def test_annotations_round_trip(self, tmp_path):
        anns = [Annotation("a0", "s0", "u0", Circle(10.5, 20.25, 6.0)),
                Annotation("a1", "s1", "u1", Circle(30.0, 40.0, 12.5))]
        path = tmp_path / "ann.csv"
        save_annotations_csv(path, anns)
        assert load_annotations_csv(path) == anns

    def test_header_is_validated(self, tmp_path):
        path = tmp_path / "bad.csv"
        atomic_write_text(path, "wrong,header\n1,2\n")
        with pytest.raises(FormatError, match="expected header"):
            load_annotations_csv(path)

    def test_styles_round_trip_sorted(self, tmp_path):
        styles = {"zed": UserStyle("zed", 1.2, 0.83, 0.7),
                  "abe": UserStyle("abe", 0.9, 1.11, 0.5)}
        path = tmp_path / "styles.csv"
        save_styles_csv(path, styles)
        assert path.read_text().splitlines()[1].startswith("abe")
        back = load_styles_csv(path)
        assert back == styles

    def test_turbines_round_trip(self, tmp_path):
        db = TurbineDb([Turbine("S000_wt000", "S000", 12.5, 80.0)])
        path = tmp_path / "turbines.csv"
        save_turbines_csv(path, db)
        assert load_turbines_csv(path).turbines == db.turbines


class TestJsonl:
    def test_detections_round_trip(self, tmp_path):
        dets = [Detection("d0", "s0", Circle(10.0, 20.0, 6.0), 0.9),
                Detection("d1", "s0", Circle(30.0, 40.0, 8.0), 0.42,
                          Provenance.RESCORED)]
        path = tmp_path / "d.jsonl"
        save_detections_jsonl(path, dets)
        back = load_detections_jsonl(path)
        assert back == dets
        assert back[1].provenance is Provenance.RESCORED

    def test_empty_detections_file(self, tmp_path):
        path = tmp_path / "d.jsonl"
        save_detections_jsonl(path, [])
        assert path.read_text() == ""
        assert load_detections_jsonl(path) == []

    def test_malformed_line_reports_position(self, tmp_path):
        path = tmp_path / "d.jsonl"
        atomic_write_text(path, '{"detection_id": "d0"}\n')
        with pytest.raises(FormatError, match=":1:"):
            load_detections_jsonl(path)

    def test_tracks_round_trip(self, tmp_path):
        tracks = [make_track("t0", [0, 1], [(10.0, 10.0), (11.0, 10.0)],
                             [5.0, 5.5], scores=[0.9, 0.8])]
        path = tmp_path / "t.jsonl"
        save_tracks_jsonl(path, tracks)
        back = load_tracks_jsonl(path)
        assert back == tracks


class TestHabitatIo:
    def test_round_trip(self, tmp_path):
        codes = np.zeros((10, 12))
        codes[2:, :] = 4.0
        codes[0, 0] = np.nan
        hab = HabitatRaster(codes=codes, legend={0: "water", 4: "crops"})
        save_habitat(tmp_path / "hab", hab)
        back = load_habitat(tmp_path / "hab")
        np.testing.assert_array_equal(
            np.isnan(back.codes), np.isnan(codes))
        assert back.codes[3, 3] == 4.0
        assert back.legend == hab.legend

    def test_size_mismatch_raises(self, tmp_path):
        save_habitat(tmp_path / "hab", HabitatRaster(codes=np.zeros((4, 4))))
        (tmp_path / "hab" / "codes.f32").write_bytes(b"\0" * 8)
        with pytest.raises(FormatError, match="wrong size"):
            load_habitat(tmp_path / "hab")


class TestAnnotatorSpecParsing:
    def test_full_form(self):
        spec = _parse_annotator("u1:beta=0.8,sigma=0.5,coverage=0.9,offset=2.0")
        assert (spec.user_id, spec.beta_true, spec.sigma_true) == ("u1", 0.8, 0.5)
        assert (spec.coverage, spec.additive_offset) == (0.9, 2.0)

    def test_defaults_and_errors(self):
        spec = _parse_annotator("u2:")
        assert (spec.beta_true, spec.sigma_true) == (1.0, 1.0)
        from roostkit import RoostkitError
        with pytest.raises(RoostkitError):
            _parse_annotator("nosep")
        with pytest.raises(RoostkitError):
            _parse_annotator("u:bogus=1")


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    """A small generated corpus plus a trained detector, shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = runner.invoke(main, ["synth", "--out", str(root / "data"),
                             "--seed", "13", "--sequences", "2", "--frames", "5",
                             "--roosts", "1",
                             "--annotator", "u_a:beta=1.0,sigma=0.3"])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["train",
                             "--scans", str(root / "data" / "scans"),
                             "--annotations", str(root / "data" / "annotations.csv"),
                             "--out", str(root / "detector.json")])
    assert r.exit_code == 0, r.output
    return root


class TestCli:
    def test_synth_layout(self, cli_corpus):
        data = cli_corpus / "data"
        assert (data / "annotations.csv").exists()
        assert (data / "turbines.csv").exists()
        assert (data / "manifest.json").exists()
        assert (data / "provenance.json").exists()
        scans = load_scans(data / "scans")
        assert len(scans) == 10
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["seed"] == 13

    def test_detect_track_analyze_chain(self, cli_corpus):
        runner = CliRunner()
        det_path = cli_corpus / "detections.jsonl"
        r = runner.invoke(main, ["detect",
                                 "--scans", str(cli_corpus / "data" / "scans"),
                                 "--detector", str(cli_corpus / "detector.json"),
                                 "--out", str(det_path)])
        assert r.exit_code == 0, r.output
        detections = load_detections_jsonl(det_path)
        assert detections
        assert det_path.with_suffix(".provenance.json").exists()

        tracks_path = cli_corpus / "tracks.jsonl"
        r = runner.invoke(main, ["track",
                                 "--scans", str(cli_corpus / "data" / "scans"),
                                 "--detections", str(det_path),
                                 "--out", str(tracks_path)])
        assert r.exit_code == 0, r.output
        tracks = load_tracks_jsonl(tracks_path)
        assert tracks
        # retention on: every track needs two confident members
        assert all(sum(1 for m in t.members if m.detection.score >= 0.7) >= 2
                   for t in tracks)

        loose_path = cli_corpus / "tracks_all.jsonl"
        r = runner.invoke(main, ["track",
                                 "--scans", str(cli_corpus / "data" / "scans"),
                                 "--detections", str(det_path),
                                 "--out", str(loose_path), "--no-retain"])
        assert r.exit_code == 0, r.output
        assert len(load_tracks_jsonl(loose_path)) >= len(tracks)

        out_path = cli_corpus / "analysis.json"
        r = runner.invoke(main, ["analyze",
                                 "--scans", str(cli_corpus / "data" / "scans"),
                                 "--tracks", str(tracks_path),
                                 "--out", str(out_path),
                                 "--retain-min-score", "0.5"])
        assert r.exit_code == 0, r.output
        blob = json.loads(out_path.read_text())
        assert blob["n_tracks"] == len(tracks)
        ranking = blob["ranking"]
        sums = [e["score_sum"] for e in ranking]
        assert sums == sorted(sums, reverse=True)

    def test_eval_command(self, cli_corpus):
        runner = CliRunner()
        det_path = cli_corpus / "detections.jsonl"
        if not det_path.exists():
            r = runner.invoke(main, ["detect",
                                     "--scans", str(cli_corpus / "data" / "scans"),
                                     "--detector", str(cli_corpus / "detector.json"),
                                     "--out", str(det_path)])
            assert r.exit_code == 0, r.output
        out = cli_corpus / "eval.json"
        r = runner.invoke(main, ["eval",
                                 "--scans", str(cli_corpus / "data" / "scans"),
                                 "--annotations",
                                 str(cli_corpus / "data" / "annotations.csv"),
                                 "--detections", str(det_path),
                                 "--out", str(out), "--bootstrap", "4"])
        assert r.exit_code == 0, r.output
        blob = json.loads(out.read_text())
        assert 0.0 <= blob["mean_ap"] <= 1.0
        assert blob["bootstrap"]["n_resamples"] == 4
        assert len(blob["bootstrap"]["values"]) <= 4

    def test_eval_requires_exactly_one_source(self, cli_corpus):
        runner = CliRunner()
        r = runner.invoke(main, ["eval",
                                 "--scans", str(cli_corpus / "data" / "scans"),
                                 "--annotations",
                                 str(cli_corpus / "data" / "annotations.csv"),
                                 "--out", str(cli_corpus / "x.json")])
        assert r.exit_code == 1
        err = json.loads(r.stderr)
        assert err["error"]["type"] == "RoostkitError"
        assert "detections" in err["error"]["message"]

    def test_errors_are_machine_readable(self, cli_corpus, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("not,a,valid,header\n")
        runner = CliRunner()
        r = runner.invoke(main, ["train",
                                 "--scans", str(cli_corpus / "data" / "scans"),
                                 "--annotations", str(bad),
                                 "--out", str(tmp_path / "det.json")])
        assert r.exit_code == 1
        err = json.loads(r.stderr)
        assert err["error"]["type"] == "FormatError"
        assert "expected header" in err["error"]["message"]
