import json
import os
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pytest
from PIL import ImageDraw

from niom import formats
from niom.corruptions import CorruptionSpec
from niom.geometry import auc, normalize_points, sampson_distance
from niom.harness import report as report_mod
from niom.harness.manifest import Category, ManifestError, load_manifest, write_manifest
from niom.harness.pipeline import (
    PairResult,
    RunConfig,
    RunReport,
    process_pair,
    run_pipeline,
    worker_count,
)
from niom.harness.synth import HEIGHT, WIDTH, make_scene, motif_pool
from niom.harness.viz import confidence_colour, render_matches
from niom.imageio import save_image
from niom.matching import Match, MatchSet

GOLDEN = Path(__file__).parent / "data" / "golden_10pair.json"


def _write_pair(tmp_path, pair_id="p0", **extra):
    img = np.random.default_rng(0).uniform(0, 1, (64, 64, 3))
    save_image(tmp_path / "a.png", img)
    save_image(tmp_path / "b.png", img)
    obj = {"pair_id": pair_id, "image_a": "a.png", "image_b": "b.png",
           "intrinsics_a": [100, 100, 32, 32], "intrinsics_b": {"fx": 100, "fy": 100, "cx": 32, "cy": 32}}
    obj.update(extra)
    return obj


# --- manifest ---------------------------------------------------------------


def test_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert load_manifest(tmp_path / "m.jsonl") == []


def test_manifest_errors_carry_line_numbers(tmp_path):
    good = _write_pair(tmp_path)
    bad = dict(good, pair_id="p1")
    del bad["intrinsics_a"]
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n")
    with pytest.raises(ManifestError, match=r"m.jsonl:2: .*intrinsics_a"):
        load_manifest(path)
    path.write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(ManifestError, match=r":2:"):
        load_manifest(path)
    path.write_text(json.dumps(good) + "\n" + json.dumps(good) + "\n")
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(path)
    path.write_text(json.dumps(dict(good, image_b="missing.png")) + "\n")
    with pytest.raises(ManifestError, match="missing.png"):
        load_manifest(path)
    path.write_text(json.dumps(dict(good, intrinsics_a=[0, 1, 2, 3])) + "\n")
    with pytest.raises(ManifestError):
        load_manifest(path)
    path.write_text(json.dumps(good) + "\n")
    with pytest.raises(ManifestError, match="gt_pose"):
        load_manifest(path, require_pose=True)


def test_manifest_roundtrip(tmp_path):
    formats.write_nioh(tmp_path / "h.nioh", np.zeros((4, 4)))
    obj = _write_pair(tmp_path, category="DomainShift", heatmaps_a="h.nioh",
                      gt_pose={"rotation": np.eye(3).ravel().tolist(), "translation": [0, 0, 1]})
    (tmp_path / "m.jsonl").write_text(json.dumps(obj) + "\n")
    recs = load_manifest(tmp_path / "m.jsonl", require_pose=True)
    assert recs[0].category is Category.DOMAIN_SHIFT
    write_manifest(tmp_path / "m2.jsonl", recs)
    again = load_manifest(tmp_path / "m2.jsonl")
    for a, b in zip(recs, again):
        assert a.pair_id == b.pair_id and a.image_a == b.image_a and a.heatmaps_a == b.heatmaps_a
        assert a.intrinsics_a == b.intrinsics_a and a.category == b.category
        np.testing.assert_array_equal(a.gt_pose.rotation, b.gt_pose.rotation)
        np.testing.assert_array_equal(a.gt_pose.translation, b.gt_pose.translation)


# --- pipeline ---------------------------------------------------------------


def _no_time(run):
    return [r.without_time() for r in run.records]


def test_zero_heatmaps_make_weighting_a_no_op(bench10, tmp_path):
    pairs = load_manifest(bench10, require_pose=True)[:3]
    zero_pairs = []
    for rec in pairs:
        paths = []
        for i, hm in enumerate(rec.heatmaps_a + rec.heatmaps_b):
            p = tmp_path / f"{rec.pair_id}_{i}.nioh"
            formats.write_nioh(p, np.zeros_like(formats.read_nioh(hm)))
            paths.append(p)
        zero_pairs.append(replace(rec, heatmaps_a=(paths[0],), heatmaps_b=(paths[1],)))
    none = run_pipeline(zero_pairs, RunConfig(weight_mode="none"), workers=1, warmup=False)
    paper = run_pipeline(zero_pairs, RunConfig(weight_mode="paper"), workers=1, warmup=False)
    assert _no_time(none) == _no_time(paper)


def test_determinism_across_worker_counts(bench10):
    pairs = load_manifest(bench10, require_pose=True)[:4]
    config = RunConfig(corruption=CorruptionSpec("gaussian_noise", 3, 1))
    one = run_pipeline(pairs, config, workers=1, warmup=False)
    four = run_pipeline(list(reversed(pairs)), config, workers=4, warmup=False)
    assert _no_time(one) == _no_time(four)
    assert [r.pair_id for r in four.records] == sorted(r.pair_id for r in pairs)


def test_severity_zero_equals_clean(bench10):
    pairs = load_manifest(bench10, require_pose=True)[:2]
    clean = run_pipeline(pairs, RunConfig(), workers=1, warmup=False)
    zero = run_pipeline(pairs, RunConfig(corruption=CorruptionSpec("snow", 0, 3)), workers=1, warmup=False)
    assert _no_time(clean) == _no_time(zero)


def test_crash_isolation(bench10, tmp_path):
    pairs = load_manifest(bench10, require_pose=True)[:2]
    broken = tmp_path / "broken.png"
    broken.write_bytes(b"not a png")
    run = run_pipeline([replace(pairs[0], image_a=broken), pairs[1]], RunConfig(), workers=2, warmup=False)
    bad = run.records[0]
    assert bad.failed and bad.pose_error == 180.0 and bad.message
    assert not run.records[1].failed


def test_aggregates_recomputable(bench10, tmp_path):
    pairs = load_manifest(bench10, require_pose=True)[:3]
    run = run_pipeline(pairs, RunConfig(weight_mode="paper"), workers=1)
    run.save(tmp_path / "r.json")
    obj = json.loads((tmp_path / "r.json").read_text())
    errors = [r["pose_error"] for r in obj["records"]]
    np.testing.assert_allclose(list(obj["aggregates"]["auc"].values()), auc(errors, [5, 10, 20]), rtol=0, atol=0)
    assert obj["aggregates"]["mean_matches"] == np.mean([r["num_matches"] for r in obj["records"]])
    assert all(r["time_ms"] >= 0 for r in obj["records"])
    back = RunReport.load(tmp_path / "r.json")
    assert back.config == run.config and back.records == run.records


def test_correct_match_count_is_consistent(bench10):
    rec = load_manifest(bench10, require_pose=True)[0]
    res = process_pair(rec, RunConfig())
    assert 0 <= res.num_correct <= res.num_matches
    assert res.inlier_precision == res.num_correct / res.num_matches


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("NIOM_THREADS", "2")
    assert worker_count(8) == 2
    assert worker_count(1) == 1
    monkeypatch.setenv("NIOM_THREADS", "zero")
    with pytest.raises(ValueError):
        worker_count(4)
    monkeypatch.setenv("NIOM_THREADS", "0")
    with pytest.raises(ValueError):
        worker_count(4)
    monkeypatch.delenv("NIOM_THREADS")
    assert worker_count(3) == 3


def test_run_config_validation_and_json():
    with pytest.raises(ValueError):
        RunConfig(matcher="brute")
    with pytest.raises(ValueError):
        RunConfig(ratio=0)
    c = RunConfig(weight_mode="raw", corruption=CorruptionSpec("fog", 2, 4), side="a")
    assert RunConfig.from_json(json.loads(json.dumps(c.to_json()))) == c
    assert c.condition == "Fog" and c.method == "mnn+raw"
    assert RunConfig(corruption=CorruptionSpec("fog", 0)).condition == "Clean"


def _golden_view(run):
    return [asdict(r.without_time()) for r in run.records]


def test_golden_ten_pair_report(bench10):
    pairs = load_manifest(bench10, require_pose=True)
    assert len(pairs) == 10
    run = run_pipeline(pairs, RunConfig(global_seed=0), workers=2)
    again = run_pipeline(pairs, RunConfig(global_seed=0), workers=1, warmup=False)
    assert _no_time(run) == _no_time(again)
    assert len(run.records) == 10 and all(np.isfinite(run.auc()))
    if os.environ.get("NIOM_REGEN_GOLDEN"):
        GOLDEN.write_text(json.dumps({"records": _golden_view(run), "auc": run.auc()}, indent=1) + "\n")
    golden = json.loads(GOLDEN.read_text())
    got = _golden_view(run)
    for g, r in zip(golden["records"], got):
        assert {k: v for k, v in g.items() if k != "pose_error"} == {k: v for k, v in r.items() if k != "pose_error"}
        assert r["pose_error"] == pytest.approx(g["pose_error"], abs=1e-6)
    np.testing.assert_allclose(run.auc(), golden["auc"], atol=1e-6)


# --- report -----------------------------------------------------------------


def _run(kind, mode, errors, times=None):
    corruption = None if kind is None else CorruptionSpec(kind, 5, 0)
    times = times or [1.0] * len(errors)
    recs = [PairResult(f"p{i}", "SameObject", pose_error=e, time_ms=t) for i, (e, t) in enumerate(zip(errors, times))]
    return RunReport(RunConfig(weight_mode=mode, corruption=corruption), recs)


def test_single_kind_table_has_average_equal_to_row():
    rows = report_mod.build_table([_run("motion_blur", "paper", [1.0, 7.0, 30.0])]).rows()
    assert [r[0] for r in rows] == ["Motion Blur", "Average", "Time per pair [msec.]"]
    assert rows[0][1:] == rows[1][1:]


def test_table_layout_and_csv_roundtrip():
    runs = [_run(k, m, [2.0 * i + j for j in range(4)], [5.0, 7.0, 9.0, 100.0])
            for i, k in enumerate([None, "gaussian_noise", "defocus_blur"]) for m in ("none", "paper")]
    table = report_mod.build_table(list(reversed(runs)))
    assert table.conditions == ["Clean", "Gaussian Noise", "Defocus Blur"]
    text = report_mod.to_csv(table)
    cells = report_mod.parse_csv(text)
    for run in runs:
        for tau, value in zip((5, 10, 20), run.auc()):
            assert cells[(run.condition, f"{run.method} AUC@{tau}")] == pytest.approx(100 * value, abs=5e-3)
    avg = np.mean([runs[2].auc()[2], runs[4].auc()[2]])
    assert cells[("Average", "mnn+none AUC@20")] == pytest.approx(100 * avg, abs=5e-3)
    assert cells[("Time per pair [msec.]", "mnn+none AUC@5")] == 8.0
    md = report_mod.to_markdown(table)
    assert md.splitlines()[0].startswith("| condition | mnn+paper AUC@5")
    assert "| Time per pair [msec.] |" in md


def test_report_rejects_duplicates_and_formats(tmp_path):
    run = _run("fog", "none", [1.0])
    with pytest.raises(ValueError):
        report_mod.build_table([run, run])
    with pytest.raises(ValueError):
        report_mod.render_report([run], "html")
    with pytest.raises(ValueError):
        report_mod.build_table([])
    report_mod.render_report([run], "markdown", tmp_path / "t.md")
    assert "Fog" in (tmp_path / "t.md").read_text()


# --- viz --------------------------------------------------------------------


def test_render_matches(tmp_path, monkeypatch):
    a = np.zeros((40, 60, 3))
    b = np.ones((50, 30))
    pa = np.array([[5.0, 5.0], [10.0, 20.0], [30, 30]])
    pb = np.array([[1.0, 1.0], [20.0, 40.0]])
    calls = []
    original = ImageDraw.ImageDraw.line

    def spy(self, *args, **kwargs):
        calls.append(kwargs.get("fill"))
        return original(self, *args, **kwargs)

    monkeypatch.setattr(ImageDraw.ImageDraw, "line", spy)
    img = render_matches(a, b, pa, pb, MatchSet((Match(0, 1, 0.0), Match(2, 0, 1.0))), tmp_path / "v.png")
    assert img.size == (90, 50)
    assert calls == [(255, 0, 0), (0, 255, 0)]
    assert (tmp_path / "v.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    calls.clear()
    render_matches(a, b, pa, pb, MatchSet())
    assert calls == []
    with pytest.raises(IndexError):
        render_matches(a, b, pa, pb, MatchSet((Match(3, 0, 0.5),)))


def test_confidence_colour_clamps():
    assert confidence_colour(-1) == (255, 0, 0)
    assert confidence_colour(0.5) == (128, 128, 0)
    assert confidence_colour(2) == (0, 255, 0)


# --- synthetic scenes -----------------------------------------------------


def test_scene_ground_truth_is_epipolar_consistent():
    scene = make_scene(3, motif_pool(0, 6))
    ys, xs = np.nonzero(np.isfinite(scene.depth_a))
    pick = np.random.default_rng(0).choice(len(xs), 200, replace=False)
    pa = np.column_stack([xs[pick], ys[pick]]).astype(float)
    pb = scene.transfer(pa)
    k = scene.intrinsics
    d = sampson_distance(scene.pose.essential, normalize_points(pa, k), normalize_points(pb, k))
    assert np.all(d < 1e-9)
    assert np.all(np.isnan(scene.transfer(np.array([[0.0, 0.0]]))) | np.isfinite(scene.depth_a[0, 0]))


def test_scene_determinism_and_shapes():
    motifs = motif_pool(1, 4)
    a, b = make_scene(5, motifs, "SameObject"), make_scene(5, motifs, "SameObject")
    np.testing.assert_array_equal(a.image_a, b.image_a)
    np.testing.assert_array_equal(a.image_b, b.image_b)
    assert a.image_a.shape == (HEIGHT, WIDTH, 3)
    assert 0 <= a.image_a.min() and a.image_a.max() <= 1
    for box in (a.box_a, a.box_b):
        assert 0 <= box.x_min < box.x_max <= WIDTH and 0 <= box.y_min < box.y_max <= HEIGHT


def test_benchmark_manifest(bench10):
    pairs = load_manifest(bench10, require_pose=True)
    assert [p.pair_id for p in pairs] == [f"synth_{i:04d}" for i in range(10)]
    assert {p.category.value for p in pairs} == {c.value for c in Category}
    hm = formats.read_nioh(pairs[0].heatmaps_a[0])
    assert hm.shape == (HEIGHT, WIDTH) and 0.8 < hm.max() <= 1.0
