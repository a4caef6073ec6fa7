import random

import numpy as np
import pytest

from graspref.bench import (HIDDEN_GRASP, MATRIX, SIM_BOXES, VISIBLE_GRASP, ExperimentConfig, Models, TrialRecord,
                            build_viewpoints, format_report, parse_combination, records_from_csv, records_to_csv,
                            required_models, run_matrix, summarize, summary_to_csv, timings_to_csv)
from graspref.geometry import invert
from graspref.nn import HyperNet
from graspref.propose import GraspLibrary, ProposalModel
from graspref.recon import ENCODING_SIZE, ReconModel
from graspref.refine import LIBRARY, NAIVE, VISIBLE
from graspref.shapes import BOX, ShapeSpec, bounding_center
from graspref.synth import DEFAULT_INTRINSICS

from conftest import quick_labels

BOXES = tuple(ShapeSpec(BOX, e, id=f"b{i}") for i, e in
              enumerate([(0.1, 0.05, 0.12), (0.05, 0.12, 0.08), (0.08, 0.06, 0.15), (0.14, 0.055, 0.06)]))


@pytest.fixture(scope="module")
def models():
    labels = quick_labels(BOXES)
    recon = ReconModel(HyperNet.build(ENCODING_SIZE, [3, 8, 3], hidden=(16,), seed=0, base_scale=0.1), 64)
    return Models(ProposalModel.create(seed=0), recon, GraspLibrary.from_labels(BOXES, labels, points=3000), labels)


def in_frustum(cam, point):
    p = invert(cam).apply(point)
    fx, fy, cx, cy = DEFAULT_INTRINSICS
    u, v = fx * p[0] / p[2] + cx, fy * p[1] / p[2] + cy
    return p[2] > 0 and 0 <= u < 64 and 0 <= v < 64


def test_visible_viewpoints():
    spec = BOXES[0]
    cams = build_viewpoints(VISIBLE_GRASP, spec)
    c = bounding_center(spec)
    assert len(cams) == 4
    for cam in cams:
        assert abs(np.linalg.norm(cam.translation - c) - 0.5) <= 1e-9
        elev = np.degrees(np.arcsin((cam.translation[2] - c[2]) / 0.5))
        assert elev == pytest.approx(50.0)
        assert in_frustum(cam, c)


def test_hidden_viewpoints_face_away():
    spec = BOXES[1]
    grasp = np.array([0.0, 0.05, 0.08])
    cams = build_viewpoints(HIDDEN_GRASP, spec, grasp)
    assert len(cams) == 4
    for cam in cams:
        assert cam.translation[2] == pytest.approx(0.065)
        assert in_frustum(cam, bounding_center(spec))
        # the camera sits on the far side from the grasp
        assert (cam.translation[:2] - bounding_center(spec)[:2]) @ grasp[:2] < 0


def test_sim_boxes_ring():
    cams = build_viewpoints(SIM_BOXES, BOXES[2], views=6)
    assert len(cams) == 6
    assert all(in_frustum(c, bounding_center(BOXES[2])) for c in cams)


def test_combination_parsing():
    assert parse_combination("GPNet+SRNet") == ("GPNet", "SRNet")
    assert parse_combination("naive-visible") == ("Naive", "Visible")
    with pytest.raises(ValueError):
        parse_combination("GPNet")
    with pytest.raises(ValueError):
        parse_combination("Magic+Visible")
    assert required_models([("Naive", "Visible")]) == set()
    assert required_models(MATRIX) == {"proposal", "recon", "library"}


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig("Moon", BOXES)
    with pytest.raises(ValueError):
        ExperimentConfig(VISIBLE_GRASP, BOXES, trials_per_cell=0)
    with pytest.raises(ValueError):
        ExperimentConfig(VISIBLE_GRASP, BOXES + BOXES[:1])


def test_full_matrix_record_count_and_determinism(models):
    cfg = ExperimentConfig(VISIBLE_GRASP, BOXES, ("b3",), MATRIX, trials_per_cell=1, seed=4)
    a = run_matrix(cfg, models)
    assert len(a) == 4 * 4 * 8
    b = run_matrix(cfg, models)
    assert records_to_csv(a) == records_to_csv(b)
    assert {r.split for r in a if r.object_id == "b3"} == {"test"}


def test_parallel_matches_serial(models):
    cfg = ExperimentConfig(SIM_BOXES, BOXES[:2], (), ((NAIVE, VISIBLE), (LIBRARY, LIBRARY)), trials_per_cell=2)
    assert records_to_csv(run_matrix(cfg, models, jobs=2)) == records_to_csv(run_matrix(cfg, models, jobs=1))


def test_missing_models_rejected():
    cfg = ExperimentConfig(VISIBLE_GRASP, BOXES[:1], combinations=(("GPNet", "SRNet"),), trials_per_cell=1)
    with pytest.raises(ValueError, match="proposal"):
        run_matrix(cfg, Models())


def test_oracle_rows_run_without_checkpoints(models):
    oracle_only = Models(library=models.library, labels=models.labels)
    combos = ((NAIVE, VISIBLE), (LIBRARY, VISIBLE), (LIBRARY, LIBRARY))
    recs = run_matrix(ExperimentConfig(VISIBLE_GRASP, BOXES, (), combos, trials_per_cell=2, seed=1), oracle_only)
    rep = summarize(recs)
    best = max(rep.rate(c) for c in combos)
    assert rep.rate((LIBRARY, LIBRARY)) == best


def rec(obj, combo, ok, split="train", scenario=VISIBLE_GRASP, trial=0):
    return TrialRecord(scenario, obj, split, 0, trial, combo[0], combo[1], ok, None if ok else "NoContact", 0.5)


def test_summarize_arithmetic():
    c = ("GPNet", "SRNet")
    rep = summarize([rec("a", c, True, trial=i) for i in range(5)])
    assert rep.rate(c) == 1.0 and rep.rate(c, scenario=VISIBLE_GRASP) == 1.0 and rep.rate(c, split="train") == 1.0
    rep = summarize([rec("a", c, True), rec("a", c, True), rec("b", c, True), rec("b", c, False)])
    assert rep.rate(c) == 0.75
    with pytest.raises(ValueError):
        summarize([])


def test_summarize_cross_footing_and_order_invariance():
    rng = np.random.default_rng(0)
    recs = [rec(f"o{rng.integers(4)}", MATRIX[rng.integers(8)], bool(rng.integers(2)),
                "test" if rng.integers(3) == 0 else "train", [VISIBLE_GRASP, HIDDEN_GRASP][rng.integers(2)], i)
            for i in range(300)]
    # keep each object's split consistent
    split_of = {r.object_id: r.split for r in recs}
    for r in recs:
        r.split = split_of[r.object_id]
    rep = summarize(recs)
    for c in rep.combinations:
        total = rep.overall[c]
        objs = [v for (o, cc), v in rep.by_object.items() if cc == c]
        assert sum(v.successes for v in objs) == total.successes
        assert sum(v.trials for v in objs) == total.trials
        scen = [v for (s, cc), v in rep.by_scenario.items() if cc == c]
        assert sum(v.trials for v in scen) == total.trials
    shuffled = recs[:]
    random.Random(3).shuffle(shuffled)
    rep2 = summarize(shuffled)
    assert format_report(rep2) == format_report(rep)
    assert summary_to_csv(rep2) == summary_to_csv(rep)


def test_results_csv_round_trip(models):
    cfg = ExperimentConfig(VISIBLE_GRASP, BOXES[:1], (), ((NAIVE, VISIBLE), (LIBRARY, LIBRARY)), trials_per_cell=2)
    recs = run_matrix(cfg, models)
    text = records_to_csv(recs)
    back = records_from_csv(text)
    assert records_to_csv(back) == text
    assert format_report(summarize(back)) == format_report(summarize(recs))
    assert timings_to_csv(recs).splitlines()[0] == "scenario,object_id,view,trial,proposal,refinement,stage,ms"
    with pytest.raises(ValueError):
        records_from_csv("bogus\n")
