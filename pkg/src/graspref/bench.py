"""Benchmark harness: viewpoint geometries, the proposal x refinement matrix and reports."""
from __future__ import annotations

import csv
import io
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .cloud import Plane
from .errors import GraspRefError, PipelineError
from .geometry import compose, format_row, invert, pose_to_vector
from .grasp_eval import PLANNING_FAILED, GripperSpec, evaluate_grasp
from .refine import GPNET, LIBRARY, NAIVE, NONE, SRNET, VISIBLE, SceneInputs, plan_grasp_detailed
from .shapes import ShapeSpec, bounding_center
from .synth import (Scene, camera_pose_for, jittered_object_pose, render_depth, visible_cloud)

log = logging.getLogger(__name__)

VISIBLE_GRASP = "VisibleGrasp"
HIDDEN_GRASP = "HiddenGrasp"
SIM_BOXES = "SimBoxes"
SCENARIOS = (VISIBLE_GRASP, HIDDEN_GRASP, SIM_BOXES)

# the eight systems compared: baselines, ablations, full system, oracles
MATRIX = (
    (NAIVE, VISIBLE),
    (LIBRARY, VISIBLE),
    (NAIVE, SRNET),
    (GPNET, NONE),
    (GPNET, VISIBLE),
    (GPNET, SRNET),
    (GPNET, LIBRARY),
    (LIBRARY, SRNET),
)
ROW_TYPE = {
    (NAIVE, VISIBLE): "Baseline", (LIBRARY, VISIBLE): "Baseline",
    (NAIVE, SRNET): "Ablation", (GPNET, NONE): "Ablation", (GPNET, VISIBLE): "Ablation",
    (GPNET, SRNET): "Full",
    (GPNET, LIBRARY): "Oracle", (LIBRARY, SRNET): "Oracle",
}

VIEW_DISTANCE = 0.5
VISIBLE_ELEVATION = 50.0
HIDDEN_HEIGHT = 0.065
HIDDEN_OFFSETS_DEG = (-67.5, -22.5, 22.5, 67.5)


def parse_combination(text):
    """``"GPNet+SRNet"`` -> ``("GPNet", "SRNet")``."""
    parts = [p.strip() for p in str(text).replace("-", "+").split("+")]
    if len(parts) != 2:
        raise ValueError(f"combination {text!r} is not of the form Proposal+Refinement")
    from .refine import PROPOSALS, REFINEMENTS
    lookup_p = {p.lower(): p for p in PROPOSALS}
    lookup_r = {r.lower(): r for r in REFINEMENTS}
    if parts[0].lower() not in lookup_p or parts[1].lower() not in lookup_r:
        raise ValueError(f"unknown combination {text!r}")
    return lookup_p[parts[0].lower()], lookup_r[parts[1].lower()]


def combo_name(combo):
    return f"{combo[0]}+{combo[1]}"


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    shapes: tuple                      # ShapeSpec entries
    test_ids: tuple = ()
    combinations: tuple = MATRIX
    trials_per_cell: int = 25
    seed: int = 0
    jitter_position: float = 0.01
    jitter_yaw_deg: float = 5.0
    views: int = 4
    gripper: GripperSpec = GripperSpec()

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.trials_per_cell < 1:
            raise ValueError("trials_per_cell must be >= 1")
        if not self.combinations:
            raise ValueError("no combinations requested")
        object.__setattr__(self, "combinations", tuple(tuple(c) for c in self.combinations))
        for c in self.combinations:
            parse_combination(combo_name(c))
        ids = [s.id for s in self.shapes]
        if len(set(ids)) != len(ids):
            raise ValueError("shape ids must be unique")

    def split_of(self, object_id):
        return "test" if object_id in self.test_ids else "train"


@dataclass
class TrialRecord:
    scenario: str
    object_id: str
    split: str
    view: int
    trial: int
    proposal: str
    refinement: str
    success: bool
    failure_mode: str | None
    quality: float
    stage: str | None = None
    proposed: np.ndarray | None = None    # 12-vector, camera frame
    refined: np.ndarray | None = None     # 12-vector, camera frame
    timings: dict = field(default_factory=dict)

    @property
    def combination(self):
        return (self.proposal, self.refinement)

    def key(self):
        return (self.scenario, self.object_id, self.view, self.trial, self.proposal, self.refinement)


def build_viewpoints(scenario, shape: ShapeSpec | None = None, grasp_point=None, views=4):
    """Camera poses (Table <- Camera) around an object resting at the table origin, yaw 0.

    Rotating the camera about the object's vertical axis is equivalent to
    rotating the object under a fixed camera, so object yaws map to camera
    azimuths.  ``grasp_point`` (object frame) orients the hidden-grasp set so
    the labelled grasp side faces away from the camera.
    """
    centre = bounding_center(shape) if shape is not None else np.array([0.0, 0.0, 0.05])
    if scenario == VISIBLE_GRASP:
        # object yaws 0, 90, 180, 270 deg
        return [camera_pose_for(centre, -np.radians(90.0 * k), VISIBLE_ELEVATION, VIEW_DISTANCE)
                for k in range(4)]
    if scenario == HIDDEN_GRASP:
        away = 0.0
        if grasp_point is not None:
            d = np.asarray(grasp_point, dtype=float)[:2] - centre[:2]
            if np.linalg.norm(d) > 1e-9:
                away = np.arctan2(d[1], d[0]) + np.pi
        return [camera_pose_for(centre, away + np.radians(o), 0.0, VIEW_DISTANCE, HIDDEN_HEIGHT)
                for o in HIDDEN_OFFSETS_DEG]
    if scenario == SIM_BOXES:
        elev = (VISIBLE_ELEVATION, 0.0)
        return [camera_pose_for(centre, 2.0 * np.pi * k / views, elev[k % 2], VIEW_DISTANCE, HIDDEN_HEIGHT)
                for k in range(views)]
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass
class Models:
    proposal: object = None
    recon: object = None
    library: object = None
    labels: dict = field(default_factory=dict)   # object id -> T_O^G* for the hidden-grasp geometry


def required_models(combinations):
    need = set()
    for p, r in combinations:
        if p == GPNET:
            need.add("proposal")
        if SRNET in (p, r):
            need.add("recon")
        if LIBRARY in (p, r):
            need.add("library")
    return need


def _grasp_point(models: Models, object_id):
    if object_id in models.labels:
        return models.labels[object_id].translation
    if models.library is not None and object_id in models.library:
        return models.library.get(object_id).grasp.translation
    return None


def _units(cfg: ExperimentConfig, models: Models):
    units = []
    for si, spec in enumerate(cfg.shapes):
        cams = build_viewpoints(cfg.scenario, spec, _grasp_point(models, spec.id), cfg.views)
        for vi, cam in enumerate(cams):
            for t in range(cfg.trials_per_cell):
                units.append((si, vi, t, cam))
    return units


def run_unit(cfg: ExperimentConfig, models: Models, si, vi, trial, cam):
    """One rendered scene shared by every requested combination."""
    spec = cfg.shapes[si]
    ss = np.random.SeedSequence([int(cfg.seed), si, vi, trial])
    rng = np.random.default_rng(ss)
    plan_seed = int(rng.integers(1 << 31))
    obj_pose = jittered_object_pose(rng, cfg.jitter_position, cfg.jitter_yaw_deg)
    split = cfg.split_of(spec.id)
    records = []

    def fail(combo, stage, exc):
        return TrialRecord(cfg.scenario, spec.id, split, vi, trial, combo[0], combo[1], False,
                           PLANNING_FAILED, 0.0, stage)

    t0 = time.perf_counter()
    try:
        obs = render_depth(Scene(spec, obj_pose, cam))
        visible = visible_cloud(obs)
        if len(visible) == 0:
            raise PipelineError("segment", ValueError("segmentation left no points"))
    except GraspRefError as exc:
        stage = exc.stage if isinstance(exc, PipelineError) else "render"
        log.warning("%s view %d trial %d: %s", spec.id, vi, trial, exc)
        return [fail(c, stage, exc) for c in cfg.combinations]
    t_render = (time.perf_counter() - t0) * 1e3
    inp = SceneInputs(obs, visible, cam, object_id=spec.id, proposal_model=models.proposal,
                      recon_model=models.recon, library=models.library, seed=plan_seed,
                      true_object_pose=compose(invert(cam), obj_pose))
    table = Plane()
    for combo in cfg.combinations:
        try:
            plan = plan_grasp_detailed(combo[0], combo[1], inp)
        except PipelineError as exc:
            log.info("%s %s: planning failed at %s (%s)", spec.id, combo_name(combo), exc.stage, exc.cause)
            records.append(fail(combo, exc.stage, exc))
            continue
        t0 = time.perf_counter()
        grasp_t = compose(cam, plan.refined)
        verdict = evaluate_grasp(grasp_t, spec, obj_pose, cfg.gripper, table)
        timings = dict(plan.timings, render=t_render, evaluate=(time.perf_counter() - t0) * 1e3)
        records.append(TrialRecord(cfg.scenario, spec.id, split, vi, trial, combo[0], combo[1],
                                   bool(verdict.success), verdict.failure_mode, float(verdict.quality), None,
                                   pose_to_vector(plan.proposed), pose_to_vector(plan.refined), timings))
    return records


_WORKER = {}


def _worker_init(cfg, models):
    _WORKER["cfg"] = cfg
    _WORKER["models"] = models


def _worker_run(unit):
    return run_unit(_WORKER["cfg"], _WORKER["models"], *unit)


def run_matrix(cfg: ExperimentConfig, models: Models, jobs=1):
    """Render, plan and evaluate every (shape, view, trial, combination).

    Failures become records; nothing raises except configuration errors.
    Results are ordered by (shape, view, trial, combination) whatever ``jobs`` is.
    """
    missing = sorted(n for n in required_models(cfg.combinations) if getattr(models, n) is None)
    if missing:
        raise ValueError(f"missing models for the requested combinations: {', '.join(missing)}")
    units = _units(cfg, models)
    if jobs > 1 and len(units) > 1:
        import multiprocessing as mp
        ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
        with ctx.Pool(jobs, initializer=_worker_init, initargs=(cfg, models)) as pool:
            chunks = pool.map(_worker_run, units, chunksize=max(1, len(units) // (4 * jobs)))
    else:
        chunks = [run_unit(cfg, models, *u) for u in units]
    return [r for chunk in chunks for r in chunk]


# -- reports ------------------------------------------------------------------------------

@dataclass
class Cell:
    successes: int = 0
    trials: int = 0

    @property
    def rate(self):
        return self.successes / self.trials if self.trials else 0.0

    def add(self, ok):
        self.successes += int(bool(ok))
        self.trials += 1


@dataclass
class Report:
    overall: dict             # combo -> Cell
    by_scenario: dict         # (scenario, combo) -> Cell
    by_object: dict           # (object_id, combo) -> Cell
    by_split: dict            # (split, combo) -> Cell
    splits: dict              # object_id -> split
    combinations: list
    scenarios: list

    def rate(self, combo, scenario=None, split=None):
        combo = tuple(combo)
        if scenario is not None and split is not None:
            raise ValueError("filter by scenario or split, not both")
        if scenario is not None:
            return self.by_scenario.get((scenario, combo), Cell()).rate
        if split is not None:
            return self.by_split.get((split, combo), Cell()).rate
        return self.overall.get(combo, Cell()).rate


def summarize(records) -> Report:
    """Pure fold over records: success fractions per combination, scenario, object and split."""
    records = list(records)
    if not records:
        raise ValueError("summarize needs at least one record")
    overall, by_s, by_o, by_sp = defaultdict(Cell), defaultdict(Cell), defaultdict(Cell), defaultdict(Cell)
    splits = {}
    for r in records:
        c = (r.proposal, r.refinement)
        overall[c].add(r.success)
        by_s[(r.scenario, c)].add(r.success)
        by_o[(r.object_id, c)].add(r.success)
        by_sp[(r.split, c)].add(r.success)
        splits[r.object_id] = r.split
    order = {c: i for i, c in enumerate(MATRIX)}
    combos = sorted(overall, key=lambda c: (order.get(c, len(order)), c))
    return Report(dict(overall), dict(by_s), dict(by_o), dict(by_sp), splits, combos,
                  sorted({r.scenario for r in records}))


def format_report(rep: Report) -> str:
    """Human-readable tables laid out like the paper's: rows are systems."""
    out = io.StringIO()
    objs = sorted(rep.splits, key=lambda o: (rep.splits[o] != "test", o))
    head = ["Type", "Proposal", "Refinement"] + rep.scenarios + ["Total", "%"]
    out.write("Success by scenario\n")
    out.write(" | ".join(head) + "\n")
    for c in rep.combinations:
        row = [ROW_TYPE.get(c, "Extra"), c[0], c[1]]
        for s in rep.scenarios:
            cell = rep.by_scenario.get((s, c), Cell())
            row.append(f"{cell.successes}/{cell.trials}")
        tot = rep.overall[c]
        row += [f"{tot.successes}/{tot.trials}", f"{100 * tot.rate:.0f}"]
        out.write(" | ".join(row) + "\n")
    out.write("\nSuccess by object (test objects marked *)\n")
    out.write(" | ".join(["Type", "Proposal", "Refinement"]
                         + [o + ("*" if rep.splits[o] == "test" else "") for o in objs] + ["Total", "%"]) + "\n")
    for c in rep.combinations:
        row = [ROW_TYPE.get(c, "Extra"), c[0], c[1]]
        for o in objs:
            cell = rep.by_object.get((o, c), Cell())
            row.append(f"{cell.successes}/{cell.trials}")
        tot = rep.overall[c]
        row += [f"{tot.successes}/{tot.trials}", f"{100 * tot.rate:.0f}"]
        out.write(" | ".join(row) + "\n")
    return out.getvalue()


def report_rows(rep: Report):
    """Machine-readable summary rows: (level, key, proposal, refinement, successes, trials, rate)."""
    rows = []
    for c in rep.combinations:
        t = rep.overall[c]
        rows.append(("overall", "all", c[0], c[1], t.successes, t.trials, t.rate))
    for (s, c), t in sorted(rep.by_scenario.items()):
        rows.append(("scenario", s, c[0], c[1], t.successes, t.trials, t.rate))
    for (sp, c), t in sorted(rep.by_split.items()):
        rows.append(("split", sp, c[0], c[1], t.successes, t.trials, t.rate))
    for (o, c), t in sorted(rep.by_object.items()):
        rows.append(("object", o, c[0], c[1], t.successes, t.trials, t.rate))
    return rows


# Results file: one record per line, comma separated, with a header row.
#   scenario, object_id, split, view, trial, proposal, refinement, success (0/1),
#   failure_mode (empty on success), quality, stage (pipeline stage of a planning
#   failure, else empty), proposed (12 numbers [t, R row-major], space separated,
#   camera frame), refined (same layout).
# Timings live in a separate file so the results file is reproducible byte for byte.

RESULT_COLUMNS = ["scenario", "object_id", "split", "view", "trial", "proposal", "refinement", "success",
                  "failure_mode", "quality", "stage", "proposed", "refined"]
TIMING_COLUMNS = ["scenario", "object_id", "view", "trial", "proposal", "refinement", "stage", "ms"]


def _vec(v):
    return "" if v is None else format_row(v)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in records:
        w.writerow([r.scenario, r.object_id, r.split, r.view, r.trial, r.proposal, r.refinement,
                    int(r.success), r.failure_mode or "", repr(float(r.quality)), r.stage or "",
                    _vec(r.proposed), _vec(r.refined)])
    return buf.getvalue()


def records_from_csv(text):
    out = []
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != RESULT_COLUMNS:
        raise ValueError("not a results file: unexpected header")
    for row in rows[1:]:
        if not row:
            continue
        d = dict(zip(RESULT_COLUMNS, row))
        vec = lambda s: np.array([float(x) for x in s.split()]) if s else None
        out.append(TrialRecord(d["scenario"], d["object_id"], d["split"], int(d["view"]), int(d["trial"]),
                               d["proposal"], d["refinement"], d["success"] == "1", d["failure_mode"] or None,
                               float(d["quality"]), d["stage"] or None, vec(d["proposed"]), vec(d["refined"])))
    return out


def timings_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for r in records:
        for stage, ms in sorted(r.timings.items()):
            w.writerow([r.scenario, r.object_id, r.view, r.trial, r.proposal, r.refinement, stage, f"{ms:.3f}"])
    return buf.getvalue()


def summary_to_csv(rep: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "key", "proposal", "refinement", "successes", "trials", "rate"])
    for row in report_rows(rep):
        w.writerow(list(row[:6]) + [repr(float(row[6]))])
    return buf.getvalue()
