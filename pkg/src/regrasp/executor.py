"""Ground-truth execution of regrasp plans, benchmark episodes, and metrics."""

from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from .cost import PRESETS, CostWeights, Estimators, SpModel
from .geom import Pose, derive_seed
from .grasp_place import (
    DELTA,
    EPS_HULL,
    THETA_MAX,
    Grasp,
    GripperModel,
    NoContactError,
    check_antipodal,
    check_stable,
    closing_region_indices,
)
from .planner import FeasibilityPredicate, Plan, PlannerConfig, plan_regrasp
from .scene import PERCEPTION_MODES, TASKS, NoiseSpec, generate_scene, perceive
from .task import DEFAULT_COASTERS, BinSpec, build_oracle_table, bottle_goals, canonical_goals, packing_goals

FAILURE_REASONS = ("none", "multi_object_in_region", "not_antipodal", "collision", "unstable", "no_plan")
RAW_COLUMNS = ["episode", "object", "attempt", "step_kind", "success", "failure_reason", "g_est", "p_est",
               "value", "cost_preset", "seed"]
METRICS = ("place_execution_success", "temp_place_stable", "grasp_antipodal", "plan_found", "plan_length",
           "packing_height_of_5")


log = logging.getLogger("regrasp")


class ConfigError(ValueError):
    pass


@dataclass
class StepOutcome:
    kind: str  # grasp, temp_place, goal_place
    success: bool
    failure_reason: str = "none"
    estimate: float = float("nan")
    antipodal: Optional[bool] = None

    def __post_init__(self):
        if self.kind not in ("grasp", "temp_place", "goal_place"):
            raise ValueError(f"unknown step kind {self.kind!r}")
        if self.failure_reason not in FAILURE_REASONS:
            raise ValueError(f"unknown failure reason {self.failure_reason!r}")
        if (self.failure_reason == "none") != bool(self.success):
            raise ValueError("failure_reason must be none exactly when the step succeeds")


# ---------------------------------------------------------------------------
# ground-truth checks

def gt_predicate(scene, exclude: int, walls=np.zeros((0, 3)), relaxed=False,
                 gripper: GripperModel = GripperModel()) -> FeasibilityPredicate:
    pts = [o.surface.points for k, o in enumerate(scene) if k != exclude]
    obstacles = np.vstack(pts + [walls]) if pts else np.asarray(walls).reshape(-1, 3)
    return FeasibilityPredicate(obstacles, gripper=gripper, relaxed=relaxed)


def check_grasp_gt(scene, k: int, world_pose: Pose, place_pose: Optional[Pose] = None,
                   feas: Optional[FeasibilityPredicate] = None, place_feas: Optional[FeasibilityPredicate] = None,
                   gripper: GripperModel = GripperModel(), theta_max=THETA_MAX):
    """Grasp criteria on ground truth: one object in the closing region, antipodal, collision-free.

    The collision test covers the pick pose, the place pose (when given), and
    the grasped object's own surface against the gripper body.  Returns
    (success, failure reason, antipodal) with antipodality judged on its own.
    """
    grasp = Grasp(world_pose)
    try:
        antipodal = check_antipodal(scene[k].surface, grasp, theta_max, gripper)
    except NoContactError:
        antipodal = False
    for m, o in enumerate(scene):
        if m != k and len(closing_region_indices(grasp, o.surface, gripper)[0]):
            return False, "multi_object_in_region", antipodal
    if not antipodal:
        return False, "not_antipodal", antipodal
    local = world_pose.inverse().apply(scene[k].surface.points)
    for lo, hi in gripper.body_boxes():
        if np.all((local >= lo) & (local <= hi), axis=1).any():
            return False, "collision", antipodal
    if feas is not None and not feas(world_pose):
        return False, "collision", antipodal
    if place_pose is not None and place_feas is not None and not place_feas(place_pose):
        return False, "collision", antipodal
    return True, "none", antipodal


def execute_plan(plan: Plan, scene, k: int, gripper: GripperModel = GripperModel(), theta_max=THETA_MAX,
                 walls=np.zeros((0, 3)), relaxed=False, delta=DELTA, eps_hull=EPS_HULL):
    """Replay a plan on ground truth; returns (outcomes, scene after execution).

    Place displacements are relative to the object's pose at planning time.
    A failed grasp ends the run with the object left where it was.
    """
    scene = list(scene)
    start = scene[k]
    outcomes = []
    steps = plan.steps
    for a in range(0, len(steps), 2):
        pick, place = steps[a], steps[a + 1]
        D_pick, D_place = pick.place.pose, place.place.pose
        W = D_pick @ pick.grasp.pose
        W2 = D_place @ pick.grasp.pose
        feas = gt_predicate(scene, k, walls, relaxed, gripper)
        ok, why, anti = check_grasp_gt(scene, k, W, W2, feas, feas, gripper, theta_max)
        outcomes.append(StepOutcome("grasp", ok, why, pick.prob, anti))
        if not ok:
            break
        scene[k] = start.moved(D_place)
        kind = "goal_place" if place.place.is_goal else "temp_place"
        stable = check_stable(scene[k].surface, Pose.identity(), scene[k].center_of_mass, delta, eps_hull)
        outcomes.append(StepOutcome(kind, stable, "none" if stable else "unstable", place.prob))
    return outcomes, scene


# ---------------------------------------------------------------------------
# statistics

def t_test_one_sided(a, b) -> float:
    """p-value for mean(a) > mean(b) under a pooled-variance two-sample t-test."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two values")
    df = na + nb - 2
    sp2 = (((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()) / df
    if sp2 <= 0:
        raise ValueError("pooled variance is zero")
    t = (a.mean() - b.mean()) / np.sqrt(sp2 * (1 / na + 1 / nb))
    return float(stats.t.sf(t, df))


def mean_se(x):
    x = np.asarray([v for v in x if np.isfinite(v)], float)
    if len(x) == 0:
        return float("nan"), float("nan")
    se = x.std(ddof=1) / np.sqrt(len(x)) if len(x) > 1 else 0.0
    return float(x.mean()), float(se)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class BenchConfig:
    task: str = "canonical"
    cost_preset: str = "step"
    perception: str = "corrupted"
    episodes: int = 1
    seed: int = 0
    weights: Optional[CostWeights] = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    M: int = 100
    sigma: float = float(np.radians(8.0))
    theta_max: float = float(THETA_MAX)
    beta: float = 0.005
    relax_feasibility: bool = False
    retry_budget: int = 3
    n_goal: int = 5
    n_obj: Optional[int] = None
    sp_model: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown value {self.task!r}")
        if self.cost_preset not in PRESETS:
            raise ConfigError(f"cost_preset: unknown value {self.cost_preset!r}")
        if self.perception not in PERCEPTION_MODES:
            raise ConfigError(f"perception: unknown value {self.perception!r}")
        for name in ("episodes", "M", "n_goal", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.retry_budget < 0:
            raise ConfigError("retry_budget: must be >= 0")
        if self.n_obj is not None and self.n_obj < 1:
            raise ConfigError("n_obj: must be >= 1")
        if self.cost_preset == "sp" and not self.sp_model:
            raise ConfigError("sp_model: the sp preset needs a trained model directory")
        if self.weights is None:
            self.weights = CostWeights.for_preset(self.cost_preset)
        elif self.weights.preset != self.cost_preset:
            raise ConfigError("weights: preset does not match cost_preset")

    def estimators(self) -> Estimators:
        est = Estimators(theta_max=self.theta_max, sigma_gq=self.sigma, M=self.M, beta=self.beta)
        if self.cost_preset == "sp":
            est.sp_grasp = SpModel.load(os.path.join(self.sp_model, "grasp.sp"))
            est.sp_place = SpModel.load(os.path.join(self.sp_model, "place.sp"))
        return est


# ---------------------------------------------------------------------------
# episodes

def _fmt(v):
    if v is None or (isinstance(v, float) and not np.isfinite(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


@dataclass
class Episode:
    rows: list
    planning_times: list
    plan_dumps: list = field(default_factory=list)


def _row(cfg, ep, obj, attempt, kind, success, reason, g=None, p=None, value=None):
    return [ep, obj, attempt, kind, success, reason, g, p, value, cfg.cost_preset, cfg.seed]


def _bin_height(scene, placed_ids):
    if not placed_ids:
        return 0.0
    return 100.0 * max(scene[k].surface.points[:, 2].max() for k in placed_ids)


def run_episode(cfg: BenchConfig, ep: int, estimators: Optional[Estimators] = None,
                oracle=None) -> Episode:
    """scene -> perceive -> arrange -> plan -> execute, replanning until done or out of retries."""
    estimators = estimators or cfg.estimators()
    ep_seed = derive_seed(cfg.seed, "episode", ep)
    scene = generate_scene(ep_seed, cfg.task, cfg.n_obj)
    ids = [o.object_id for o in scene]
    box = BinSpec()
    walls = box.wall_points() if cfg.task == "packing" else np.zeros((0, 3))
    coasters = list(DEFAULT_COASTERS)
    bottles = {k for k, o in enumerate(scene) if o.shape_spec.kind == "bottle"}
    occupied = set()
    placed, predicted = [], {}
    failures = {k: 0 for k in range(len(scene))}
    attempts = {k: 0 for k in range(len(scene))}
    rows, times, dumps = [], [], []
    rounds = 0
    while True:
        rounds += 1
        active = [k for k in range(len(scene)) if k not in placed and failures[k] <= cfg.retry_budget]
        if cfg.task == "bottles":
            active = [k for k in active if k in bottles]
            if len(occupied) >= len(coasters):
                break
        if not active or (cfg.task == "canonical" and rounds > 1):
            break
        noise = replace(cfg.noise, beta=cfg.beta, seed=derive_seed(ep_seed, "perceive", rounds))
        percs = perceive(scene, cfg.perception, noise)
        by_id = {p.true_id: p for p in percs}
        best = None
        for k in active:
            p = by_id.get(ids[k])
            attempts[k] += 1
            att = attempts[k]
            goals = _goals(cfg, scene, k, p, percs, placed, predicted, box, coasters, occupied, oracle)
            result = None
            if p is not None and goals:
                others = [q.completed for q in percs if q is not p]
                # placed objects may be out of view; their predicted clouds stand in
                seen = {q.true_id for q in percs}
                known = [predicted[j] for j in placed if ids[j] not in seen]
                obst = np.vstack([q.points for q in others] + known + [walls])
                feas = FeasibilityPredicate(obst, relaxed=cfg.relax_feasibility)
                result = plan_regrasp(p, goals, config=cfg.planner, weights=cfg.weights, estimators=estimators,
                                      feas=feas, others=others,
                                      seed=derive_seed(ep_seed, "plan", ids[k], att))
                times.append(result.seconds)
            found = result is not None and result.plan is not None
            rows.append(_row(cfg, ep, ids[k], att, "plan", found, "none" if found else "no_plan",
                             value=result.plan.m if found else None))
            if found and (best is None or result.cost < best[1]):
                best = (k, result.cost, result, att, p)
        if best is None:
            break
        k, _, result, att, p = best
        dumps.append((f"ep{ep}_obj{ids[k]}_att{att}.txt", result.plan.dump()))
        outcomes, after = execute_plan(result.plan, scene, k, estimators.gripper, cfg.theta_max, walls,
                                       cfg.relax_feasibility)
        for o in outcomes:
            g = o.estimate if o.kind == "grasp" else None
            pe = o.estimate if o.kind != "grasp" else None
            rows.append(_row(cfg, ep, ids[k], att, o.kind, o.success, o.failure_reason, g, pe,
                             o.antipodal if o.kind == "grasp" else None))
        scene = after
        if outcomes[-1].kind == "goal_place":
            placed.append(k)
            goal = result.plan.steps[-1].place.pose
            predicted[k] = goal.apply(p.completed.points)
            if cfg.task == "bottles":
                occupied.add(_coaster_of(scene[k], coasters))
            if cfg.task == "packing" and len(placed) == 5:
                rows.append(_row(cfg, ep, "", "", "packing_height_of_5", True, "none",
                                 value=_bin_height(scene, placed)))
        else:
            failures[k] += 1
    return Episode(rows, times, dumps)


def _coaster_of(obj, coasters):
    c = obj.surface.points[:, :2].mean(axis=0)
    return int(np.argmin([np.linalg.norm(c - np.asarray(x.center)) for x in coasters]))


def _goals(cfg, scene, k, p, percs, placed, predicted, box, coasters, occupied, oracle):
    if p is None:
        return []
    if cfg.task == "canonical":
        return [(g.pose, g.cost) for g in canonical_goals(k, oracle, scene[k].shape_spec, scene[k].pose)]
    if cfg.task == "bottles":
        return [(g.pose, g.cost) for g in bottle_goals([p], coasters, occupied)]
    seed = derive_seed(cfg.seed, "packing", k, len(placed))
    goals = packing_goals([p], box, cfg.n_goal, [predicted[j] for j in placed], seed)
    return [(g.pose, g.cost) for g in goals]


# ---------------------------------------------------------------------------
# metrics

def episode_metrics(rows) -> dict:
    """Per-episode metric values from raw rows (nan where undefined)."""
    plans = [r for r in rows if r[3] == "plan"]
    grasps = [r for r in rows if r[3] == "grasp"]
    temps = [r for r in rows if r[3] == "temp_place"]
    executed = {}
    for r in rows:
        if r[3] in ("grasp", "temp_place", "goal_place"):
            ok = executed.setdefault((r[1], r[2]), True)
            if r[3] == "grasp":
                executed[(r[1], r[2])] = ok and _truthy(r[4])
    found = [r for r in plans if _truthy(r[4])]
    heights = [float(r[8]) for r in rows if r[3] == "packing_height_of_5"]
    nan = float("nan")
    return {
        "place_execution_success": float(np.mean(list(executed.values()))) if executed else nan,
        "temp_place_stable": float(np.mean([_truthy(r[4]) for r in temps])) if temps else nan,
        "grasp_antipodal": float(np.mean([_truthy(r[8]) for r in grasps])) if grasps else nan,
        "plan_found": float(np.mean([_truthy(r[4]) for r in plans])) if plans else nan,
        "plan_length": float(np.mean([float(r[8]) for r in found])) if found else nan,
        "packing_height_of_5": heights[0] if heights else nan,
    }


def _truthy(v) -> bool:
    return v in (True, 1, "1", "True")


def summarize(rows) -> dict:
    """Mean and standard error over episodes for each metric."""
    by_ep = {}
    for r in rows:
        by_ep.setdefault(int(r[0]), []).append(r)
    per = [episode_metrics(by_ep[e]) for e in sorted(by_ep)]
    return {m: mean_se([p[m] for p in per]) for m in METRICS}


def per_episode(rows, metric) -> dict:
    by_ep = {}
    for r in rows:
        by_ep.setdefault(int(r[0]), []).append(r)
    return {e: episode_metrics(v)[metric] for e, v in by_ep.items()}


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def read_raw_csv(path) -> list:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != RAW_COLUMNS:
            raise ValueError(f"{path}: unexpected raw.csv header")
        return [r for r in rd]


def summary_csv(summary, preset, timing=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["preset", "metric", "mean", "se"])
    for m in METRICS:
        mu, se = summary[m]
        w.writerow([preset, m, _fmt(mu), _fmt(se)])
    if timing is not None:
        w.writerow([preset, "planning_time", _fmt(timing[0]), _fmt(timing[1])])
    return buf.getvalue()


@dataclass
class BenchResult:
    rows: list
    summary: dict
    planning_time: tuple
    crashed: int = 0
    plan_dumps: list = field(default_factory=list)

    @property
    def raw_csv(self) -> str:
        return rows_to_csv(self.rows)


def _episode_job(args):
    cfg, ep = args
    return run_episode(cfg, ep, oracle=build_oracle_table() if cfg.task == "canonical" else None)


def run_benchmark(cfg: BenchConfig, progress=None) -> BenchResult:
    """Run cfg.episodes episodes; rows come back in episode order whatever the worker count."""
    cfg.validate()
    est = cfg.estimators()
    oracle = build_oracle_table() if cfg.task == "canonical" else None
    episodes, crashed = [], 0
    if cfg.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(cfg.workers) as pool:
            episodes = list(pool.map(_episode_job, [(cfg, e) for e in range(cfg.episodes)]))
    else:
        for e in range(cfg.episodes):
            try:
                episodes.append(run_episode(cfg, e, est, oracle))
            except Exception:  # a crash is reported, the rest of the run continues
                log.exception("episode %d crashed", e)
                crashed += 1
                continue
            if progress:
                progress(e)
    # metrics are computed from the serialized form so raw.csv reproduces them exactly
    rows = [[_fmt(v) for v in r] for e in episodes for r in e.rows]
    times = [t for e in episodes for t in e.planning_times]
    dumps = [d for e in episodes for d in e.plan_dumps]
    return BenchResult(rows, summarize(rows), mean_se(times), crashed, dumps)
