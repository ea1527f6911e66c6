"""Regrasp graph, A* search over pick/place sequences, and the sampling loop."""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cost import CostWeights, Estimators, StepProb
from .geom import Pose, derive_seed
from .grasp_place import (
    DELTA,
    EPS_HULL,
    TEMP_AREA,
    Grasp,
    GripperModel,
    Place,
    sample_grasps,
    sample_temporary_places,
)

START = "start"


class PlannerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# feasibility

@dataclass
class FeasibilityPredicate:
    """Cheap stand-in for a collision-free IK query.

    A world gripper pose is feasible when its approach axis points down within
    max_tilt of vertical, its origin lies in the workspace box, no body box
    corner dips below the table, and no obstacle point lies within margin of
    the body boxes.
    """

    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    workspace_lo: tuple = (-0.6, -0.6, 0.0)
    workspace_hi: tuple = (0.6, 0.6, 0.6)
    max_tilt: float = np.radians(75.0)
    margin: float = 0.003
    table_z: float = 0.0
    gripper: GripperModel = field(default_factory=GripperModel)
    relaxed: bool = False

    def __post_init__(self):
        self.obstacles = np.asarray(self.obstacles, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.obstacles) if len(self.obstacles) else None
        boxes = self.gripper.body_boxes()
        self._corners = np.array([[b[k][0], b[l][1], b[m][2]] for b in boxes
                                  for k in (0, 1) for l in (0, 1) for m in (0, 1)])

    def batch(self, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Feasibility of B world gripper poses given as B x 3 x 3 and B x 3."""
        R = np.asarray(R, float).reshape(-1, 3, 3)
        t = np.asarray(t, float).reshape(-1, 3)
        ok = np.ones(len(R), dtype=bool)
        if self.relaxed or len(R) == 0:
            return ok
        ok &= -R[:, 2, 2] >= np.cos(self.max_tilt)
        ok &= np.all((t >= self.workspace_lo) & (t <= self.workspace_hi), axis=1)
        corner_z = np.einsum("bj,cj->bc", R[:, 2, :], self._corners) + t[:, 2:3]
        ok &= corner_z.min(axis=1) >= self.table_z
        if self._tree is not None and ok.any():
            k = np.flatnonzero(ok)
            ok[self._colliding(R[k], t[k], k)] = False
        return ok

    def _colliding(self, R, t, k):
        """Entries of k whose body boxes hold an obstacle point.

        Candidate (pose, point) pairs come from a ball around each box, so only
        points near a box are moved into the gripper frame.
        """
        hit = np.zeros(len(k), dtype=bool)
        for lo, hi in self.gripper.body_boxes():
            lo, hi = lo - self.margin, hi + self.margin
            centers = R @ ((lo + hi) / 2) + t
            pairs = cKDTree(centers).sparse_distance_matrix(
                self._tree, float(np.linalg.norm(hi - lo) / 2), output_type="ndarray")
            if not len(pairs):
                continue
            b, j = pairs["i"], pairs["j"]
            local = np.einsum("nji,nj->ni", R[b], self.obstacles[j] - t[b])
            hit[b[np.all((local >= lo) & (local <= hi), axis=1)]] = True
        return k[hit]

    def __call__(self, pose: Pose) -> bool:
        return bool(self.batch(pose.rotation[None], pose.translation[None])[0])


def world_grasp_poses(grasps: Sequence[Grasp], D: Pose):
    """Gripper poses for object-frame grasps after the object moves by D."""
    if not grasps:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    R = np.stack([g.pose.rotation for g in grasps])
    t = np.stack([g.pose.translation for g in grasps])
    return D.rotation @ R, t @ D.rotation.T + D.translation


# ---------------------------------------------------------------------------
# graph

@dataclass
class RegraspGraph:
    """Rows are grasps, columns are places: goals first, then the start, then temporaries.

    Row and column costs may be left unevaluated (nan) and filled on demand
    through the cost callbacks, so search only pays for candidates it touches.
    """

    grasps: list = field(default_factory=list)
    places: list = field(default_factory=list)
    feasible: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    grasp_cost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    place_cost: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grasp_est: np.ndarray = field(default_factory=lambda: np.zeros(0))
    place_est: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_goal: int = 0
    grasp_cost_fn: Optional[Callable] = field(default=None, repr=False)
    place_cost_fn: Optional[Callable] = field(default=None, repr=False)

    @property
    def start_col(self) -> int:
        return self.n_goal

    @property
    def shape(self):
        return self.feasible.shape

    def is_goal(self, j) -> bool:
        return j < self.n_goal

    def row_cost(self, i) -> float:
        if np.isnan(self.grasp_cost[i]):
            if self.grasp_cost_fn is None:
                raise PlannerError("grasp cost missing and no callback")
            self.grasp_cost[i], self.grasp_est[i] = self.grasp_cost_fn(i, self.grasps[i])
        return float(self.grasp_cost[i])

    def col_cost(self, j) -> float:
        if np.isnan(self.place_cost[j]):
            if self.place_cost_fn is None:
                raise PlannerError("place cost missing and no callback")
            self.place_cost[j], self.place_est[j] = self.place_cost_fn(j, self.places[j])
        return float(self.place_cost[j])

    @property
    def cell_cost(self) -> np.ndarray:
        gc = np.array([self.row_cost(i) for i in range(len(self.grasps))])
        pc = np.array([self.col_cost(j) for j in range(len(self.places))])
        return np.where(self.feasible, gc[:, None] + pc[None, :], np.inf)

    def mark_infeasible(self, i, j) -> None:
        self.feasible[i, j] = False


def update_regrasp_graph(rg: Optional[RegraspGraph], goals, new_grasps, new_places, feas,
                         grasp_costs=None, place_costs=None, w4=1.0) -> RegraspGraph:
    """Append rows and columns and evaluate only the new cells.

    goals: (displacement Pose, task cost) pairs used on the first call.  feas is
    either a FeasibilityPredicate (grasps are moved by each column's
    displacement) or any callable (grasp, place) -> bool.  Missing costs are
    left nan for lazy evaluation.
    """
    new_grasps, new_places = list(new_grasps), list(new_places)
    if rg is None or not rg.places:
        if not goals:
            raise PlannerError("goals are required on the first update")
        rg = RegraspGraph() if rg is None else rg
        cols = [Place(g if isinstance(g, Pose) else g[0], (), True, 0.0 if isinstance(g, Pose) else float(g[1]))
                for g in goals]
        cols.append(Place(Pose.identity(), (), False, None))
        rg.n_goal = len(goals)
        rg.places = []
        rg.feasible = np.zeros((len(rg.grasps), 0), dtype=bool)
        rg.place_cost = np.zeros(0)
        rg.place_est = np.zeros(0)
        pc0 = [w4 * c.goal_cost for c in cols[:-1]] + [0.0]
        new_places = cols + new_places
        place_costs = pc0 + ([np.nan] * (len(new_places) - len(cols)) if place_costs is None else list(place_costs))
    n_g0, n_p0 = len(rg.grasps), len(rg.places)
    gc = np.full(len(new_grasps), np.nan) if grasp_costs is None else np.asarray(grasp_costs, float)
    pc = np.full(len(new_places), np.nan) if place_costs is None else np.asarray(place_costs, float)
    rg.grasps += new_grasps
    rg.places += new_places
    rg.grasp_cost = np.concatenate([rg.grasp_cost, gc])
    rg.place_cost = np.concatenate([rg.place_cost, pc])
    rg.grasp_est = np.concatenate([rg.grasp_est, np.full(len(new_grasps), np.nan)])
    rg.place_est = np.concatenate([rg.place_est, np.full(len(new_places), np.nan)])
    F = np.zeros((len(rg.grasps), len(rg.places)), dtype=bool)
    F[:n_g0, :n_p0] = rg.feasible
    # new rows against all columns, then old rows against new columns
    _fill(F, rg, range(n_g0, len(rg.grasps)), range(len(rg.places)), feas)
    _fill(F, rg, range(n_g0), range(n_p0, len(rg.places)), feas)
    rg.feasible = F
    return rg


def _fill(F, rg, rows, cols, feas):
    rows = list(rows)
    if not rows:
        return
    cols = list(cols)
    if isinstance(feas, FeasibilityPredicate):
        if not cols:
            return
        grasps = [rg.grasps[i] for i in rows]
        poses = [world_grasp_poses(grasps, rg.places[j].pose) for j in cols]
        ok = feas.batch(np.concatenate([p[0] for p in poses]), np.concatenate([p[1] for p in poses]))
        F[np.ix_(rows, cols)] = ok.reshape(len(cols), len(rows)).T
        return
    for j in cols:
        F[rows, j] = [bool(feas(rg.grasps[i], rg.places[j])) for i in rows]


# ---------------------------------------------------------------------------
# search

@dataclass
class PlanStep:
    kind: str  # pick or place
    row: int
    col: int
    grasp: Grasp
    place: Place
    prob: float = float("nan")


@dataclass
class Plan:
    steps: list
    total_cost: float
    step_probs: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.steps)

    @property
    def goal_col(self) -> int:
        return self.steps[-1].col

    def well_formed(self, rg: RegraspGraph) -> bool:
        if self.m < 2 or self.m % 2:
            return False
        if self.steps[0].col != rg.start_col or not rg.is_goal(self.steps[-1].col):
            return False
        for a, b in zip(self.steps, self.steps[1:]):
            if a.kind == b.kind:
                return False
            if a.kind == "pick" and a.row != b.row:
                return False
            if a.kind == "place" and (a.col != b.col or a.row == b.row):
                return False
        return all(rg.feasible[s.row, s.col] for s in self.steps)

    def dump(self) -> str:
        lines = [f"total_cost {self.total_cost:.9g}", f"m {self.m}"]
        for s in self.steps:
            P = s.grasp.pose if s.kind == "pick" else s.place.pose
            vals = " ".join(f"{v:.9g}" for v in P.matrix[:3].ravel())
            lines.append(f"{s.kind} row={s.row} col={s.col} prob={s.prob:.6g} pose={vals}")
        return "\n".join(lines) + "\n"


def heuristic(w1, kind, col, rg: RegraspGraph) -> float:
    if kind == "holding":
        return w1
    return 0.0 if rg.is_goal(col) else 2.0 * w1


def astar(rg: RegraspGraph, weights: CostWeights, check_consistency=False):
    """Minimum-cost pick/place walk from the start column to any goal column.

    States are (placed, column, arrival row) and (holding, source column, row).
    Returns (Plan, cost), or (None, inf) when no goal is reachable.

    The heuristic depends on the column only, so the first placed state popped
    at a column has the best arrival; a later one with another arrival row
    adds just the row the first had to skip.  Holding states of one row work
    the same way over source columns.  Each column and row expands at most
    twice, keeping the search linear in the feasible cells.
    """
    if rg.n_goal < 1 or len(rg.places) <= rg.start_col:
        raise PlannerError("graph needs a start column and a goal column")
    w1 = weights.w1
    F = rg.feasible
    n_g, n_p = F.shape
    start_col = rg.start_col
    rows_at = [np.flatnonzero(F[:, j]) for j in range(n_p)]
    cols_of = [np.flatnonzero(F[i] & (np.arange(n_p) != start_col)) for i in range(n_g)]
    start = ("placed", start_col, -1)
    g = {start: 0.0}
    parent = {start: None}
    tie = itertools.count()
    heap = [(heuristic(w1, "placed", start_col, rg), next(tie), start)]
    closed = set()
    # column -> skipped arrival row after the first expansion, None once complete; same for rows
    seen_col, seen_row = {}, {}
    while heap:
        f, _, s = heapq.heappop(heap)
        if s in closed:
            continue
        closed.add(s)
        kind, col, row = s
        if kind == "placed" and rg.is_goal(col):
            return _unwind(rg, parent, s, g[s]), g[s]
        if kind == "placed":
            if col not in seen_col:
                cand = rows_at[col][rows_at[col] != row]
                seen_col[col] = row
            elif seen_col[col] is not None and seen_col[col] != row:
                r = seen_col[col]
                cand = [r] if r >= 0 and F[r, col] else []
                seen_col[col] = None
            else:
                continue
            succ = [(("holding", col, int(i)), w1 + rg.row_cost(i)) for i in cand]
        else:
            if row not in seen_row:
                cand = cols_of[row][cols_of[row] != col]
                seen_row[row] = col
            elif seen_row[row] is not None and seen_row[row] != col:
                k = seen_row[row]
                cand = [k] if k != start_col and F[row, k] else []
                seen_row[row] = None
            else:
                continue
            succ = [(("placed", int(k), row), w1 + rg.col_cost(k)) for k in cand]
        h_s = heuristic(w1, kind, col, rg)
        for t, c in succ:
            if check_consistency:
                assert h_s <= c + heuristic(w1, t[0], t[1], rg) + 1e-12
            if t in closed:
                continue
            gt = g[s] + c
            if gt < g.get(t, np.inf):
                g[t] = gt
                parent[t] = s
                heapq.heappush(heap, (gt + heuristic(w1, t[0], t[1], rg), next(tie), t))
    return None, np.inf


def _unwind(rg, parent, s, cost):
    chain = []
    while s is not None:
        chain.append(s)
        s = parent[s]
    chain.reverse()
    steps, probs = [], []
    for a, b in zip(chain, chain[1:]):
        if b[0] == "holding":
            i, j = b[2], b[1]
            est = rg.grasp_est[i]
            steps.append(PlanStep("pick", i, j, rg.grasps[i], rg.places[j], est))
            probs.append(StepProb(float(np.clip(est, 1e-6, 1.0)) if np.isfinite(est) else 1.0, "grasp"))
        else:
            i, k = b[2], b[1]
            est = rg.place_est[k]
            steps.append(PlanStep("place", i, k, rg.grasps[i], rg.places[k], est))
            if not rg.is_goal(k):
                probs.append(StepProb(float(np.clip(est, 1e-6, 1.0)) if np.isfinite(est) else 1.0, "place"))
    return Plan(steps, float(cost), probs)


# ---------------------------------------------------------------------------
# sampling loop

@dataclass
class PlannerConfig:
    N: int = 10
    grasps_per_iter: int = 50
    places_per_iter: int = 20
    temp_area: tuple = TEMP_AREA
    delta: float = DELTA
    eps_hull: float = EPS_HULL
    lower_bound: Optional[float] = None  # None: per-preset default
    approach_hints: bool = True

    def __post_init__(self):
        for name, least in (("N", 1), ("grasps_per_iter", 1), ("places_per_iter", 0)):
            if getattr(self, name) < least:
                raise PlannerError(f"{name} must be >= {least}")


@dataclass
class PlanResult:
    plan: Optional[Plan]
    cost: float
    graph: Optional[RegraspGraph]
    iterations: int
    history: list
    seconds: float


def default_lower_bound(weights: CostWeights, goal_costs) -> float:
    if weights.preset == "no_cost":
        return 0.0
    if weights.preset == "step":
        return 2 * weights.w1 + weights.w4 * min(goal_costs)
    return -np.inf


def plan_regrasp(obj, goals, N=None, cost_lower_bound=None, config: PlannerConfig = PlannerConfig(),
                 weights: CostWeights = CostWeights(), estimators: Optional[Estimators] = None,
                 feas=None, others=(), seed=0) -> PlanResult:
    """Sample grasps and temporary places, grow the graph, search, repeat.

    goals are (displacement, task cost) pairs.  Stops after N iterations or as
    soon as a plan's cost reaches the lower bound.
    """
    t0 = time.perf_counter()
    N = config.N if N is None else N
    if N < 1:
        raise PlannerError("N must be >= 1")
    goals = [(g, float(c)) for g, c in goals if np.isfinite(c)]
    if not goals:
        return PlanResult(None, np.inf, None, 0, [], time.perf_counter() - t0)
    estimators = estimators or Estimators()
    feas = feas if feas is not None else FeasibilityPredicate()
    if cost_lower_bound is None:
        cost_lower_bound = config.lower_bound
    if cost_lower_bound is None:
        cost_lower_bound = default_lower_bound(weights, [c for _, c in goals])

    def gcost(i, grasp):
        return estimators.grasp_cost(weights, obj, grasp, derive_seed(seed, "mc-grasp", i))

    def pcost(j, place):
        return estimators.place_cost(weights, obj, place, derive_seed(seed, "mc-place", j))

    rg = RegraspGraph(grasp_cost_fn=gcost, place_cost_fn=pcost)
    # approach straight down at the start and at each goal, in the object's current frame
    hints = [D.rotation.T @ [0.0, 0.0, -1.0] for D in [Pose.identity()] + [g for g, _ in goals]] \
        if config.approach_hints else []
    best, best_cost, history = None, np.inf, []
    it = 0
    for it in range(1, N + 1):
        grasps = sample_grasps(obj, estimators.gripper, config.grasps_per_iter,
                               derive_seed(seed, "grasps", it), estimators.theta_max, others,
                               approach_hints=hints)
        places = sample_temporary_places(obj, config.places_per_iter, derive_seed(seed, "places", it),
                                         config.temp_area, config.delta, config.eps_hull) \
            if config.places_per_iter else []
        rg = update_regrasp_graph(rg, goals, grasps, places, feas, w4=weights.w4)
        plan, cost = astar(rg, weights)
        if plan is not None and cost < best_cost:
            best, best_cost = plan, cost
        history.append(best_cost)
        if best is not None and best_cost <= cost_lower_bound:
            break
    return PlanResult(best, best_cost, rg, it, history, time.perf_counter() - t0)


def replan_without(rg: RegraspGraph, weights: CostWeights, cells):
    """Mark failing (row, column) cells infeasible and search again."""
    for i, j in cells:
        rg.mark_infeasible(i, j)
    return astar(rg, weights)
