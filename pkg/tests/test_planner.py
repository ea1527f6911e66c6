import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regrasp import cost as C
from regrasp import planner as PL
from regrasp import scene as S
from regrasp.geom import Pose
from regrasp.grasp_place import Grasp, Place

STEP = C.CostWeights.for_preset("step")


def toy_graph(F, g_probs, p_probs, goal_costs, weights):
    """Graph over dummy candidates: columns are goals, then start, then temporaries."""
    n_goal = len(goal_costs)
    n_g, n_p = F.shape
    grasps = [Grasp(Pose.from_translation([i, 0, 0])) for i in range(n_g)]
    places = [Place(Pose.identity(), (), j < n_goal, goal_costs[j] if j < n_goal else None) for j in range(n_p)]
    gc = np.array([weights.w2 * -np.log(max(p, C.EPS_PROB)) for p in g_probs])
    pc = np.array([weights.w4 * goal_costs[j] if j < n_goal else
                   (0.0 if j == n_goal else weights.w3 * -np.log(max(p_probs[j], C.EPS_PROB)))
                   for j in range(n_p)])
    return PL.RegraspGraph(grasps, places, F.copy(), gc, pc, np.array(g_probs, float),
                           np.array(p_probs, float), n_goal)


def random_graph(rng, weights):
    n_g = int(rng.integers(1, 7))
    n_p = int(rng.integers(2, 7))
    n_goal = int(rng.integers(1, n_p))
    F = rng.random((n_g, n_p)) < rng.uniform(0.3, 0.9)
    g = rng.uniform(0.05, 1.0, n_g)
    p = rng.uniform(0.05, 1.0, n_p)
    c = rng.uniform(0, 3, n_goal)
    return toy_graph(F, g, p, c, weights), (F, g, p, c, n_goal)


def bounded_oracle(F, g, p, c, n_goal, weights, max_steps=8):
    """Cheapest plan of at most max_steps steps, each candidate costed with plan_cost.

    Walks are enumerated layer by layer as (grasp rows, temporary columns,
    goal column) and every complete walk is priced from scratch.
    """
    start = n_goal
    n_g, n_p = F.shape
    best = np.inf
    # frontier items: (rows so far, temp cols so far, current col, last row)
    frontier = [((), (), start, -1)]
    for _ in range(max_steps // 2):
        nxt = []
        for rows, cols, col, last in frontier:
            for i in range(n_g):
                if i == last or not F[i, col]:
                    continue
                for k in range(n_p):
                    if k == col or k == start or not F[i, k]:
                        continue
                    r2 = rows + (i,)
                    if k < n_goal:
                        steps = [C.StepProb(g[x], "grasp") for x in r2] + [C.StepProb(p[y], "place") for y in cols]
                        best = min(best, C.plan_cost(weights, steps, 2 * len(r2), c[k]))
                    else:
                        nxt.append((r2, cols + (k,), k, i))
        frontier = nxt
    return best


def test_update_minimal_graph():
    rg = PL.update_regrasp_graph(None, [(Pose.identity(), 0.5)], [Grasp(Pose.identity())], [],
                                 lambda gr, pl: True)
    assert rg.feasible.shape == (1, 2) and rg.feasible.all()
    assert rg.n_goal == 1 and rg.start_col == 1
    assert rg.place_cost[0] == 0.5 and rg.place_cost[1] == 0.0


def test_infeasible_row_is_infinite():
    bad = Grasp(Pose.from_translation([9, 9, 9]))
    rg = PL.update_regrasp_graph(None, [(Pose.identity(), 0.0)], [Grasp(Pose.identity()), bad], [],
                                 lambda gr, pl: gr is not bad, grasp_costs=[0.0, 0.0])
    assert np.all(np.isinf(rg.cell_cost[1]))
    assert np.all(np.isfinite(rg.cell_cost[0]))


def test_update_twice_equals_union():
    rng = np.random.default_rng(0)
    grasps = [Grasp(Pose.from_translation(rng.normal(size=3))) for _ in range(6)]
    places = [Place(Pose.from_translation(rng.normal(size=3))) for _ in range(4)]
    feas = lambda gr, pl: (np.sum(gr.pose.translation) + np.sum(pl.pose.translation)) % 1 < 0.6
    goals = [(Pose.from_translation([0.3, 0, 0]), 1.0)]
    a = PL.update_regrasp_graph(None, goals, grasps[:3], places[:2], feas)
    a = PL.update_regrasp_graph(a, goals, grasps[3:], places[2:], feas)
    b = PL.update_regrasp_graph(None, goals, grasps, places, feas)
    assert np.array_equal(a.feasible, b.feasible)
    assert np.array_equal(a.place_cost, b.place_cost, equal_nan=True)


def test_update_leaves_old_cells_untouched():
    calls = []

    def feas(gr, pl):
        calls.append((id(gr), id(pl)))
        return True

    goals = [(Pose.identity(), 0.0)]
    rg = PL.update_regrasp_graph(None, goals, [Grasp(Pose.identity())], [Place(Pose.identity())], feas)
    n = len(calls)
    PL.update_regrasp_graph(rg, goals, [Grasp(Pose.identity())], [], feas)
    assert len(calls) - n == 3  # one new row against three columns


def test_two_step_plan():
    F = np.ones((1, 2), dtype=bool)
    rg = toy_graph(F, [0.9], [1.0, 1.0], [0.7], STEP)
    plan, cost = PL.astar(rg, STEP)
    assert plan.m == 2 and plan.well_formed(rg)
    assert cost == pytest.approx(2 * STEP.w1 + STEP.w4 * 0.7)


def test_forced_regrasp():
    # columns: goal, start, temporary
    F = np.array([[False, True, True], [True, False, True]])
    rg = toy_graph(F, [0.9, 0.9], [1, 1, 0.8], [0.0], STEP)
    plan, cost = PL.astar(rg, STEP)
    assert plan.m == 4 and plan.well_formed(rg)
    assert [s.col for s in plan.steps] == [1, 2, 2, 0]
    assert [s.row for s in plan.steps] == [0, 0, 1, 1]
    assert cost == 4.0


def test_unreachable_goal():
    F = np.array([[False, True, True]])
    rg = toy_graph(F, [0.9], [1, 1, 1], [0.0], STEP)
    assert PL.astar(rg, STEP) == (None, np.inf)


@pytest.mark.parametrize("preset", ["step", "mc", "no_cost"])
def test_astar_matches_enumeration(preset):
    w = C.CostWeights.for_preset(preset, w2=1.3, w3=0.7, w4=0.5)
    rng = np.random.default_rng(C.PRESETS.index(preset))
    for _ in range(200):
        rg, (F, g, p, c, n_goal) = random_graph(rng, w)
        plan, cost = PL.astar(rg, w, check_consistency=True)
        want = bounded_oracle(F, g, p, c, n_goal, w)
        if plan is None:
            assert want == np.inf
            continue
        assert plan.well_formed(rg)
        assert plan.m <= 8
        assert cost == pytest.approx(want, rel=1e-12, abs=1e-12)
        assert C.plan_cost(w, plan.step_probs, plan.m, c[plan.goal_col]) == pytest.approx(cost, abs=1e-9)


def test_replan_without_failing_cell():
    F = np.ones((2, 3), dtype=bool)
    rg = toy_graph(F, [0.9, 0.5], [1, 1, 1], [0.0], C.CostWeights.for_preset("mc"))
    plan, _ = PL.astar(rg, C.CostWeights.for_preset("mc"))
    first = plan.steps[0].row
    plan2, _ = PL.replan_without(rg, C.CostWeights.for_preset("mc"), [(first, rg.start_col)])
    assert plan2.steps[0].row != first


def test_lazy_costs_are_filled_on_demand():
    seen = []
    F = np.ones((3, 3), dtype=bool)
    rg = toy_graph(F, [0.9] * 3, [1] * 3, [0.0], STEP)
    rg.grasp_cost[:] = np.nan
    rg.grasp_cost_fn = lambda i, gr: (seen.append(i), (0.1 * i, 1.0))[1]
    plan, cost = PL.astar(rg, STEP)
    assert cost == pytest.approx(2.0)
    assert plan.steps[0].row == 0
    assert set(seen) <= {0, 1, 2}


# ---------------------------------------------------------------------------
# feasibility

def test_feasibility_checks():
    f = PL.FeasibilityPredicate()
    down = np.diag([1.0, -1.0, -1.0])
    assert f(Pose(down, [0, 0, 0.2]))
    assert not f(Pose(np.eye(3), [0, 0, 0.2]))  # approach pointing up
    assert not f(Pose(down, [0.9, 0, 0.2]))  # outside workspace
    assert not f(Pose(down, [0, 0, 0.01]))  # wrist above, fingers through the table
    blocked = PL.FeasibilityPredicate(obstacles=np.array([[0.0, 0.0, 0.25]]))
    assert not blocked(Pose(down, [0, 0, 0.2]))
    assert PL.FeasibilityPredicate(relaxed=True)(Pose(np.eye(3), [5, 5, -1]))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_feasibility_batch_matches_scalar(seed):
    rng = np.random.default_rng(seed)
    obs = rng.uniform(-0.2, 0.2, size=(50, 3)) + [0, 0, 0.2]
    f = PL.FeasibilityPredicate(obstacles=obs)
    from regrasp.geom import random_rotation
    Rs = np.stack([random_rotation(rng) for _ in range(20)])
    ts = rng.uniform(-0.3, 0.3, size=(20, 3)) + [0, 0, 0.2]
    batch = f.batch(Rs, ts)
    assert list(batch) == [f(Pose(R, t)) for R, t in zip(Rs, ts)]


# ---------------------------------------------------------------------------
# sampling loop

def box_object():
    spec = S.ShapeSpec("box", (0.04, 0.06, 0.10))
    scene = S.generate_scene(0, "canonical", n_obj=1, specs=[spec])
    return S.perceive(scene, "ground_truth", S.NoiseSpec())[0]


def test_step_preset_exits_on_lower_bound():
    obj = box_object()
    goal = (Pose.from_translation([0.02, 0.01, 0.0]), 0.0)
    res = PL.plan_regrasp(obj, [goal], N=5, weights=STEP, seed=1,
                          config=PL.PlannerConfig(grasps_per_iter=20, places_per_iter=5))
    assert res.plan is not None and res.plan.m == 2
    assert res.iterations == 1
    assert res.cost == pytest.approx(2.0)


def test_no_goals_means_no_plan():
    obj = box_object()
    res = PL.plan_regrasp(obj, [], N=3, weights=STEP)
    assert res.plan is None and res.iterations == 0
    res = PL.plan_regrasp(obj, [(Pose.identity(), np.inf)], N=3, weights=STEP)
    assert res.plan is None


def test_no_cost_takes_first_plan():
    obj = box_object()
    goal = (Pose.from_translation([0.02, 0.01, 0.0]), 0.0)
    res = PL.plan_regrasp(obj, [goal], N=5, weights=C.CostWeights.for_preset("no_cost"), seed=2,
                          config=PL.PlannerConfig(grasps_per_iter=20, places_per_iter=5))
    assert res.iterations == 1 and res.cost == 0.0


def test_plan_cost_nonincreasing_and_deterministic():
    scene = S.generate_scene(3, "canonical")
    percs = S.perceive(scene, "corrupted", S.NoiseSpec(seed=3))
    w = C.CostWeights.for_preset("cu")
    cfg = PL.PlannerConfig(N=4, grasps_per_iter=10, places_per_iter=4)
    goal = (Pose.from_axis_angle([1, 0, 0], np.pi / 2) @ Pose.from_translation([0.1, 0.0, 0.0]), 0.0)
    for seed in range(100):
        obj = percs[seed % len(percs)]
        res = PL.plan_regrasp(obj, [goal], weights=w, config=cfg, seed=seed,
                              feas=PL.FeasibilityPredicate(relaxed=True))
        h = np.array(res.history)
        assert np.all(np.diff(h[np.isfinite(h)]) <= 0)
        if res.plan is not None:
            assert res.plan.well_formed(res.graph)
        if seed < 3:
            again = PL.plan_regrasp(obj, [goal], weights=w, config=cfg, seed=seed,
                                    feas=PL.FeasibilityPredicate(relaxed=True))
            assert again.history == res.history


def test_default_lower_bounds():
    assert PL.default_lower_bound(C.CostWeights.for_preset("no_cost"), [1.0]) == 0.0
    assert PL.default_lower_bound(C.CostWeights.for_preset("step", w4=2.0), [1.5, 0.5]) == 3.0
    assert PL.default_lower_bound(C.CostWeights.for_preset("mc"), [0.0]) == -np.inf


def test_feasibility_batch_matches_pose_loop():
    rng = np.random.default_rng(4)
    obs = rng.uniform(-0.15, 0.15, size=(3000, 3)) + [0, 0, 0.15]
    f = PL.FeasibilityPredicate(obstacles=obs)
    from regrasp.geom import random_rotation
    R = np.stack([random_rotation(rng) for _ in range(2000)])
    t = rng.uniform(-0.2, 0.2, size=(2000, 3)) + [0, 0, 0.2]
    want = []
    for Ri, ti in zip(R, t):
        ok = -Ri[2, 2] >= np.cos(f.max_tilt) and np.all((ti >= f.workspace_lo) & (ti <= f.workspace_hi))
        corners = np.array([[b[k][0], b[l][1], b[m][2]] for b in f.gripper.body_boxes()
                            for k in (0, 1) for l in (0, 1) for m in (0, 1)])
        ok = ok and (corners @ Ri[2] + ti[2]).min() >= 0
        if ok:
            local = (obs - ti) @ Ri
            ok = not any(np.all((local >= lo - f.margin) & (local <= hi + f.margin), axis=1).any()
                         for lo, hi in f.gripper.body_boxes())
        want.append(ok)
    got = f.batch(R, t)
    assert np.array_equal(got, want)
    assert 0 < got.sum() < (-R[:, 2, 2] >= np.cos(f.max_tilt)).sum()
