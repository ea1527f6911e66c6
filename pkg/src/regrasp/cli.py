"""Command-line entry point: benchmarks, SP training, and run comparison."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .cost import PRESETS, CostWeights, auc, candidate_features, sp_fit, sp_predict
from .executor import (
    METRICS,
    BenchConfig,
    ConfigError,
    per_episode,
    read_raw_csv,
    run_benchmark,
    summary_csv,
    t_test_one_sided,
)
from .geom import Pose, derive_seed
from .grasp_place import NoContactError, check_antipodal, check_stable, sample_grasps, sample_temporary_places
from .planner import PlannerConfig, PlannerError
from .scene import PERCEPTION_MODES, TASKS, NoiseSpec, generate_scene, perceive

log = logging.getLogger("regrasp")

SEED_SCHEME = "SeedSequence(master, spawn_key=hash(labels)) per episode/round/object/candidate"

def _flag(v: str) -> bool:
    if v.lower() in ("1", "true", "yes"):
        return True
    if v.lower() in ("0", "false", "no"):
        return False
    raise ValueError(v)


# dotted key -> (section, field, parser)
CONFIG_KEYS = {
    "task": (None, "task", str),
    "cost": (None, "cost_preset", str),
    "perception": (None, "perception", str),
    "episodes": (None, "episodes", int),
    "seed": (None, "seed", int),
    "beta": (None, "beta", float),
    "relax_feasibility": (None, "relax_feasibility", _flag),
    "retry_budget": (None, "retry_budget", int),
    "n_goal": (None, "n_goal", int),
    "n_obj": (None, "n_obj", int),
    "sp_model": (None, "sp_model", str),
    "workers": (None, "workers", int),
    "mc.M": (None, "M", int),
    "gq.sigma_deg": (None, "sigma", lambda v: float(np.radians(float(v)))),
    "theta_max_deg": (None, "theta_max", lambda v: float(np.radians(float(v)))),
    "weights.w1": ("weights", "w1", float),
    "weights.w2": ("weights", "w2", float),
    "weights.w3": ("weights", "w3", float),
    "weights.w4": ("weights", "w4", float),
    "planner.N": ("planner", "N", int),
    "planner.grasps_per_iter": ("planner", "grasps_per_iter", int),
    "planner.places_per_iter": ("planner", "places_per_iter", int),
    "planner.approach_hints": ("planner", "approach_hints", _flag),
    "noise.sigma_lo": ("noise", "sigma_lo", float),
    "noise.sigma_hi": ("noise", "sigma_hi", float),
    "noise.flip_lo": ("noise", "flip_lo", float),
    "noise.flip_hi": ("noise", "flip_hi", float),
    "noise.visible_scale": ("noise", "visible_scale", float),
    "noise.correlation_length": ("noise", "correlation_length", float),
}


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def build_config(values: dict) -> BenchConfig:
    """BenchConfig from flat dotted keys; unknown keys and bad values name the field."""
    top, weights, planner, noise = {}, {}, {}, {}
    for key, raw in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{key}: unknown config key")
        section, name, parse = CONFIG_KEYS[key]
        if raw == "":
            continue  # blank means default
        try:
            val = parse(raw)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}") from None
        {None: top, "weights": weights, "planner": planner, "noise": noise}[section][name] = val
    preset = top.get("cost_preset", "step")
    if preset not in PRESETS:
        raise ConfigError(f"cost: unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    try:
        top["weights"] = CostWeights.for_preset(preset, **weights)
    except ValueError as e:
        raise ConfigError(f"weights: {e}") from None
    try:
        top["planner"] = PlannerConfig(**planner)
    except PlannerError as e:
        raise ConfigError(f"planner.{e}") from None
    base = NoiseSpec()
    try:
        top["noise"] = NoiseSpec(
            sigma_range=(noise.get("sigma_lo", base.sigma_range[0]), noise.get("sigma_hi", base.sigma_range[1])),
            flip_prob_range=(noise.get("flip_lo", base.flip_prob_range[0]),
                             noise.get("flip_hi", base.flip_prob_range[1])),
            visible_scale=noise.get("visible_scale", base.visible_scale),
            correlation_length=noise.get("correlation_length", base.correlation_length))
    except ValueError as e:
        raise ConfigError(f"noise: {e}") from None
    if "beta" in top:
        top["noise"] = replace(top["noise"], beta=top["beta"])
    return BenchConfig(**top)


def config_echo(cfg: BenchConfig) -> str:
    w, p, n = cfg.weights, cfg.planner, cfg.noise
    items = [
        ("task", cfg.task), ("cost", cfg.cost_preset), ("perception", cfg.perception),
        ("episodes", cfg.episodes), ("seed", cfg.seed), ("beta", cfg.beta),
        ("relax_feasibility", cfg.relax_feasibility), ("retry_budget", cfg.retry_budget),
        ("n_goal", cfg.n_goal), ("n_obj", cfg.n_obj if cfg.n_obj is not None else ""),
        ("sp_model", cfg.sp_model or ""), ("workers", cfg.workers), ("mc.M", cfg.M),
        ("gq.sigma_deg", np.degrees(cfg.sigma)), ("theta_max_deg", np.degrees(cfg.theta_max)),
        ("weights.w1", w.w1), ("weights.w2", w.w2), ("weights.w3", w.w3), ("weights.w4", w.w4),
        ("planner.N", p.N), ("planner.grasps_per_iter", p.grasps_per_iter),
        ("planner.places_per_iter", p.places_per_iter), ("planner.approach_hints", p.approach_hints),
        ("noise.sigma_lo", n.sigma_range[0]), ("noise.sigma_hi", n.sigma_range[1]),
        ("noise.flip_lo", n.flip_prob_range[0]), ("noise.flip_hi", n.flip_prob_range[1]),
        ("noise.visible_scale", n.visible_scale), ("noise.correlation_length", n.correlation_length),
    ]
    lines = [f"# seeds: {SEED_SCHEME}"]
    for k, v in items:
        if isinstance(v, bool):
            v = str(v).lower()
        elif isinstance(v, float):
            v = f"{v:.12g}"
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# bench

def _bench_values(args) -> dict:
    values = {}
    if args.config:
        with open(args.config) as fh:
            values.update(parse_config_text(fh.read()))
    for flag, key in (("task", "task"), ("cost", "cost"), ("perception", "perception"),
                      ("episodes", "episodes"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            values[key] = str(v)
    for item in args.overrides or []:
        if "=" not in item:
            raise ConfigError(f"{item}: overrides must look like key=value")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    return values


def cmd_bench(args) -> int:
    cfg = build_config(_bench_values(args))
    out = args.out
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.echo"), "w") as fh:
        fh.write(config_echo(cfg))
    res = run_benchmark(cfg, progress=lambda e: log.info("episode %d done", e))
    with open(os.path.join(out, "raw.csv"), "w", newline="") as fh:
        fh.write(res.raw_csv)
    text = summary_csv(res.summary, cfg.cost_preset, res.planning_time)
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        fh.write(text)
    if args.dump_plans:
        d = os.path.join(out, "plan_dumps")
        os.makedirs(d, exist_ok=True)
        for name, body in res.plan_dumps:
            with open(os.path.join(d, name), "w") as fh:
                fh.write(body)
    print(text, end="")
    return 1 if res.crashed else 0


# ---------------------------------------------------------------------------
# SP training

def sp_dataset(n_candidates: int, seed: int = 0, noise: NoiseSpec = NoiseSpec(), task="packing",
               grasps_per_object=40, places_per_object=15):
    """Labeled (features, label, scene) rows for grasps and places on corrupted perception.

    Labels come from the ground-truth antipodal and stability checks.
    """
    data = {"grasp": ([], [], []), "place": ([], [], [])}
    s = 0
    while len(data["grasp"][0]) + len(data["place"][0]) < n_candidates:
        scene_seed = derive_seed(seed, "sp-scene", s)
        scene = generate_scene(scene_seed, task)
        percs = perceive(scene, "corrupted", replace(noise, seed=derive_seed(seed, "sp-noise", s)))
        by_id = {o.object_id: o for o in scene}
        for p in percs:
            gt = by_id[p.true_id]
            others = [q.completed for q in percs if q is not p]
            for g in sample_grasps(p, count=grasps_per_object, seed=derive_seed(seed, "sp-g", s, p.true_id),
                                   others=others):
                try:
                    y = check_antipodal(gt.surface, g)
                except NoContactError:
                    y = False
                _append(data["grasp"], candidate_features(p, g), y, s)
            for pl in sample_temporary_places(p, places_per_object, derive_seed(seed, "sp-p", s, p.true_id)):
                moved = gt.moved(pl.pose)
                y = check_stable(moved.surface, Pose.identity(), moved.center_of_mass)
                _append(data["place"], candidate_features(p, pl), y, s)
        s += 1
    return {k: (np.array(X), np.array(y, float), np.array(g)) for k, (X, y, g) in data.items()}


def _append(bucket, x, y, group):
    bucket[0].append(x)
    bucket[1].append(float(y))
    bucket[2].append(group)


def train_sp(n_candidates=10_000, seed=0, epochs=2000, noise: NoiseSpec = NoiseSpec(), holdout=0.2):
    """Fit grasp and place models; the last scenes are held out.  Returns (models, metrics)."""
    data = sp_dataset(n_candidates, seed, noise)
    models, metrics = {}, {}
    for kind, (X, y, grp) in data.items():
        cut = np.quantile(grp, 1 - holdout)
        tr, te = grp < cut, grp >= cut
        if tr.sum() == 0 or te.sum() == 0:
            tr = te = np.ones(len(y), dtype=bool)
        model = sp_fit(X[tr], y[tr], epochs=epochs, seed=seed, kind=kind)
        p = np.clip(sp_predict(model, X[te]), 1e-12, 1 - 1e-12)
        ce = float(-np.mean(y[te] * np.log(p) + (1 - y[te]) * np.log(1 - p)))
        a = auc(p, y[te] > 0.5) if 0 < y[te].sum() < len(y[te]) else float("nan")
        models[kind] = model
        metrics[kind] = {"n_train": int(tr.sum()), "n_test": int(te.sum()), "positive_rate": float(y.mean()),
                         "heldout_cross_entropy": ce, "heldout_auc": a}
    return models, metrics


def cmd_train_sp(args) -> int:
    models, metrics = train_sp(args.candidates, args.seed, args.epochs)
    os.makedirs(args.out, exist_ok=True)
    for kind, m in models.items():
        m.save(os.path.join(args.out, f"{kind}.sp"))
    with open(os.path.join(args.out, "metrics.txt"), "w") as fh:
        for kind, vals in metrics.items():
            for k, v in vals.items():
                fh.write(f"{kind}.{k}={v:.6g}\n" if isinstance(v, float) else f"{kind}.{k}={v}\n")
    for kind, vals in metrics.items():
        print(kind, " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in vals.items()))
    return 0


# ---------------------------------------------------------------------------
# compare

class MismatchedRunsError(ValueError):
    pass


def _run_info(path):
    echo = {}
    with open(os.path.join(path, "config.echo")) as fh:
        echo = parse_config_text(fh.read())
    rows = read_raw_csv(os.path.join(path, "raw.csv"))
    return echo, rows


def compare_runs(paths):
    """Pairwise one-sided t-tests per metric; rows (run_a, run_b, metric, mean_a, mean_b, p)."""
    if len(paths) < 2:
        raise MismatchedRunsError("need at least two runs")
    infos = [_run_info(p) for p in paths]
    ref = infos[0][0]
    for p, (echo, _) in zip(paths, infos):
        for key in ("task", "seed", "episodes"):
            if echo.get(key) != ref.get(key):
                raise MismatchedRunsError(f"{p}: {key} differs from {paths[0]}")
    out = []
    for a, b in ((a, b) for a in range(len(paths)) for b in range(len(paths)) if a != b):
        for m in METRICS:
            va = per_episode(infos[a][1], m)
            vb = per_episode(infos[b][1], m)
            xa = [v for v in va.values() if np.isfinite(v)]
            xb = [v for v in vb.values() if np.isfinite(v)]
            if len(xa) < 2 or len(xb) < 2:
                continue
            try:
                p = t_test_one_sided(xa, xb)
            except ValueError:
                # zero pooled variance: the direction is certain or there is none
                p = 0.5 if np.mean(xa) == np.mean(xb) else float(np.mean(xa) < np.mean(xb))
            out.append((paths[a], paths[b], m, float(np.mean(xa)), float(np.mean(xb)), p))
    return out


def cmd_compare(args) -> int:
    rows = compare_runs(args.runs)
    lines = [["run_a", "run_b", "metric", "mean_a", "mean_b", "p_value"]]
    lines += [[a, b, m, f"{x:.6g}", f"{y:.6g}", f"{p:.6g}"] for a, b, m, x, y, p in rows]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(lines)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerows(lines)
    return 0


# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="regrasp", description="Regrasp planning benchmark harness.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run benchmark episodes")
    b.add_argument("--config", help="key=value config file")
    b.add_argument("--task", choices=TASKS)
    b.add_argument("--cost", help="cost preset: " + ", ".join(PRESETS))
    b.add_argument("--perception", choices=PERCEPTION_MODES)
    b.add_argument("--episodes", type=int)
    b.add_argument("--seed", type=int)
    b.add_argument("--out", default="run")
    b.add_argument("--dump-plans", action="store_true")
    b.add_argument("overrides", nargs="*", help="dotted key=value overrides, e.g. planner.N=4")
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train-sp", help="fit the SP grasp and place models")
    t.add_argument("--candidates", type=int, default=10_000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--out", default="sp_model")
    t.set_defaults(func=cmd_train_sp)

    c = sub.add_parser("compare", help="one-sided t-tests between runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, MismatchedRunsError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
