"""Per-step success probability estimators and the scalarized plan cost."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geom import DegenerateHullError, PointCloud, hull_depth_2d, inverse_erf, truncated_normal_cdf
from .grasp_place import (
    CONTACT_BAND,
    DELTA,
    EPS_HULL,
    THETA_MAX,
    Grasp,
    GripperModel,
    Place,
    _antipodal_rows,
    batch_contacts,
    contact_angles,
    grasp_contacts,
    support_contacts,
)
from .scene import NORMAL_K, UBAR_MAX, orient_normals, pca_normals, random_directions, rotate_between_batch

EPS_PROB = 1e-6
PRESETS = ("no_cost", "step", "gq", "mc", "mc_gq", "cu", "sp")
SIGMA_GQ = np.radians(8.0)
MC_SAMPLES = 100
TAIL_SIGMAS = 4.0


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    preset: str = "mc"

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3, self.w4) < 0:
            raise CostError("weights must be nonnegative")
        if self.preset not in PRESETS:
            raise CostError(f"unknown cost preset {self.preset!r}")
        if self.preset == "no_cost" and any((self.w1, self.w2, self.w3, self.w4)):
            raise CostError("no_cost requires all-zero weights")
        if self.preset == "step" and (self.w1 != 1 or self.w2 or self.w3):
            raise CostError("step requires w1 = 1 and w2 = w3 = 0")

    @classmethod
    def for_preset(cls, preset: str, w1=1.0, w2=1.0, w3=1.0, w4=1.0) -> "CostWeights":
        if preset == "no_cost":
            return cls(0.0, 0.0, 0.0, 0.0, preset)
        if preset == "step":
            return cls(1.0, 0.0, 0.0, w4, preset)
        return cls(w1, w2, w3, w4, preset)

    @property
    def grasp_estimators(self) -> tuple:
        return {"gq": ("gq",), "mc": ("mc",), "mc_gq": ("mc", "gq"), "cu": ("cu",), "sp": ("sp",)}.get(
            self.preset, ())

    @property
    def place_estimators(self) -> tuple:
        return {"mc": ("mc",), "mc_gq": ("mc",), "cu": ("cu",), "sp": ("sp",)}.get(self.preset, ())


@dataclass(frozen=True)
class StepProb:
    value: float
    kind: str  # grasp or place

    def __post_init__(self):
        if self.kind not in ("grasp", "place"):
            raise CostError("kind must be grasp or place")
        if not 0 < self.value <= 1:
            raise CostError("probabilities must lie in (0, 1]")

    @property
    def clamped(self) -> float:
        return max(self.value, EPS_PROB)


def clamp_prob(p):
    return float(min(max(p, EPS_PROB), 1.0))


def plan_cost(weights: CostWeights, step_probs: Sequence[StepProb], m: int, c: float) -> float:
    """w1 m - w2 sum log g - w3 sum log p + w4 c over a plan with m/2 grasps and m/2 - 1 places."""
    if m < 2 or m % 2:
        raise CostError("m must be even and at least 2")
    g = [s for s in step_probs if s.kind == "grasp"]
    p = [s for s in step_probs if s.kind == "place"]
    if len(g) != m // 2 or len(p) != m // 2 - 1:
        raise CostError("step probabilities do not match m")
    cost = weights.w1 * m
    cost -= weights.w2 * sum(np.log(s.clamped) for s in g)
    cost -= weights.w3 * sum(np.log(s.clamped) for s in p)
    return float(cost + weights.w4 * c)


def neg_log(p) -> float:
    return float(-np.log(clamp_prob(p)))


# ---------------------------------------------------------------------------
# GQ

def gq_grasp_prob(shape: PointCloud, grasp: Grasp, theta_max=THETA_MAX, sigma=SIGMA_GQ,
                  gripper: GripperModel = GripperModel(), band=CONTACT_BAND) -> float:
    """Product over both contacts of the truncated-normal mass below theta_max."""
    if sigma <= 0:
        raise CostError("sigma must be positive")
    left, right = grasp_contacts(shape, grasp, gripper, band)
    if left == right:
        return EPS_PROB
    mus = contact_angles(shape.points, shape.normals, left, right)
    return clamp_prob(gq_from_angles(mus, theta_max, sigma))


def gq_from_angles(mus, theta_max=THETA_MAX, sigma=SIGMA_GQ) -> float:
    return float(np.prod([truncated_normal_cdf(theta_max, mu, sigma, 0.0, np.pi) for mu in mus]))


# ---------------------------------------------------------------------------
# shape sampling

def sigma_from_ubar(ubar, beta):
    """Offset scale from completion confidence; a saturated confidence means no offset."""
    ubar = np.asarray(ubar, dtype=float)
    sat = ubar >= UBAR_MAX
    sig = np.zeros_like(ubar)
    if (~sat).any():
        sig[~sat] = beta / (np.sqrt(2.0) * inverse_erf(ubar[~sat]))
    return sig


@dataclass
class ShapeModel:
    """Per-object quantities reused by every sampled shape."""

    points: np.ndarray
    normals: np.ndarray
    ubar: np.ndarray
    useg: np.ndarray
    sigma: np.ndarray
    neighbors: np.ndarray
    pca_clean: np.ndarray
    com: np.ndarray

    @classmethod
    def of(cls, obj, beta) -> "ShapeModel":
        cache = getattr(obj, "cache", None)
        key = ("shape_model", float(beta))
        if cache is not None and key in cache:
            return cache[key]
        P, N = obj.completed.points, obj.completed.normals
        k = min(NORMAL_K, len(P))
        nb = cKDTree(P).query(P, k=k)[1].reshape(len(P), k)
        model = cls(P, N, obj.completion_uncertainty, obj.segmentation_uncertainty,
                    sigma_from_ubar(obj.completion_uncertainty, beta), nb,
                    orient_normals(pca_normals(P, nb), N), obj.com_estimate)
        if cache is not None:
            cache[key] = model
        return model


def draw_offsets(rng, sigma, M):
    """M x n x 3 offsets: uniform directions scaled by N(0, sigma^2)."""
    n = len(sigma)
    dirs = random_directions(rng, M * n).reshape(M, n, 3)
    return dirs * (rng.normal(size=(M, n)) * sigma)[..., None]


def sample_shape(obj, beta=0.005, seed=0, resample_segmentation=True):
    """One shape draw: (cloud with re-estimated normals, kept-point mask).

    Each point moves along a uniform random direction by N(0, sigma_i^2) with
    sigma_i from the completion confidence; points failing a Bernoulli(U_i)
    segmentation draw are dropped.
    """
    model = ShapeModel.of(obj, beta)
    rng = np.random.default_rng(seed)
    n = len(model.points)
    kept = rng.random(n) < model.useg if resample_segmentation else np.ones(n, dtype=bool)
    pts = model.points + draw_offsets(rng, model.sigma, 1)[0]
    normals = _sample_normals(model, pts[None], kept[None], np.arange(n)[None, :])[0]
    return PointCloud(pts[kept], normals[kept]), kept


def _sample_normals(model: ShapeModel, pos, kept, idx, lookup=None):
    """Normals of sampled shapes at point indices idx (M x c) from local weighted PCA.

    pos (M x q x 3) and kept (M x q) hold the sampled points; lookup maps a
    full point index to its slot in pos (identity when None).  The completed
    normal is rotated by the change in local PCA normal.
    """
    M, c = idx.shape
    nb = model.neighbors[idx]  # M x c x k
    if lookup is not None:
        nb = lookup[nb]
    mrow = np.arange(M)[:, None, None]
    q = pos[mrow, nb]  # M x c x k x 3
    w = kept[mrow, nb].astype(float)[..., None]
    wsum = np.maximum(w.sum(axis=2, keepdims=True), 1.0)
    mean = (w * q).sum(axis=2, keepdims=True) / wsum
    d = (q - mean) * np.sqrt(w)
    cov = np.einsum("mcki,mckj->mcij", d, d)
    _, vecs = np.linalg.eigh(cov)
    b = vecs[..., 0].reshape(-1, 3)
    a = model.pca_clean[idx].reshape(-1, 3)
    b = orient_normals(b, a)
    out = rotate_between_batch(a, b, model.normals[idx].reshape(-1, 3))
    return out.reshape(M, c, 3)


# ---------------------------------------------------------------------------
# MC

def mc_grasp_successes(obj, grasp: Grasp, M=MC_SAMPLES, seed=0, beta=0.005, theta_max=THETA_MAX,
                       gripper: GripperModel = GripperModel(), band=CONTACT_BAND) -> np.ndarray:
    model = ShapeModel.of(obj, beta)
    rng = np.random.default_rng(seed)
    lo, hi = gripper.closing_region
    local0 = grasp.pose.inverse().apply(model.points)
    reach = TAIL_SIGMAS * model.sigma + 1e-6
    sel = np.flatnonzero(np.all((local0 >= lo - reach[:, None]) & (local0 <= hi + reach[:, None]), axis=1))
    if len(sel) == 0:
        return np.zeros(M, dtype=bool)
    # positions are needed for the selection plus its normal-estimation neighbors
    Q = np.unique(np.concatenate([sel, model.neighbors[sel].ravel()]))
    kept = rng.random((M, len(Q))) < model.useg[Q]
    pos = model.points[Q] + draw_offsets(rng, model.sigma[Q], M)
    R, t = grasp.pose.rotation, grasp.pose.translation
    local = (pos - t) @ R
    in_sel = np.isin(Q, sel)
    left, right, nonempty = batch_contacts((local[..., 0], local[..., 1], local[..., 2]),
                                           valid=kept & in_sel, band=band, gripper=gripper)
    lookup = np.full(len(model.points), -1)
    lookup[Q] = np.arange(len(Q))
    idx = np.stack([Q[left], Q[right]], axis=1)
    nrm = _sample_normals(model, pos, kept, idx, lookup) @ R
    r = np.arange(M)
    ok = _antipodal_rows(local[r, left], local[r, right], nrm[:, 0], nrm[:, 1], theta_max)
    return ok & nonempty & (left != right)


def _support_depths(z, xy, com_xy, kept, delta):
    """Stability depth per sample; z, xy are M x n(x2), kept M x n."""
    zmin = np.where(kept, z, np.inf).min(axis=1, keepdims=True)
    S = kept & (z <= zmin + delta)
    out = np.full(len(z), -np.inf)
    for m in np.flatnonzero(S.sum(axis=1) >= 3):
        pts = xy[m, S[m]]
        try:
            out[m] = hull_depth_2d(com_xy, pts)
        except DegenerateHullError:
            pass
    return out


def mc_place_successes(obj, place: Place, M=MC_SAMPLES, seed=0, beta=0.005, delta=DELTA,
                       eps_hull=EPS_HULL) -> np.ndarray:
    model = ShapeModel.of(obj, beta)
    rng = np.random.default_rng(seed)
    D = place.pose
    z0 = D.apply(model.points)[:, 2]
    tail = TAIL_SIGMAS * model.sigma
    # points that cannot reach the support band without a >4 sigma excursion are skipped
    Q = np.flatnonzero(z0 - tail <= (z0 + tail).min() + delta)
    kept = rng.random((M, len(Q))) < model.useg[Q]
    pos = D.apply(model.points[Q] + draw_offsets(rng, model.sigma[Q], M))
    com = D.apply(model.com.reshape(1, 3))[0]
    depth = _support_depths(pos[..., 2], pos[..., :2], com[:2], kept, delta)
    return depth > eps_hull


def mc_prob(obj, candidate, M=MC_SAMPLES, seed=0, beta=0.005, theta_max=THETA_MAX,
            gripper: GripperModel = GripperModel(), delta=DELTA, eps_hull=EPS_HULL) -> float:
    """Fraction of M sampled shapes on which the candidate stays antipodal (or stable)."""
    if M < 1:
        raise CostError("M must be >= 1")
    if isinstance(candidate, Grasp):
        ok = mc_grasp_successes(obj, candidate, M, seed, beta, theta_max, gripper)
    else:
        ok = mc_place_successes(obj, candidate, M, seed, beta, delta, eps_hull)
    return clamp_prob(ok.mean())


# ---------------------------------------------------------------------------
# CU

def cu_prob(obj, candidate, gripper: GripperModel = GripperModel(), delta=DELTA) -> float:
    """Product of completion and segmentation confidence over the contacts."""
    ubar, useg = obj.completion_uncertainty, obj.segmentation_uncertainty
    if isinstance(candidate, Grasp):
        idx = grasp_contacts(obj.completed, candidate, gripper)
    else:
        idx = candidate.support_contacts
        if len(idx) != 3:
            idx = support_contacts(candidate.pose.apply(obj.completed.points), delta)
    idx = np.asarray(idx, dtype=int)
    return clamp_prob(np.prod(ubar[idx] * useg[idx]))


# ---------------------------------------------------------------------------
# SP

SP_FEATURES = (
    "count", "extent_x", "extent_y", "extent_z",
    "ubar_mean", "ubar_min", "useg_mean", "useg_min", "joint_mean", "joint_min",
    "low_ubar_mean", "low_ubar_min", "low_useg_mean", "low_useg_min", "low_joint_mean", "low_joint_min",
    "centroid_x", "centroid_y", "centroid_z",
)
SP_K = 16


def sp_features(encoding: PointCloud, ubar, useg, k=SP_K, rank=None) -> np.ndarray:
    """Fixed-length, order-free summary of an encoded candidate.

    `rank` orders points for the k-lowest block (smaller is lower); it defaults
    to the z coordinate.
    """
    P = encoding.points if isinstance(encoding, PointCloud) else np.asarray(encoding, float).reshape(-1, 3)
    ubar = np.asarray(ubar, dtype=float)
    useg = np.asarray(useg, dtype=float)
    if len(P) == 0:
        return np.zeros(len(SP_FEATURES))
    rank = P[:, 2] if rank is None else np.asarray(rank, dtype=float)
    joint = ubar * useg
    # ties in rank are broken by value so the block is independent of point order
    order = np.lexsort((joint, useg, ubar, rank))[:k]

    def stats(sel):
        return [ubar[sel].mean(), ubar[sel].min(), useg[sel].mean(), useg[sel].min(),
                joint[sel].mean(), joint[sel].min()]

    allsel = np.arange(len(P))
    return np.array([len(P), *(P.max(axis=0) - P.min(axis=0)), *stats(allsel), *stats(order),
                     *P.mean(axis=0)])


def grasp_encoding(obj, grasp: Grasp, gripper: GripperModel = GripperModel()):
    """Closing-region points in the gripper frame; rank is depth behind the nearer contact."""
    local = grasp.pose.inverse().apply(obj.completed.points)
    lo, hi = gripper.closing_region
    idx = np.flatnonzero(np.all((local >= lo) & (local <= hi), axis=1))
    pts = local[idx]
    x = pts[:, 0]
    rank = np.minimum(x.max() - x, x - x.min()) if len(x) else x
    return PointCloud(pts), obj.completion_uncertainty[idx], obj.segmentation_uncertainty[idx], rank


def place_encoding(obj, place: Place):
    """Cloud at the place pose, shifted so its bottom center sits at the origin."""
    pts = place.pose.apply(obj.completed.points)
    center = np.array([(pts[:, 0].max() + pts[:, 0].min()) / 2, (pts[:, 1].max() + pts[:, 1].min()) / 2,
                       pts[:, 2].min()])
    return PointCloud(pts - center), obj.completion_uncertainty, obj.segmentation_uncertainty, None


def candidate_features(obj, candidate, gripper: GripperModel = GripperModel()) -> np.ndarray:
    if isinstance(candidate, Grasp):
        enc, ub, us, rank = grasp_encoding(obj, candidate, gripper)
    else:
        enc, ub, us, rank = place_encoding(obj, candidate)
    return sp_features(enc, ub, us, rank=rank)


@dataclass
class SpModel:
    """Logistic success predictor over standardized features."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    scale: np.ndarray
    names: tuple = SP_FEATURES
    kind: str = "grasp"
    n_train: int = 0
    loss: float = float("nan")

    def logit(self, X) -> np.ndarray:
        Z = (np.atleast_2d(X) - self.mean) / self.scale
        return Z @ self.weights + self.bias

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"kind {self.kind}\nn_train {self.n_train}\nloss {float(self.loss)!r}\n"
                     f"bias {float(self.bias)!r}\n")
            for n, w, m, s in zip(self.names, self.weights, self.mean, self.scale):
                fh.write(f"feature {n} {float(w)!r} {float(m)!r} {float(s)!r}\n")

    @classmethod
    def load(cls, path) -> "SpModel":
        meta, names, rows = {}, [], []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "feature":
                    names.append(parts[1])
                    rows.append([float(v) for v in parts[2:5]])
                else:
                    meta[parts[0]] = parts[1]
        rows = np.array(rows)
        return cls(rows[:, 0], float(meta["bias"]), rows[:, 1], rows[:, 2], tuple(names), meta.get("kind", "grasp"),
                   int(meta.get("n_train", 0)), float(meta.get("loss", "nan")))


def _sigmoid(z):
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def sp_loss_grad(params, Z, y, l2=0.0):
    """Mean binary cross-entropy and its gradient; params = (weights..., bias)."""
    w, b = params[:-1], params[-1]
    z = Z @ w + b
    # log(1 + e^z) - y z, written stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * w @ w
    r = (_sigmoid(z) - y) / len(y)
    grad = np.concatenate([Z.T @ r + l2 * w, [r.sum()]])
    return float(loss), grad


def sp_fit(X, y, epochs=2000, seed=0, lr=0.5, l2=1e-3, kind="grasp") -> SpModel:
    """Full-batch gradient descent on the cross-entropy of a logistic model."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(np.unique(y)) < 2:
        raise CostError("training set has a single class")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    rng = np.random.default_rng(seed)
    params = rng.normal(scale=0.01, size=X.shape[1] + 1)
    loss = np.inf
    for _ in range(epochs):
        loss, g = sp_loss_grad(params, Z, y, l2)
        params -= lr * g
    loss, _ = sp_loss_grad(params, Z, y, l2)
    return SpModel(params[:-1].copy(), float(params[-1]), mean, scale, SP_FEATURES[: X.shape[1]]
                   if X.shape[1] <= len(SP_FEATURES) else tuple(f"f{i}" for i in range(X.shape[1])),
                   kind, len(y), loss)


def sp_predict(model: SpModel, features) -> np.ndarray | float:
    p = _sigmoid(model.logit(features))
    return float(p[0]) if np.ndim(features) == 1 else p


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    from scipy.stats import rankdata
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    n1, n0 = labels.sum(), (~labels).sum()
    if n1 == 0 or n0 == 0:
        raise CostError("AUC needs both classes")
    r = rankdata(scores)
    return float((r[labels].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


# ---------------------------------------------------------------------------
# bundle

@dataclass
class Estimators:
    """Estimator settings shared by a planning run."""

    theta_max: float = THETA_MAX
    sigma_gq: float = SIGMA_GQ
    M: int = MC_SAMPLES
    beta: float = 0.005
    delta: float = DELTA
    eps_hull: float = EPS_HULL
    gripper: GripperModel = field(default_factory=GripperModel)
    sp_grasp: Optional[SpModel] = None
    sp_place: Optional[SpModel] = None

    def grasp_prob(self, name, obj, grasp, seed=0) -> float:
        if name == "gq":
            return gq_grasp_prob(obj.completed, grasp, self.theta_max, self.sigma_gq, self.gripper)
        if name == "mc":
            return mc_prob(obj, grasp, self.M, seed, self.beta, self.theta_max, self.gripper)
        if name == "cu":
            return cu_prob(obj, grasp, self.gripper)
        if name == "sp":
            if self.sp_grasp is None:
                raise CostError("sp preset needs a grasp model")
            return clamp_prob(sp_predict(self.sp_grasp, candidate_features(obj, grasp, self.gripper)))
        raise CostError(f"unknown estimator {name!r}")

    def place_prob(self, name, obj, place, seed=0) -> float:
        if name == "mc":
            return mc_prob(obj, place, self.M, seed, self.beta, delta=self.delta, eps_hull=self.eps_hull)
        if name == "cu":
            return cu_prob(obj, place, self.gripper, self.delta)
        if name == "sp":
            if self.sp_place is None:
                raise CostError("sp preset needs a place model")
            return clamp_prob(sp_predict(self.sp_place, candidate_features(obj, place)))
        raise CostError(f"unknown estimator {name!r}")

    def grasp_cost(self, weights: CostWeights, obj, grasp, seed=0):
        """(cost, probability estimate); estimate is nan when no estimator is active."""
        names = weights.grasp_estimators
        if not names:
            return 0.0, float("nan")
        probs = [self.grasp_prob(n, obj, grasp, seed) for n in names]
        return weights.w2 * sum(neg_log(p) for p in probs), float(np.prod(probs))

    def place_cost(self, weights: CostWeights, obj, place, seed=0):
        names = weights.place_estimators
        if not names:
            return 0.0, float("nan")
        probs = [self.place_prob(n, obj, place, seed) for n in names]
        return weights.w3 * sum(neg_log(p) for p in probs), float(np.prod(probs))
