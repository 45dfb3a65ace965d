"""End-to-end registration: bootstrapping, multi-scale description and
matching, cross-scale consensus and a final robust solve. Also the Lite
variant (middle scale first, early exit) and the evaluation metrics."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .bootstrap import SCALES, SpatialIndex, estimate_radii, estimate_voxel_size, voxel_downsample
from .descriptor import describe_set
from .errors import DegenerateError, InsufficientDataError, RegistrationFailure
from .geometry import RigidTransform, as_points
from .io import PipelineConfig, resolve_threads
from .matching import CorrespondenceSet, match_scale
from .sampling import farthest_point_sampling
from .solver import SolverReport, consensus_maximize, count_inliers, kabsch_weighted, kiss_solver, ransac

log = logging.getLogger(__name__)

# (translation m, rotation deg)
SUCCESS_THRESHOLDS = {"outdoor": (2.0, 5.0), "indoor": (0.3, 15.0), "object": (0.3, 15.0)}


@dataclass
class ScaleDiagnostics:
    scale: str
    radius: float
    keypoints: tuple = (0, 0)
    described: tuple = (0, 0)
    matches: int = 0
    hypotheses: int = 0
    error: str | None = None


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_count: int
    inliers: np.ndarray
    correspondences: CorrespondenceSet
    voxel_size: float
    radii: tuple
    scales: list = field(default_factory=list)
    early_exited: bool = False
    timings: dict = field(default_factory=dict)
    consensus_inliers: int = 0
    solver: SolverReport | None = None

    @property
    def processed_scales(self):
        return [d.scale for d in self.scales]

    def to_dict(self):
        return {
            "transform": self.transform.as_matrix().tolist(),
            "inliers": int(self.inlier_count),
            "consensus_inliers": int(self.consensus_inliers),
            "correspondences": len(self.correspondences),
            "voxel_size": self.voxel_size,
            "radii": {"r_l": self.radii[0], "r_m": self.radii[1], "r_g": self.radii[2]},
            "early_exited": self.early_exited,
            "scales": [vars(d) for d in self.scales],
            "timings_ms": {k: 1e3 * v for k, v in self.timings.items()},
        }


class _Timer:
    def __init__(self):
        self.times = {}

    def stage(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = timer.times.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


class _Prepared:
    """Bootstrapped, downsampled pair with cached indices and keypoints."""

    def __init__(self, P, Q, cfg, timer):
        self.cfg = cfg
        workers = resolve_threads(cfg.threads)
        P, Q = as_points(P), as_points(Q)
        if len(P) < 3 or len(Q) < 3:
            raise RegistrationFailure("input", f"need >= 3 points per cloud, got {len(P)} and {len(Q)}")
        with timer.stage("bootstrap"):
            try:
                self.voxel = estimate_voxel_size(P, Q, cfg)
            except InsufficientDataError as exc:
                raise RegistrationFailure("voxel-size", str(exc)) from exc
            self.P = voxel_downsample(P, self.voxel)
            self.Q = voxel_downsample(Q, self.voxel)
            if len(self.P) < 3 or len(self.Q) < 3:
                raise RegistrationFailure("downsample", f"fewer than 3 voxels survive ({len(self.P)}, {len(self.Q)})")
            larger = self.P if len(self.P) >= len(self.Q) else self.Q
            try:
                self.radii = estimate_radii(larger, cfg)
            except InsufficientDataError as exc:
                raise RegistrationFailure("radius-estimation", str(exc)) from exc
        with timer.stage("keypoints"):
            self.index_P = SpatialIndex(self.P, workers)
            self.index_Q = SpatialIndex(self.Q, workers)
            # FPS is deterministic, so every scale would draw the same keypoints
            self.kp_P = self.P[farthest_point_sampling(self.P, cfg.n_fps)]
            self.kp_Q = self.Q[farthest_point_sampling(self.Q, cfg.n_fps)]
        self.eps = cfg.inlier_threshold or 2.0 * self.voxel

    def scale(self, scale, timer):
        r = self.radii[scale]
        diag = ScaleDiagnostics(scale, r, (len(self.kp_P), len(self.kp_Q)))
        try:
            with timer.stage(f"describe_{scale}"):
                S_P = describe_set(self.P, self.kp_P, r, self.cfg, scale=scale, index=self.index_P)
                S_Q = describe_set(self.Q, self.kp_Q, r, self.cfg, scale=scale, index=self.index_Q)
            diag.described = (len(S_P), len(S_Q))
            with timer.stage(f"match_{scale}"):
                D = match_scale(S_P, S_Q, self.cfg)
        except InsufficientDataError as exc:
            diag.error = str(exc)
            log.info("scale %s skipped: %s", scale, exc)
            return CorrespondenceSet(), diag
        diag.matches = diag.hypotheses = len(D)
        return D, diag


def _robust_solve(D: CorrespondenceSet, voxel, eps, cfg, solver=None) -> SolverReport:
    solver = solver or cfg.solver
    if solver == "ransac":
        return ransac(D, eps, cfg.ransac_max_iter, cfg.seed, cfg.ransac_confidence)
    return kiss_solver(D, voxel, cfg.noise_bound_factor, cfg.gnc_max_iter, cfg.gnc_factor)


def _refine(D: CorrespondenceSet, T, inliers, eps, rounds=10):
    """Alternate least-squares refits with re-counting inliers over all of D
    until the inlier set stops changing. Never returns a smaller set."""
    best_T, best_I = T, inliers
    for _ in range(rounds):
        I = count_inliers(D, best_T, eps)
        if len(I) < 3 or len(I) < len(best_I):
            break
        try:
            T_new = kabsch_weighted((D.src[I], D.dst[I]))
        except DegenerateError:
            break
        changed = not np.array_equal(I, best_I)
        best_T, best_I = T_new, I
        if not changed:
            break
    return best_T, best_I


def solve_pooled(D: CorrespondenceSet, voxel_size, cfg: PipelineConfig | None = None, solver=None, timer=None):
    """Cross-scale consensus, robust re-estimation on its inliers, then
    least-squares refinement against all correspondences.

    ``solver`` overrides ``cfg.solver`` ("kcore-gnc" or "ransac"). Returns
    (transform, inlier indices into D, consensus count, solver report).
    """
    cfg = cfg or PipelineConfig()
    timer = timer or _Timer()
    eps = cfg.inlier_threshold or 2.0 * voxel_size
    if len(D) == 0:
        raise RegistrationFailure("matching", "no correspondences at any scale")
    with timer.stage("consensus"):
        _, T0, cons = consensus_maximize(D, eps=eps)
    if len(cons) < 3:
        raise RegistrationFailure("consensus", f"best hypothesis has only {len(cons)} inliers")
    with timer.stage("solver"):
        try:
            report = _robust_solve(D.subset(cons), voxel_size, eps, cfg, solver)
        except (InsufficientDataError, DegenerateError) as exc:
            raise RegistrationFailure("solver", str(exc)) from exc
        inliers = cons[report.inliers]
        try:
            T = kabsch_weighted((D.src[inliers], D.dst[inliers]))
        except DegenerateError:
            T = report.transform
    with timer.stage("refine"):
        T, inliers = _refine(D, T, inliers, eps)
    return T, inliers, len(cons), report


def _solve_pooled(D, prep: _Prepared, cfg, timer, solver=None):
    return solve_pooled(D, prep.voxel, cfg, solver, timer)


def _result(T, inliers, D, prep, diags, timer, cons, report, early=False):
    return RegistrationResult(T, len(inliers), inliers, D, prep.voxel, prep.radii.as_tuple(),
                              diags, early, dict(timer.times), cons, report)


def register(P, Q, cfg: PipelineConfig | None = None) -> RegistrationResult:
    """Estimate the rigid transform mapping ``P`` onto ``Q`` using all three
    scales."""
    cfg = cfg or PipelineConfig()
    timer = _Timer()
    t0 = time.perf_counter()
    prep = _Prepared(P, Q, cfg, timer)
    sets, diags = [], []
    for scale in SCALES:
        D, diag = prep.scale(scale, timer)
        sets.append(D)
        diags.append(diag)
    D = CorrespondenceSet.concat(sets)
    T, inliers, cons, report = _solve_pooled(D, prep, cfg, timer)
    timer.times["total"] = time.perf_counter() - t0
    return _result(T, inliers, D, prep, diags, timer, cons, report)


def register_lite(P, Q, cfg: PipelineConfig | None = None) -> RegistrationResult:
    """Middle scale first with the k-core + GNC solver; stop there when it
    yields at least ``cfg.tau_n`` inliers, else continue with all scales."""
    cfg = cfg or PipelineConfig()
    timer = _Timer()
    t0 = time.perf_counter()
    prep = _Prepared(P, Q, cfg, timer)
    D_m, diag_m = prep.scale("m", timer)
    if len(D_m):
        try:
            T, inliers, cons, report = _solve_pooled(D_m, prep, cfg, timer, solver="kcore-gnc")
        except RegistrationFailure as exc:
            log.info("middle scale inconclusive: %s", exc)
        else:
            if len(inliers) >= cfg.tau_n:
                timer.times["total"] = time.perf_counter() - t0
                return _result(T, inliers, D_m, prep, [diag_m], timer, cons, report, early=True)
    sets, diags = {}, {}
    sets["m"], diags["m"] = D_m, diag_m
    for scale in ("l", "g"):
        sets[scale], diags[scale] = prep.scale(scale, timer)
    D = CorrespondenceSet.concat([sets[s] for s in SCALES])
    T, inliers, cons, report = _solve_pooled(D, prep, cfg, timer, solver="kcore-gnc")
    timer.times["total"] = time.perf_counter() - t0
    return _result(T, inliers, D, prep, [diags[s] for s in SCALES], timer, cons, report)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def rre(R_gt, R_est) -> float:
    """Rotation error in degrees; the acos argument is clamped to [-1, 1]."""
    c = (np.trace(np.asarray(R_gt).T @ np.asarray(R_est)) - 1.0) / 2.0
    return abs(math.degrees(math.acos(min(1.0, max(-1.0, c)))))


def rte(t_gt, t_est) -> float:
    return float(np.linalg.norm(np.asarray(t_gt, dtype=np.float64) - np.asarray(t_est, dtype=np.float64)))


def success(rre_deg, rte_m, tau_rot, tau_trans) -> bool:
    return bool(rte_m <= tau_trans and rre_deg <= tau_rot)


@dataclass
class MetricReport:
    rte: list = field(default_factory=list)
    rre: list = field(default_factory=list)
    success: list = field(default_factory=list)

    def add(self, T_gt: RigidTransform, T_est: RigidTransform | None, tau_rot, tau_trans):
        if T_est is None:
            self.rte.append(math.inf)
            self.rre.append(math.inf)
            self.success.append(False)
            return False
        r = rre(T_gt.rotation, T_est.rotation)
        t = rte(T_gt.translation, T_est.translation)
        ok = success(r, t, tau_rot, tau_trans)
        self.rre.append(r)
        self.rte.append(t)
        self.success.append(ok)
        return ok

    @property
    def success_rate(self):
        return float(np.mean(self.success)) if self.success else 0.0

    def _mean_over_successes(self, values):
        vals = [v for v, ok in zip(values, self.success) if ok]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_rte(self):
        return self._mean_over_successes(self.rte)

    @property
    def mean_rre(self):
        return self._mean_over_successes(self.rre)


__all__ = ["register", "register_lite", "solve_pooled", "RegistrationResult", "rre", "rte", "success", "MetricReport",
           "SUCCESS_THRESHOLDS"]
