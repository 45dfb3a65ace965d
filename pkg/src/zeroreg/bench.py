"""Synthetic scene pairs with planted ground truth, and the benchmark harness
that registers them and aggregates success rate / RTE / RRE / timings."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bootstrap import estimate_voxel_size
from .errors import InvalidArgumentError, ZeroRegError
from .geometry import RigidTransform, axis_angle_matrix, random_rotation
from .io import PipelineConfig
from .pipeline import SUCCESS_THRESHOLDS, MetricReport, register, register_lite

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ["pair_id", "mode", "success", "rte_m", "rre_deg", "inliers", "early_exited", "wall_ms"]
PRESETS = ("object", "indoor", "outdoor", "mixed")


class GenerationError(ZeroRegError):
    pass


@dataclass(frozen=True)
class Primitive:
    kind: str  # plane | box | sphere | cylinder
    center: tuple
    size: tuple = (1.0, 1.0, 1.0)  # plane: (a, b, -); box: edge lengths; sphere: (r,); cylinder: (r, h)
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    def area(self):
        s = self.size
        if self.kind == "plane":
            return s[0] * s[1]
        if self.kind == "box":
            return 2 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2])
        if self.kind == "sphere":
            return 4 * math.pi * s[0] ** 2
        if self.kind == "cylinder":
            return 2 * math.pi * s[0] * s[1]
        raise InvalidArgumentError(f"unknown primitive {self.kind!r}")

    def sample(self, n, rng):
        R = np.asarray(self.rotation, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64)
        s = self.size
        if self.kind == "plane":
            local = np.column_stack([rng.uniform(-0.5, 0.5, n) * s[0], rng.uniform(-0.5, 0.5, n) * s[1],
                                     np.zeros(n)])
        elif self.kind == "box":
            a, b, h = s
            faces = np.array([b * h, b * h, a * h, a * h, a * b, a * b])
            face = rng.choice(6, size=n, p=faces / faces.sum())
            u = rng.uniform(-0.5, 0.5, (n, 3)) * np.array([a, b, h])
            axis = face // 2
            sign = np.where(face % 2 == 0, -0.5, 0.5)
            u[np.arange(n), axis] = sign * np.array([a, b, h])[axis]
            local = u
        elif self.kind == "sphere":
            v = rng.normal(size=(n, 3))
            local = s[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
        elif self.kind == "cylinder":
            ang = rng.uniform(0, 2 * np.pi, n)
            local = np.column_stack([s[0] * np.cos(ang), s[0] * np.sin(ang), rng.uniform(-0.5, 0.5, n) * s[1]])
        else:
            raise InvalidArgumentError(f"unknown primitive {self.kind!r}")
        return local @ R.T + c


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    density: float = 100.0  # surface points per m^2
    sensor: str = "uniform"  # uniform | disc-lidar
    max_range: float = math.inf
    elevation_fov: tuple = (-25.0, 15.0)  # degrees, disc-lidar only
    falloff_range: float = 10.0  # disc-lidar: keep prob (falloff_range / range)^2 beyond it
    keep: float = 0.7  # per-cloud resampling fraction
    noise: float = 0.0  # meters
    noise_voxels: float | None = None  # overrides ``noise`` with a multiple of the resolved voxel size
    overlap: float = 1.0
    max_rotation_deg: float = 180.0
    max_translation: float = 0.0
    scale: str = "indoor"  # success-threshold class
    negative: bool = False  # Q from an unrelated scene
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not 0 < self.overlap <= 1:
            raise InvalidArgumentError("overlap must be in (0, 1]")
        if self.noise < 0:
            raise InvalidArgumentError("noise must be >= 0")
        if self.sensor not in ("uniform", "disc-lidar"):
            raise InvalidArgumentError(f"unknown sensor model {self.sensor!r}")
        if not 0 < self.keep <= 1:
            raise InvalidArgumentError("keep must be in (0, 1]")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["primitives"] = tuple(Primitive(p["kind"], tuple(p["center"]), tuple(p.get("size", (1.0, 1.0, 1.0))),
                                          tuple(map(tuple, p.get("rotation", np.eye(3).tolist()))))
                                for p in d.get("primitives", ()))
        for key in ("elevation_fov",):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["primitives"] = [asdict(p) for p in self.primitives]
        return d


@dataclass
class ScenePair:
    P: np.ndarray
    Q: np.ndarray
    T_gt: RigidTransform
    # generator indices shared by both clouds: P[src_shared[k]] <-> Q[dst_shared[k]]
    src_shared: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    dst_shared: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    noise: float = 0.0
    P_clean: np.ndarray | None = None
    Q_clean: np.ndarray | None = None

    def __iter__(self):
        return iter((self.P, self.Q, self.T_gt))


def sample_scene(primitives, density, rng):
    chunks = []
    for prim in primitives:
        n = max(1, int(round(prim.area() * density)))
        chunks.append(prim.sample(n, rng))
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def _sensor_mask(points, origin, spec, rng):
    if spec.sensor == "uniform" and not math.isfinite(spec.max_range):
        return np.ones(len(points), dtype=bool)
    rel = points - origin
    rng_m = np.linalg.norm(rel, axis=1)
    keep = rng_m <= spec.max_range
    if spec.sensor == "disc-lidar":
        elev = np.degrees(np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1])))
        keep &= (elev >= spec.elevation_fov[0]) & (elev <= spec.elevation_fov[1])
        prob = np.minimum(1.0, (spec.falloff_range / np.maximum(rng_m, 1e-9)) ** 2)
        keep &= rng.uniform(size=len(points)) < prob
    return keep


def _overlap_crop(points, mask_p, mask_q, target, rng):
    """Half-space crop along a random horizontal direction; the slab half-width
    is bisected so that shared / |P| hits ``target``."""
    if target >= 1.0:
        return mask_p, mask_q
    ang = rng.uniform(0, 2 * np.pi)
    u = np.array([np.cos(ang), np.sin(ang), 0.0])
    proj = points @ u
    both = mask_p & mask_q
    if not both.any():
        raise GenerationError("sensor footprints do not intersect")
    center = float(np.median(proj[both]))
    span = float(proj.max() - proj.min()) + 1e-9

    def split(h):
        in_p = mask_p & (proj <= center + h)
        in_q = mask_q & (proj >= center - h)
        shared = (in_p & in_q).sum()
        return in_p, in_q, shared / max(in_p.sum(), 1)

    lo, hi = 0.0, span
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        _, _, frac = split(mid)
        if frac < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-6 * span:
            break
    in_p, in_q, frac = split(hi)
    if abs(frac - target) > 0.02:
        log.debug("overlap %.3f missed target %.3f", frac, target)
    return in_p, in_q


def generate_pair(spec: SceneSpec) -> ScenePair:
    """Scene pair with planted transform ``T_gt`` mapping P's frame onto Q's.

    P is observed from a sensor at the origin, Q from a sensor displaced by up
    to ``max_translation``; each cloud is expressed in its own sensor frame.
    """
    rng = np.random.default_rng(spec.seed)
    scene = sample_scene(spec.primitives, spec.density, rng)
    if len(scene) == 0:
        raise GenerationError("scene has no primitives")
    R_gt = random_rotation(rng, math.radians(spec.max_rotation_deg))
    offset = rng.normal(size=3)
    offset *= spec.max_translation * rng.uniform() ** (1 / 3) / max(np.linalg.norm(offset), 1e-12)
    sensor_q = offset  # world position of Q's sensor
    T_gt = RigidTransform(R_gt, -R_gt @ sensor_q)

    if spec.negative:
        other = _negative_scene(spec, rng)
        mask_p = _sensor_mask(scene, np.zeros(3), spec, rng) & (rng.uniform(size=len(scene)) < spec.keep)
        mask_q = _sensor_mask(other, sensor_q, spec, rng) & (rng.uniform(size=len(other)) < spec.keep)
        P_clean, Q_world = scene[mask_p], other[mask_q]
        src_shared = dst_shared = np.zeros(0, dtype=np.intp)
    else:
        vis_p = _sensor_mask(scene, np.zeros(3), spec, rng)
        vis_q = _sensor_mask(scene, sensor_q, spec, rng)
        in_p, in_q = _overlap_crop(scene, vis_p, vis_q, spec.overlap, rng)
        in_p &= rng.uniform(size=len(scene)) < spec.keep
        in_q &= rng.uniform(size=len(scene)) < spec.keep
        idx_p, idx_q = np.flatnonzero(in_p), np.flatnonzero(in_q)
        shared = np.intersect1d(idx_p, idx_q)
        src_shared = np.searchsorted(idx_p, shared)
        dst_shared = np.searchsorted(idx_q, shared)
        P_clean, Q_world = scene[idx_p], scene[idx_q]
    if len(P_clean) < 3 or len(Q_world) < 3:
        raise GenerationError(f"crop left too few points ({len(P_clean)}, {len(Q_world)}); re-seed")
    Q_clean = T_gt.apply(Q_world)

    sigma = spec.noise
    if spec.noise_voxels is not None:
        sigma = spec.noise_voxels * estimate_voxel_size(P_clean, Q_clean, PipelineConfig())
    P = P_clean + rng.normal(scale=sigma, size=P_clean.shape) if sigma > 0 else P_clean.copy()
    Q = Q_clean + rng.normal(scale=sigma, size=Q_clean.shape) if sigma > 0 else Q_clean.copy()
    return ScenePair(P, Q, T_gt, src_shared, dst_shared, sigma, P_clean, Q_clean)


def _negative_scene(spec, rng):
    """An unrelated scene of the same preset family."""
    family = spec.name.split("-")[0] if spec.name else spec.scale
    builder = SCENE_BUILDERS.get(family, SCENE_BUILDERS[spec.scale])
    other = builder(np.random.default_rng(int(rng.integers(2**31))))
    return sample_scene(other.primitives, other.density, rng)


# ---------------------------------------------------------------------------
# scene presets
# ---------------------------------------------------------------------------

def _rot(rng, max_deg=180.0):
    return tuple(map(tuple, random_rotation(rng, math.radians(max_deg))))


def _yaw(angle):
    return tuple(map(tuple, axis_angle_matrix(np.array([0.0, 0.0, 1.0]), angle)))


def object_scene(rng, **overrides) -> SceneSpec:
    """An ~0.5 m assembly of boxes, spheres and cylinders, 0.8 m from the sensor."""
    base = np.array([0.0, 0.8, 0.0])
    prims = []
    for _ in range(rng.integers(4, 7)):
        size = tuple(rng.uniform(0.05, 0.25, 3))
        prims.append(Primitive("box", tuple(base + rng.uniform(-0.15, 0.15, 3)), size, _rot(rng)))
    for _ in range(rng.integers(1, 3)):
        prims.append(Primitive("sphere", tuple(base + rng.uniform(-0.15, 0.15, 3)), (rng.uniform(0.03, 0.08),)))
    for _ in range(rng.integers(0, 2)):
        prims.append(Primitive("cylinder", tuple(base + rng.uniform(-0.15, 0.15, 3)),
                               (rng.uniform(0.02, 0.05), rng.uniform(0.1, 0.3)), _rot(rng)))
    kw = dict(primitives=tuple(prims), density=40000.0, scale="object", max_translation=0.05, name="object")
    kw.update(overrides)
    return SceneSpec(**kw)


def indoor_scene(rng, **overrides) -> SceneSpec:
    """A furnished room around a sensor at 1.5 m height."""
    W, L, H = rng.uniform(6, 10), rng.uniform(5, 8), rng.uniform(2.7, 3.2)
    cx, cy = rng.uniform(-0.5, 0.5, 2)
    z0 = -1.5
    ident = _yaw(0.0)
    prims = [
        Primitive("plane", (cx, cy, z0), (W, L, 0.0), ident),
        Primitive("plane", (cx, cy, z0 + H), (W, L, 0.0), ident),
    ]
    wall_x = tuple(map(tuple, axis_angle_matrix(np.array([0.0, 1.0, 0.0]), np.pi / 2)))
    wall_y = tuple(map(tuple, axis_angle_matrix(np.array([1.0, 0.0, 0.0]), np.pi / 2)))
    prims += [Primitive("plane", (cx - W / 2, cy, z0 + H / 2), (H, L, 0.0), wall_x),
              Primitive("plane", (cx + W / 2, cy, z0 + H / 2), (H, L, 0.0), wall_x),
              Primitive("plane", (cx, cy - L / 2, z0 + H / 2), (W, H, 0.0), wall_y),
              Primitive("plane", (cx, cy + L / 2, z0 + H / 2), (W, H, 0.0), wall_y)]
    for _ in range(rng.integers(6, 11)):
        a, b, h = rng.uniform(0.4, 2.0), rng.uniform(0.4, 1.2), rng.uniform(0.4, 2.0)
        x = cx + rng.uniform(-W / 2 + 0.7, W / 2 - 0.7)
        y = cy + rng.uniform(-L / 2 + 0.7, L / 2 - 0.7)
        prims.append(Primitive("box", (x, y, z0 + h / 2), (a, b, h), _yaw(rng.uniform(0, np.pi))))
    for _ in range(rng.integers(2, 5)):
        r = rng.uniform(0.15, 0.4)
        prims.append(Primitive("sphere", (cx + rng.uniform(-W / 2 + 1, W / 2 - 1),
                                          cy + rng.uniform(-L / 2 + 1, L / 2 - 1), z0 + rng.uniform(r, 2.0)), (r,)))
    for _ in range(rng.integers(1, 3)):
        r, h = rng.uniform(0.05, 0.2), H
        prims.append(Primitive("cylinder", (cx + rng.uniform(-W / 2 + 1, W / 2 - 1),
                                            cy + rng.uniform(-L / 2 + 1, L / 2 - 1), z0 + h / 2), (r, h), ident))
    kw = dict(primitives=tuple(prims), density=120.0, scale="indoor", max_translation=0.5, name="indoor")
    kw.update(overrides)
    return SceneSpec(**kw)


def outdoor_scene(rng, **overrides) -> SceneSpec:
    """Street-like scene (ground, buildings, poles, trees) seen by a spinning
    LiDAR at 1.7 m height."""
    z0 = -1.7
    ident = _yaw(0.0)
    prims = [Primitive("plane", (0.0, 0.0, z0), (120.0, 120.0, 0.0), ident)]
    for _ in range(rng.integers(8, 14)):
        dist, ang = rng.uniform(12, 50), rng.uniform(0, 2 * np.pi)
        a, b, h = rng.uniform(6, 20), rng.uniform(6, 15), rng.uniform(5, 18)
        prims.append(Primitive("box", (dist * np.cos(ang), dist * np.sin(ang), z0 + h / 2), (a, b, h),
                               _yaw(rng.uniform(0, np.pi))))
    for _ in range(rng.integers(8, 16)):
        dist, ang = rng.uniform(4, 40), rng.uniform(0, 2 * np.pi)
        x, y = dist * np.cos(ang), dist * np.sin(ang)
        if rng.uniform() < 0.5:
            prims.append(Primitive("cylinder", (x, y, z0 + 3.0), (0.15, 6.0), ident))
        else:
            prims.append(Primitive("cylinder", (x, y, z0 + 1.5), (0.25, 3.0), ident))
            prims.append(Primitive("sphere", (x, y, z0 + 3.0 + 1.5), (rng.uniform(1.2, 2.5),)))
    for _ in range(rng.integers(3, 7)):  # parked cars
        dist, ang = rng.uniform(5, 25), rng.uniform(0, 2 * np.pi)
        prims.append(Primitive("box", (dist * np.cos(ang), dist * np.sin(ang), z0 + 0.75), (4.5, 1.8, 1.5),
                               _yaw(rng.uniform(0, np.pi))))
    kw = dict(primitives=tuple(prims), density=60.0, sensor="disc-lidar", max_range=60.0, scale="outdoor",
              max_translation=3.0, name="outdoor")
    kw.update(overrides)
    return SceneSpec(**kw)


SCENE_BUILDERS = {"object": object_scene, "indoor": indoor_scene, "outdoor": outdoor_scene}


def pair_seed(run_seed, index):
    return int(np.random.SeedSequence([run_seed, index]).generate_state(1)[0])


def preset_specs(preset, pairs, seed=0, overlap=0.7, noise_voxels=0.5, max_rotation_deg=180.0,
                 negative=False):
    """``pairs`` specs of the named preset; ``mixed`` cycles through object,
    indoor and outdoor scenes."""
    if preset not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    families = ("object", "indoor", "outdoor") if preset == "mixed" else (preset,)
    specs = []
    for i in range(pairs):
        s = pair_seed(seed, i)
        family = families[i % len(families)]
        specs.append(SCENE_BUILDERS[family](np.random.default_rng(s), seed=s, overlap=overlap,
                                            noise_voxels=noise_voxels, max_rotation_deg=max_rotation_deg,
                                            negative=negative, name=f"{family}-{i}"))
    return specs


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    rows: list
    mode: str
    config: dict = field(default_factory=dict)

    @property
    def success_rate(self):
        return float(np.mean([r["success"] for r in self.rows])) if self.rows else 0.0

    def _mean_success(self, key):
        vals = [r[key] for r in self.rows if r["success"]]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_rte(self):
        return self._mean_success("rte_m")

    @property
    def mean_rre(self):
        return self._mean_success("rre_deg")

    @property
    def total_wall_ms(self):
        return float(sum(r["wall_ms"] for r in self.rows))

    @property
    def early_exit_fraction(self):
        return float(np.mean([bool(r["early_exited"]) for r in self.rows])) if self.rows else 0.0

    def stage_means_ms(self):
        keys = sorted({k for r in self.rows for k in r.get("timings_ms", {})})
        return {k: float(np.mean([r.get("timings_ms", {}).get(k, 0.0) for r in self.rows])) for k in keys}

    def aggregate(self):
        return {
            "pairs": len(self.rows),
            "success_rate": self.success_rate,
            "mean_rte_m": self.mean_rte,
            "mean_rre_deg": self.mean_rre,
            "mean_wall_ms": self.total_wall_ms / max(len(self.rows), 1),
            "total_wall_ms": self.total_wall_ms,
            "early_exit_fraction": self.early_exit_fraction,
            "stage_mean_ms": self.stage_means_ms(),
        }

    def to_dict(self):
        return {"schema": SCHEMA_VERSION, "mode": self.mode, "config": self.config,
                "aggregate": self.aggregate(), "rows": self.rows}

    def write(self, json_path, csv_path=None):
        json_path = Path(json_path)
        json_path.write_text(json.dumps(_jsonable(self.to_dict()), indent=2))
        csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
        with csv_path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore")
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
        return json_path, csv_path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def run_pair(spec: SceneSpec, cfg: PipelineConfig, mode="full", pair_id=0, pair: ScenePair | None = None):
    """Register one generated pair and score it; failures become unsuccessful rows."""
    pair = pair or generate_pair(spec)
    tau_trans, tau_rot = SUCCESS_THRESHOLDS[spec.scale]
    t0 = time.perf_counter()
    row = {"pair_id": pair_id, "mode": mode, "scene": spec.name, "scale": spec.scale}
    metrics = MetricReport()
    try:
        result = (register_lite if mode == "lite" else register)(pair.P, pair.Q, cfg)
    except ZeroRegError as exc:
        wall = time.perf_counter() - t0
        metrics.add(pair.T_gt, None, tau_rot, tau_trans)
        row.update(success=False, rte_m=math.inf, rre_deg=math.inf, inliers=0, early_exited=False,
                   wall_ms=1e3 * wall, error=str(exc), timings_ms={})
        return row, None
    wall = time.perf_counter() - t0
    ok = metrics.add(pair.T_gt, result.transform, tau_rot, tau_trans)
    row.update(success=ok, rte_m=metrics.rte[0], rre_deg=metrics.rre[0], inliers=result.inlier_count,
               early_exited=result.early_exited, wall_ms=1e3 * wall, voxel_size=result.voxel_size,
               timings_ms={k: 1e3 * v for k, v in result.timings.items()})
    return row, result


def _run_indexed(args):
    i, spec, cfg, mode = args
    try:
        pair = generate_pair(spec)
    except GenerationError as exc:
        return {"pair_id": i, "mode": mode, "scene": spec.name, "scale": spec.scale, "success": False,
                "rte_m": math.inf, "rre_deg": math.inf, "inliers": 0, "early_exited": False,
                "wall_ms": 0.0, "error": f"generation: {exc}"}
    row, _ = run_pair(spec, cfg, mode, i, pair)
    log.info("pair %d %s: success=%s rte=%.3g rre=%.3g wall=%.0fms", i, spec.name, row["success"],
             row["rte_m"], row["rre_deg"], row["wall_ms"])
    return row


def run_benchmark(specs, cfg: PipelineConfig | None = None, mode="full", workers=1) -> BenchmarkReport:
    """Register every spec's pair and score it against the planted transform.

    With ``workers > 1`` pairs run in separate processes; every pair's
    randomness comes from its own spec, so results do not depend on
    ``workers``.
    """
    specs = list(specs)
    if not specs:
        raise InvalidArgumentError("run_benchmark needs at least one scene spec")
    if mode not in ("full", "lite"):
        raise InvalidArgumentError(f"mode must be 'full' or 'lite', got {mode!r}")
    cfg = cfg or PipelineConfig()
    jobs = [(i, spec, cfg, mode) for i, spec in enumerate(specs)]
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_indexed, jobs))
    else:
        rows = [_run_indexed(job) for job in jobs]
    return BenchmarkReport(rows, mode, cfg.to_dict())


def load_specs(path):
    """Scene specs from a JSON file: a list of spec objects or ``{"specs": [...]}``."""
    from .errors import ParseError

    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}",
                         path=path, offset=exc.pos) from exc
    if isinstance(data, dict):
        data = data.get("specs")
    if not isinstance(data, list):
        raise ParseError("expected a list of scene specs or an object with a 'specs' list", path=path, offset=0)
    specs = []
    for k, item in enumerate(data):
        if not isinstance(item, dict):
            raise ParseError(f"spec #{k} is not an object", path=path, offset=0)
        try:
            specs.append(SceneSpec.from_dict(item))
        except (TypeError, KeyError, ValueError) as exc:
            raise ParseError(f"spec #{k}: {exc}", path=path, offset=0) from exc
    return specs
