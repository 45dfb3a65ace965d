"""Point cloud readers/writers (PLY, KITTI velodyne .bin) and pipeline config."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor import BACKENDS
from .errors import ConfigError, ParseError
from .geometry import PointCloud, as_points

log = logging.getLogger(__name__)

SOLVERS = ("kcore-gnc", "ransac")
YAW_MODES = ("window", "literal")


@dataclass(frozen=True)
class PipelineConfig:
    # geometric bootstrapping
    kappa_spheric: float = 0.10
    kappa_disc: float = 0.15
    tau_v: float = 0.05
    tau_l: float = 0.005
    tau_m: float = 0.02
    tau_g: float = 0.05
    delta_v: float = 0.10
    n_r: int = 2000
    r_max: float = 5.0
    # patch embedding
    n_fps: int = 1500
    n_patch: int = 512
    n_height: int = 7
    n_sectors: int = 20
    n_channels: int = 32
    descriptor_backend: str = "cylindrical-spectral"
    sensor_origin: tuple = (0.0, 0.0, 0.0)
    yaw_mode: str = "window"
    # pose solving
    solver: str = "kcore-gnc"
    ransac_max_iter: int = 50000
    ransac_confidence: float = 0.999
    inlier_threshold: float | None = None  # None -> 2 * voxel size
    noise_bound_factor: float = 1.5
    gnc_factor: float = 1.4
    gnc_max_iter: int = 100
    tau_n: float = 25
    seed: int = 0
    threads: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sensor_origin", tuple(float(c) for c in self.sensor_origin))
        self.validate()

    def validate(self):
        positive = ["kappa_spheric", "kappa_disc", "tau_v", "tau_l", "tau_m", "tau_g",
                    "delta_v", "r_max", "ransac_confidence", "noise_bound_factor"]
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not np.isfinite(value) or value <= 0:
                raise ConfigError(name, f"must be a positive number, got {value!r}")
        counts = ["n_r", "n_fps", "n_patch", "n_height", "n_sectors", "n_channels",
                  "ransac_max_iter", "gnc_max_iter"]
        for name in counts:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {value!r}")
        if self.n_sectors < 2:
            raise ConfigError("n_sectors", "need at least 2 yaw sectors")
        if not self.kappa_spheric < self.kappa_disc:
            raise ConfigError("kappa_spheric", "kappa_spheric < kappa_disc violated")
        if not self.tau_l <= self.tau_m:
            raise ConfigError("tau_l", "tau_l <= tau_m violated")
        if not self.tau_m <= self.tau_g:
            raise ConfigError("tau_m", "tau_m <= tau_g violated")
        for name in ("tau_l", "tau_m", "tau_g", "delta_v", "ransac_confidence"):
            if getattr(self, name) > 1:
                raise ConfigError(name, "must be a fraction in (0, 1]")
        if self.ransac_confidence >= 1:
            raise ConfigError("ransac_confidence", "must be < 1")
        if self.gnc_factor <= 1:
            raise ConfigError("gnc_factor", "must be > 1")
        if self.inlier_threshold is not None and not self.inlier_threshold > 0:
            raise ConfigError("inlier_threshold", "must be > 0 or null")
        if self.tau_n < 0:
            raise ConfigError("tau_n", "must be >= 0")
        if self.solver not in SOLVERS:
            raise ConfigError("solver", f"expected one of {SOLVERS}, got {self.solver!r}")
        if self.yaw_mode not in YAW_MODES:
            raise ConfigError("yaw_mode", f"expected one of {YAW_MODES}, got {self.yaw_mode!r}")
        if len(self.sensor_origin) != 3:
            raise ConfigError("sensor_origin", "expected 3 coordinates")
        if self.threads < 0:
            raise ConfigError("threads", "must be >= 0")
        if self.descriptor_backend not in BACKENDS:
            raise ConfigError("descriptor_backend",
                              f"expected one of {sorted(BACKENDS)}, got {self.descriptor_backend!r}")

    @property
    def taus(self):
        return {"l": self.tau_l, "m": self.tau_m, "g": self.tau_g}

    def replace(self, **changes) -> PipelineConfig:
        unknown = set(changes) - config_keys()
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sensor_origin"] = list(self.sensor_origin)
        return d


def config_keys():
    return {f.name for f in dataclasses.fields(PipelineConfig)}


def _coerce(name, value):
    ftype = {f.name: f for f in dataclasses.fields(PipelineConfig)}[name]
    default = ftype.default
    if isinstance(default, bool) or value is None:
        return value
    if isinstance(default, int) and not isinstance(default, bool) and name != "tau_n":
        if isinstance(value, float) and value.is_integer():
            return int(value)
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def config_from_dict(data: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Overlay ``data`` on ``base`` (Table-I defaults when omitted)."""
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    base = base or PipelineConfig()
    unknown = set(data) - config_keys()
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    try:
        return base.replace(**{k: _coerce(k, v) for k, v in data.items()})
    except TypeError as exc:
        raise ConfigError("<root>", str(exc)) from exc


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}",
                         path=path, offset=exc.pos) from exc
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _detect_format(path, head: bytes):
    if head.startswith(b"ply"):
        return "ply"
    if str(path).lower().endswith(".bin"):
        return "kitti-bin"
    raise ParseError("unrecognized file format (no 'ply' magic, not a .bin file)", path=path, offset=0)


def load_cloud(path, format="auto") -> PointCloud:
    """Read a cloud from PLY (ascii / binary_little_endian) or KITTI ``.bin``.

    Points with non-finite coordinates are dropped and the count is logged.
    """
    path = Path(path)
    data = path.read_bytes()
    if not data:
        raise ParseError("empty file", path=path, offset=0)
    if format == "auto":
        format = _detect_format(path, data[:3])
    if format == "ply":
        pts = _parse_ply(data, path)
    elif format == "kitti-bin":
        pts = _parse_kitti(data, path)
    else:
        raise ValueError(f"unknown cloud format {format!r}")
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    finite = np.all(np.isfinite(pts), axis=1)
    dropped = int((~finite).sum())
    if dropped:
        log.warning("%s: dropped %d non-finite points", path, dropped)
    return PointCloud(pts[finite], source=str(path))


def _parse_kitti(data: bytes, path):
    if len(data) % 16:
        raise ParseError(f"size {len(data)} is not a multiple of 16 bytes (x,y,z,intensity float32)",
                         path=path, offset=len(data) - len(data) % 16)
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return rec[:, :3].astype(np.float64)


def _parse_ply(data: bytes, path):
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError("missing end_header", path=path, offset=0)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError("truncated header", path=path, offset=end)
    body_start = nl + 1
    try:
        header_lines = data[:end].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise ParseError("non-ascii header", path=path, offset=exc.start) from exc

    fmt = None
    elements = []  # [name, count, [(prop, dtype) | ("list", ...)]]
    offset = 0
    for line in header_lines:
        tok = line.split()
        pos = offset
        offset += len(line) + 1
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {' '.join(tok[1:])!r}", path=path, offset=pos)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise ParseError(f"malformed element line {line!r}", path=path, offset=pos)
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", path=path, offset=pos)
            if len(tok) >= 2 and tok[1] == "list":
                if len(tok) != 5 or tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise ParseError(f"malformed list property {line!r}", path=path, offset=pos)
                elements[-1][2].append(("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]], tok[4]))
            else:
                if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                    raise ParseError(f"malformed property {line!r}", path=path, offset=pos)
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", path=path, offset=pos)
    if fmt is None:
        raise ParseError("missing format line", path=path, offset=0)

    if fmt == "ascii":
        return _read_ply_ascii(data, body_start, elements, path)
    return _read_ply_binary(data, body_start, elements, path)


def _vertex_xyz(props, path):
    names = [p[0] for p in props if p[0] != "list"]
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element lacks property {axis!r}", path=path)


def _read_ply_ascii(data, start, elements, path):
    text = data[start:].decode("ascii", errors="replace").split("\n")
    line_idx = 0
    offset = start
    verts = np.zeros((0, 3))
    for name, count, props in elements:
        if name == "vertex":
            _vertex_xyz(props, path)
        rows = []
        for _ in range(count):
            while line_idx < len(text) and not text[line_idx].strip():
                offset += len(text[line_idx]) + 1
                line_idx += 1
            if line_idx >= len(text):
                raise ParseError(f"unexpected end of data in element {name!r}", path=path, offset=offset)
            line = text[line_idx]
            if name == "vertex":
                vals = line.split()
                if len(vals) < len(props):
                    raise ParseError(f"vertex row has {len(vals)} values, expected {len(props)}",
                                     path=path, offset=offset)
                try:
                    row = {p[0]: float(v) for p, v in zip(props, vals)}
                except ValueError as exc:
                    raise ParseError(f"bad number in vertex row: {exc}", path=path, offset=offset) from exc
                rows.append((row["x"], row["y"], row["z"]))
            offset += len(line) + 1
            line_idx += 1
        if name == "vertex":
            verts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return verts


def _read_ply_binary(data, start, elements, path):
    pos = start
    verts = np.zeros((0, 3))
    for name, count, props in elements:
        if any(p[0] == "list" for p in props):
            if name == "vertex":
                raise ParseError("list properties in vertex element are not supported", path=path, offset=pos)
            # variable-length rows: walk them
            for _ in range(count):
                for p in props:
                    if p[0] == "list":
                        cdt = np.dtype("<" + p[1])
                        if pos + cdt.itemsize > len(data):
                            raise ParseError(f"truncated element {name!r}", path=path, offset=pos)
                        n = int(np.frombuffer(data, cdt, 1, pos)[0])
                        pos += cdt.itemsize + n * np.dtype(p[2]).itemsize
                    else:
                        pos += np.dtype(p[1]).itemsize
            continue
        dt = np.dtype([(p[0], "<" + p[1]) for p in props])
        nbytes = dt.itemsize * count
        if pos + nbytes > len(data):
            raise ParseError(f"truncated element {name!r}: need {nbytes} bytes, have {len(data) - pos}",
                             path=path, offset=pos)
        if name == "vertex":
            _vertex_xyz(props, path)
            rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
            verts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        pos += nbytes
    return verts


def save_cloud(cloud, path, format="auto"):
    """Write a cloud. ``format`` is one of auto, ply (binary), ply-ascii, kitti-bin."""
    pts = as_points(cloud)
    path = Path(path)
    if format == "auto":
        format = "kitti-bin" if path.suffix.lower() == ".bin" else "ply"
    try:
        if format == "kitti-bin":
            rec = np.zeros((len(pts), 4), dtype="<f4")
            rec[:, :3] = pts
            path.write_bytes(rec.tobytes())
        elif format in ("ply", "ply-binary"):
            header = (f"ply\nformat binary_little_endian 1.0\nelement vertex {len(pts)}\n"
                      "property double x\nproperty double y\nproperty double z\nend_header\n")
            path.write_bytes(header.encode("ascii") + pts.astype("<f8").tobytes())
        elif format == "ply-ascii":
            lines = [f"ply\nformat ascii 1.0\nelement vertex {len(pts)}\n"
                     "property double x\nproperty double y\nproperty double z\nend_header"]
            lines += [f"{x!r} {y!r} {z!r}" for x, y, z in pts.tolist()]
            path.write_text("\n".join(lines) + "\n")
        else:
            raise ValueError(f"unknown cloud format {format!r}")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write point cloud to {path}: {exc.strerror}") from exc


def resolve_threads(threads: int = 0) -> int:
    """0 means auto: $ZEROREG_THREADS if set, else all cores."""
    if threads:
        return threads
    env = os.environ.get("ZEROREG_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer ZEROREG_THREADS=%r", env)
    return os.cpu_count() or 1
