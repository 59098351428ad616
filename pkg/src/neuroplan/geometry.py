"""Workspaces, robot models, collision checking and obstacle point clouds."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from neuroplan import _kernels as K
from neuroplan.errors import ContractError, FormatError

REGION_HALF = 20.0
CLOUD_SIZE = 1400
ANGLE_SCALE = math.pi / 20.0

_ROBOT_DIMS = {"point2": (2, 2), "point3": (3, 3), "rigid2": (2, 3)}


@dataclass(frozen=True)
class AabbObstacle:
    center: tuple[float, ...]
    half_extents: tuple[float, ...]

    def __post_init__(self):
        if len(self.center) != len(self.half_extents):
            raise ContractError("center and half_extents differ in length")
        if any(h <= 0 for h in self.half_extents):
            raise ContractError(f"half extents must be positive, got {self.half_extents}")

    @property
    def lo(self) -> np.ndarray:
        return np.subtract(self.center, self.half_extents)

    @property
    def hi(self) -> np.ndarray:
        return np.add(self.center, self.half_extents)

    @property
    def volume(self) -> float:
        return float(np.prod(2.0 * np.asarray(self.half_extents)))

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all((points >= self.lo) & (points <= self.hi), axis=1)

    def overlaps(self, other: AabbObstacle) -> bool:
        return bool(np.all(self.lo < other.hi) and np.all(other.lo < self.hi))


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned block obstacles inside the box [-bounds, bounds]."""

    dim: int
    obstacles: tuple[AabbObstacle, ...] = ()
    bounds: tuple[float, ...] = field(default=None)
    seed: int = 0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ContractError(f"workspace dim must be 2 or 3, got {self.dim}")
        if self.bounds is None:
            object.__setattr__(self, "bounds", (REGION_HALF,) * self.dim)
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if len(self.bounds) != self.dim:
            raise ContractError("bounds length must equal dim")
        b = np.asarray(self.bounds)
        for ob in self.obstacles:
            if len(ob.center) != self.dim:
                raise ContractError("obstacle dimension does not match workspace")
            if np.any(ob.lo < -b) or np.any(ob.hi > b):
                raise ContractError(f"obstacle {ob} leaves the operating region")

    @cached_property
    def lo(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, self.dim))
        return np.array([ob.lo for ob in self.obstacles], dtype=np.float64)

    @cached_property
    def hi(self) -> np.ndarray:
        if not self.obstacles:
            return np.zeros((0, self.dim))
        return np.array([ob.hi for ob in self.obstacles], dtype=np.float64)

    @cached_property
    def bounds_array(self) -> np.ndarray:
        return np.asarray(self.bounds, dtype=np.float64)

    @property
    def side(self) -> float:
        return 2.0 * max(self.bounds)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "bounds": list(self.bounds),
            "obstacles": [
                {"center": list(ob.center), "half_extents": list(ob.half_extents)}
                for ob in self.obstacles
            ],
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Workspace:
        try:
            obstacles = tuple(
                AabbObstacle(tuple(map(float, o["center"])), tuple(map(float, o["half_extents"])))
                for o in data["obstacles"]
            )
            return cls(
                dim=int(data["dim"]),
                obstacles=obstacles,
                bounds=tuple(data["bounds"]),
                seed=int(data.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed workspace: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> Workspace:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


@dataclass(frozen=True)
class RobotModel:
    kind: str = "point2"
    length: float = 4.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in _ROBOT_DIMS:
            raise ContractError(f"unknown robot kind {self.kind!r}")
        if self.length <= 0 or self.width <= 0:
            raise ContractError("rigid dimensions must be positive")

    @property
    def workspace_dim(self) -> int:
        return _ROBOT_DIMS[self.kind][0]

    @property
    def config_dim(self) -> int:
        return _ROBOT_DIMS[self.kind][1]

    @property
    def code(self) -> int:
        return K.RIGID if self.kind == "rigid2" else K.POINT

    @property
    def default_resolution(self) -> float:
        return 0.2 if self.kind == "rigid2" else 0.1

    @property
    def config_bounds(self) -> np.ndarray:
        # scaled angle shares the positional range
        return np.full(self.config_dim, REGION_HALF)


def as_config(q, rm: RobotModel) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (rm.config_dim,):
        raise ContractError(f"config of shape {q.shape} does not fit robot {rm.kind}")
    return q


def _check_pair(ws: Workspace, rm: RobotModel):
    if ws.dim != rm.workspace_dim:
        raise ContractError(f"robot {rm.kind} cannot move in a {ws.dim}D workspace")


def is_config_free(ws: Workspace, rm: RobotModel, q) -> bool:
    _check_pair(ws, rm)
    q = as_config(q, rm)
    return bool(
        K.config_free(rm.code, q, ws.lo, ws.hi, ws.bounds_array, rm.length / 2, rm.width / 2)
    )


def configs_free(ws: Workspace, rm: RobotModel, qs) -> np.ndarray:
    """Vectorised is_config_free over the rows of ``qs``."""
    _check_pair(ws, rm)
    qs = np.asarray(qs, dtype=np.float64).reshape(-1, rm.config_dim)
    return K.batch_config_free(
        rm.code, qs, ws.lo, ws.hi, ws.bounds_array, rm.length / 2, rm.width / 2
    )


def is_motion_free(ws: Workspace, rm: RobotModel, a, b, resolution: float | None = None) -> bool:
    """Is the straight motion from ``a`` to ``b`` collision free?

    Point robots use an exact segment/box test. The rigid body is checked at
    interpolated configurations no more than ``resolution`` apart, with every
    box inflated by the largest distance any robot point travels between two
    checks, so a motion accepted here is also accepted at any finer spacing.
    """
    _check_pair(ws, rm)
    if resolution is None:
        resolution = rm.default_resolution
    if resolution <= 0:
        raise ContractError("resolution must be positive")
    a = as_config(a, rm)
    b = as_config(b, rm)
    return bool(
        K.motion_free(
            rm.code, a, b, float(resolution), ws.lo, ws.hi, ws.bounds_array,
            rm.length / 2, rm.width / 2,
        )
    )


def path_cost(path) -> float:
    path = np.asarray(path, dtype=np.float64)
    if path.ndim != 2 or len(path) == 0:
        raise ContractError("path must be a non-empty list of configurations")
    if len(path) == 1:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def path_is_feasible(ws, rm, path, resolution=None) -> bool:
    path = np.asarray(path, dtype=np.float64)
    if len(path) == 1:
        return is_config_free(ws, rm, path[0])
    return all(is_motion_free(ws, rm, a, b, resolution) for a, b in zip(path[:-1], path[1:]))


# ---------------------------------------------------------------------------
# point clouds
# ---------------------------------------------------------------------------


def sample_point_cloud(ws: Workspace, n: int = CLOUD_SIZE, seed=0) -> np.ndarray:
    """Draw ``n`` points uniformly from the union of obstacle volumes.

    Per-obstacle counts are multinomial in the obstacle volumes; points are
    emitted grouped by obstacle, in workspace order, so that a fixed index in
    the flattened cloud tends to refer to the same block across workspaces.
    """
    if not ws.obstacles:
        raise ContractError("cannot sample obstacle space of an empty workspace")
    if n <= 0:
        raise ContractError("cloud size must be positive")
    rng = np.random.default_rng(seed)
    vol = np.array([ob.volume for ob in ws.obstacles])
    counts = rng.multinomial(n, vol / vol.sum())
    lo, hi = ws.lo, ws.hi
    parts = [rng.uniform(lo[i], hi[i], size=(c, ws.dim)) for i, c in enumerate(counts)]
    return np.concatenate(parts, axis=0)


_CLOUD_HEADER = struct.Struct("<II")


def save_cloud(path, cloud: np.ndarray) -> None:
    cloud = np.asarray(cloud)
    with open(path, "wb") as fh:
        fh.write(_CLOUD_HEADER.pack(*cloud.shape))
        fh.write(cloud.astype("<f4").tobytes())


def load_cloud(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _CLOUD_HEADER.size:
        raise FormatError(f"{path}: truncated cloud header")
    n, dim = _CLOUD_HEADER.unpack_from(raw)
    body = raw[_CLOUD_HEADER.size:]
    if len(body) != 4 * n * dim:
        raise FormatError(f"{path}: expected {n}x{dim} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)


def export_cloud_csv(path, cloud: np.ndarray) -> None:
    cols = "xyz"[: cloud.shape[1]]
    np.savetxt(path, cloud, delimiter=",", header=",".join(cols), comments="", fmt="%.6f")


def steer_toward(a: np.ndarray, b: np.ndarray, step: float) -> np.ndarray:
    d = np.linalg.norm(b - a)
    if d <= step:
        return b.copy()
    return a + (b - a) * (step / d)


def interpolate(path: Sequence, spacing: float) -> np.ndarray:
    """Resample a polyline so consecutive vertices are at most ``spacing`` apart."""
    path = np.asarray(path, dtype=np.float64)
    out = [path[0]]
    for a, b in zip(path[:-1], path[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / spacing)))
        for i in range(1, n + 1):
            out.append(a + (b - a) * (i / n))
    return np.array(out)
