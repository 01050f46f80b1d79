"""Global map database as a factor graph.

Variables are keyframe poses and map points; factors are whitened
re-projection residuals (2 px) and whitened tag-anchor range residuals.
Residuals are ``predicted - measured`` divided by the factor sigma, and
Jacobians are taken with respect to the ``retract`` parameterization.
"""

from __future__ import annotations

import enum
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataError, GraphError
from .geometry import DEPTH_EPSILON, CameraIntrinsics, Pose, Rotation, skew
from .ranging import DEFAULT_RANGE_SIGMA, RangingExtrinsics

log = logging.getLogger(__name__)

RANGE_EPSILON = 1e-6  # m
DEFAULT_PIXEL_SIGMA = 1.0
DEFAULT_HUBER_THRESHOLD = 3.0  # in range sigmas


class VariableKind(enum.Enum):
    POSE = "pose"
    POINT = "point"


@dataclass(frozen=True)
class VariableId:
    kind: VariableKind
    index: int

    def __lt__(self, other):
        # poses before points, matching the optimizer's parameter layout
        return (self.kind is VariableKind.POINT, self.index) < (other.kind is VariableKind.POINT, other.index)

    def __str__(self):
        return f"{self.kind.value}[{self.index}]"


def pose_var(i: int) -> VariableId:
    return VariableId(VariableKind.POSE, int(i))


def point_var(i: int) -> VariableId:
    return VariableId(VariableKind.POINT, int(i))


@dataclass(frozen=True, eq=False)
class ReprojectionFactor:
    pose_id: VariableId
    point_id: VariableId
    observed_pixel: np.ndarray
    sigma_px: float = DEFAULT_PIXEL_SIGMA

    def __post_init__(self):
        if not self.sigma_px > 0:
            raise ValueError("sigma_px must be positive")
        object.__setattr__(self, "observed_pixel", np.asarray(self.observed_pixel, dtype=float).reshape(2))


@dataclass(frozen=True, eq=False)
class RangeFactor:
    """Tag-anchor distance at one keyframe.

    ``anchor`` overrides the graph's anchor position for this factor only;
    normally it is left ``None``.
    """

    pose_id: VariableId
    measured_distance: float
    sigma_m: float = DEFAULT_RANGE_SIGMA
    anchor: np.ndarray | None = None

    def __post_init__(self):
        if not self.measured_distance >= 0:
            raise ValueError("measured_distance must be >= 0")
        if not self.sigma_m > 0:
            raise ValueError("sigma_m must be positive")
        if self.anchor is not None:
            object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float).reshape(3))


class _FactorArrays(NamedTuple):
    rp_pose: np.ndarray
    rp_point: np.ndarray
    rp_obs: np.ndarray
    rp_sigma: np.ndarray
    rg_pose: np.ndarray
    rg_dist: np.ndarray
    rg_sigma: np.ndarray
    rg_anchor: np.ndarray


@dataclass(eq=False)
class FactorGraph:
    poses: list[Pose]
    points: np.ndarray
    intrinsics: CameraIntrinsics
    extrinsics: RangingExtrinsics
    reprojection_factors: list[ReprojectionFactor] = field(default_factory=list)
    range_factors: list[RangeFactor] = field(default_factory=list)
    fixed: frozenset = frozenset()
    range_loss: str = "l2"
    huber_threshold: float = DEFAULT_HUBER_THRESHOLD
    _arrays: _FactorArrays | None = field(default=None, repr=False)

    def __post_init__(self):
        self.poses = list(self.poses)
        self.points = np.array(self.points, dtype=float).reshape(-1, 3)
        self.fixed = frozenset(self.fixed)
        if self.range_loss not in ("l2", "huber"):
            raise ValueError(f"unknown range loss {self.range_loss!r}")

    @property
    def n_poses(self) -> int:
        return len(self.poses)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @property
    def arrays(self) -> _FactorArrays:
        if self._arrays is None:
            rp = self.reprojection_factors
            rg = self.range_factors
            anchors = [self.extrinsics.anchor_position if f.anchor is None else f.anchor for f in rg]
            self._arrays = _FactorArrays(
                np.array([f.pose_id.index for f in rp], dtype=np.intp),
                np.array([f.point_id.index for f in rp], dtype=np.intp),
                np.array([f.observed_pixel for f in rp], dtype=float).reshape(-1, 2),
                np.array([f.sigma_px for f in rp], dtype=float),
                np.array([f.pose_id.index for f in rg], dtype=np.intp),
                np.array([f.measured_distance for f in rg], dtype=float),
                np.array([f.sigma_m for f in rg], dtype=float),
                np.array(anchors, dtype=float).reshape(-1, 3),
            )
        return self._arrays

    def pose_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked camera-to-World rotation matrices and translations."""
        if not self.poses:
            return np.zeros((0, 3, 3)), np.zeros((0, 3))
        R = np.stack([p.rotation.matrix for p in self.poses])
        t = np.stack([p.translation for p in self.poses])
        return R, t

    def with_state(self, poses: Sequence[Pose], points: np.ndarray) -> FactorGraph:
        """Same factors and parameters, new variable values."""
        return FactorGraph(
            list(poses), points, self.intrinsics, self.extrinsics,
            self.reprojection_factors, self.range_factors, self.fixed,
            self.range_loss, self.huber_threshold, self._arrays,
        )

    def with_loss(self, range_loss: str, huber_threshold: float | None = None) -> FactorGraph:
        g = self.with_state(self.poses, self.points)
        g.range_loss = range_loss
        if huber_threshold is not None:
            g.huber_threshold = huber_threshold
        return g

    def is_fixed(self, var: VariableId) -> bool:
        return var in self.fixed

    def validate(self) -> None:
        """Check the structural invariants required before optimization.

        Raises:
            GraphError: with every violation found listed in the message.
        """
        problems = []
        a = self.arrays
        if len(a.rp_pose) and (a.rp_pose.min() < 0 or a.rp_pose.max() >= self.n_poses):
            problems.append("re-projection factor references a missing pose")
        if len(a.rp_point) and (a.rp_point.min() < 0 or a.rp_point.max() >= self.n_points):
            problems.append("re-projection factor references a missing map point")
        if len(a.rg_pose) and (a.rg_pose.min() < 0 or a.rg_pose.max() >= self.n_poses):
            problems.append("range factor references a missing pose")
        for f in self.reprojection_factors:
            if f.pose_id.kind is not VariableKind.POSE or f.point_id.kind is not VariableKind.POINT:
                problems.append("re-projection factor has mismatched variable kinds")
                break
        K = self.intrinsics
        outside = ~K.in_image(a.rp_obs)
        if np.any(outside):
            problems.append(f"{int(outside.sum())} observed pixels lie outside the image")
        for v in self.fixed:
            n = self.n_poses if v.kind is VariableKind.POSE else self.n_points
            if not 0 <= v.index < n:
                problems.append(f"fixed variable {v} does not exist")
        if not any(v.kind is VariableKind.POSE for v in self.fixed):
            problems.append("no pose is fixed (gauge freedom)")
        counts = np.bincount(a.rp_point[(a.rp_point >= 0) & (a.rp_point < self.n_points)], minlength=self.n_points)
        weak = [i for i in np.flatnonzero(counts < 2) if point_var(i) not in self.fixed]
        if weak:
            shown = ", ".join(str(i) for i in weak[:10])
            problems.append(f"{len(weak)} free map points have fewer than 2 observations (e.g. {shown})")
        if problems:
            raise GraphError("; ".join(problems))


class FactorResidual(NamedTuple):
    residual: np.ndarray
    pose_jacobian: np.ndarray
    point_jacobian: np.ndarray | None
    active: bool


class ReprojectionTerms(NamedTuple):
    residuals: np.ndarray  # (M, 2)
    pose_jac: np.ndarray | None  # (M, 2, 6)
    point_jac: np.ndarray | None  # (M, 2, 3)
    active: np.ndarray  # (M,)


class RangeTerms(NamedTuple):
    residuals: np.ndarray  # (N,)
    pose_jac: np.ndarray | None  # (N, 6)
    active: np.ndarray


def reprojection_terms(graph: FactorGraph, R, t, points, jacobians: bool = True) -> ReprojectionTerms:
    """Whitened re-projection residuals of every factor, vectorized."""
    a = graph.arrays
    K = graph.intrinsics
    m = len(a.rp_pose)
    if m == 0:
        z = np.zeros((0,))
        return ReprojectionTerms(np.zeros((0, 2)), np.zeros((0, 2, 6)), np.zeros((0, 2, 3)), z.astype(bool))
    Rm = R[a.rp_pose]
    xc = np.einsum("mji,mj->mi", Rm, points[a.rp_point] - t[a.rp_pose])
    depth = xc[:, 2]
    # written so that NaN depth stays active and surfaces as a non-finite residual
    active = ~(depth <= DEPTH_EPSILON)
    inv_z = 1.0 / np.where(active, depth, 1.0)
    s = 1.0 / a.rp_sigma
    pred = np.stack([K.fx * xc[:, 0] * inv_z + K.cx, K.fy * xc[:, 1] * inv_z + K.cy], axis=1)
    r = (pred - a.rp_obs) * s[:, None]
    r[~active] = 0.0
    if not jacobians:
        return ReprojectionTerms(r, None, None, active)
    D = np.zeros((m, 2, 3))
    D[:, 0, 0] = K.fx * inv_z * s
    D[:, 0, 2] = -K.fx * xc[:, 0] * inv_z**2 * s
    D[:, 1, 1] = K.fy * inv_z * s
    D[:, 1, 2] = -K.fy * xc[:, 1] * inv_z**2 * s
    D[~active] = 0.0
    # d(x_c)/d(point) = R^T, d(x_c)/d(dt) = -R^T, d(x_c)/d(dtheta) = [x_c]x
    Jl = np.einsum("mij,mkj->mik", D, Rm)
    Jp = np.concatenate([D @ skew(xc), -Jl], axis=2)
    return ReprojectionTerms(r, Jp, Jl, active)


def range_terms(graph: FactorGraph, R, t, jacobians: bool = True) -> RangeTerms:
    """Whitened range residuals of every factor, vectorized."""
    a = graph.arrays
    n = len(a.rg_pose)
    if n == 0:
        return RangeTerms(np.zeros(0), np.zeros((0, 6)), np.zeros(0, dtype=bool))
    lever = graph.extrinsics.tag_lever_arm
    Rm = R[a.rg_pose]
    u = t[a.rg_pose] + Rm @ lever - a.rg_anchor
    rho = np.linalg.norm(u, axis=1)
    active = ~(rho <= RANGE_EPSILON)
    s = 1.0 / a.rg_sigma
    r = np.where(active, (rho - a.rg_dist) * s, 0.0)
    if not jacobians:
        return RangeTerms(r, None, active)
    unit = u / np.where(active, rho, 1.0)[:, None]
    unit[~active] = 0.0
    # d(R l)/d(dtheta) = -R [l]x
    Jrot = -np.einsum("ni,nij->nj", unit, Rm @ skew(lever))
    J = np.concatenate([Jrot, unit], axis=1) * s[:, None]
    return RangeTerms(r, J, active)


def huber_weights(e: np.ndarray, k: float) -> np.ndarray:
    ae = np.abs(e)
    return np.where(ae <= k, 1.0, k / np.where(ae > 0, ae, 1.0))


def range_cost_terms(graph: FactorGraph, e: np.ndarray) -> np.ndarray:
    if graph.range_loss == "huber":
        k = graph.huber_threshold
        ae = np.abs(e)
        return np.where(ae <= k, e * e, 2.0 * k * ae - k * k)
    return e * e


def reprojection_residual(graph: FactorGraph, factor: ReprojectionFactor) -> FactorResidual:
    """Whitened residual and Jacobians of one re-projection factor."""
    pose = graph.poses[factor.pose_id.index]
    single = FactorGraph(
        [pose], graph.points[[factor.point_id.index]], graph.intrinsics, graph.extrinsics,
        [ReprojectionFactor(pose_var(0), point_var(0), factor.observed_pixel, factor.sigma_px)],
    )
    R, t = single.pose_arrays()
    terms = reprojection_terms(single, R, t, single.points)
    return FactorResidual(terms.residuals[0], terms.pose_jac[0], terms.point_jac[0], bool(terms.active[0]))


def range_residual(graph: FactorGraph, factor: RangeFactor) -> FactorResidual:
    """Whitened residual and 1x6 pose Jacobian of one range factor."""
    pose = graph.poses[factor.pose_id.index]
    single = FactorGraph(
        [pose], np.zeros((0, 3)), graph.intrinsics, graph.extrinsics,
        range_factors=[RangeFactor(pose_var(0), factor.measured_distance, factor.sigma_m, factor.anchor)],
    )
    R, t = single.pose_arrays()
    terms = range_terms(single, R, t)
    return FactorResidual(terms.residuals[:1], terms.pose_jac[:1], None, bool(terms.active[0]))


class CostBreakdown(NamedTuple):
    total: float
    reprojection: float
    range: float
    inactive_reprojection: int
    inactive_range: int


def cost_breakdown(graph: FactorGraph) -> CostBreakdown:
    R, t = graph.pose_arrays()
    rp = reprojection_terms(graph, R, t, graph.points, jacobians=False)
    rg = range_terms(graph, R, t, jacobians=False)
    c_rp = float(np.sum(rp.residuals[rp.active] ** 2))
    c_rg = float(np.sum(range_cost_terms(graph, rg.residuals[rg.active])))
    return CostBreakdown(
        c_rp + c_rg, c_rp, c_rg, int((~rp.active).sum()), int((~rg.active).sum())
    )


def total_cost(graph: FactorGraph) -> float:
    """Sum of squared whitened residuals over active factors."""
    return cost_breakdown(graph).total


def apply_scale(graph: FactorGraph, alpha: float) -> FactorGraph:
    """Multiply every pose translation and map point by ``alpha``."""
    if not np.isfinite(alpha):
        raise ValueError("scale must be finite")
    if alpha == 0.0:
        raise DataError("cannot apply a zero scale")
    return graph.with_state([p.scaled(alpha) for p in graph.poses], graph.points * alpha)


# --- snapshot serialization ---------------------------------------------------

def _f(x: float) -> str:
    return format(float(x), ".17g")


def _fs(xs: Iterable[float]) -> str:
    return " ".join(_f(x) for x in xs)


def dump_graph(graph: FactorGraph) -> str:
    """Plain-text snapshot with POSES / POINTS / REPROJ / RANGE blocks."""
    out = io.StringIO()
    K = graph.intrinsics
    out.write("# rangeslam factor graph snapshot\n")
    out.write(f"INTRINSICS {_fs([K.fx, K.fy, K.cx, K.cy])} {K.width} {K.height}\n")
    ext = graph.extrinsics
    out.write(f"EXTRINSICS {_fs(ext.anchor_position)} {_fs(ext.tag_lever_arm)}\n")
    out.write(f"LOSS {graph.range_loss} {_f(graph.huber_threshold)}\n")
    out.write(f"POSES {graph.n_poses}\n")
    for i, p in enumerate(graph.poses):
        out.write(f"{i} {_fs(p.translation)} {_fs(p.rotation.as_xyzw())}\n")
    out.write(f"POINTS {graph.n_points}\n")
    for i, x in enumerate(graph.points):
        out.write(f"{i} {_fs(x)}\n")
    out.write(f"REPROJ {len(graph.reprojection_factors)}\n")
    for f in graph.reprojection_factors:
        out.write(f"{f.pose_id.index} {f.point_id.index} {_fs(f.observed_pixel)} {_f(f.sigma_px)}\n")
    out.write(f"RANGE {len(graph.range_factors)}\n")
    for f in graph.range_factors:
        tail = "" if f.anchor is None else " " + _fs(f.anchor)
        out.write(f"{f.pose_id.index} {_f(f.measured_distance)} {_f(f.sigma_m)}{tail}\n")
    fixed = sorted(graph.fixed)
    out.write(f"FIXED {len(fixed)}\n")
    for v in fixed:
        out.write(f"{v.kind.value} {v.index}\n")
    return out.getvalue()


def load_graph(text: str) -> FactorGraph:
    """Inverse of ``dump_graph``."""
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0

    def header(name):
        nonlocal pos
        if pos >= len(lines) or lines[pos][0] != name:
            raise DataError(f"graph snapshot: expected {name} block")
        fields = lines[pos][1:]
        pos += 1
        return fields

    def block(name):
        nonlocal pos
        n = int(header(name)[0])
        rows = lines[pos:pos + n]
        if len(rows) != n:
            raise DataError(f"graph snapshot: truncated {name} block")
        pos += n
        return rows

    k = header("INTRINSICS")
    K = CameraIntrinsics(*map(float, k[:4]), int(k[4]), int(k[5]))
    e = list(map(float, header("EXTRINSICS")))
    ext = RangingExtrinsics(e[:3], e[3:6])
    loss = header("LOSS")
    poses = []
    for row in block("POSES"):
        v = list(map(float, row[1:]))
        poses.append(Pose(Rotation.from_xyzw(v[3:7]), v[:3]))
    points = np.array([list(map(float, row[1:4])) for row in block("POINTS")], dtype=float).reshape(-1, 3)
    rp = [
        ReprojectionFactor(pose_var(int(r[0])), point_var(int(r[1])), [float(r[2]), float(r[3])], float(r[4]))
        for r in block("REPROJ")
    ]
    rg = [
        RangeFactor(pose_var(int(r[0])), float(r[1]), float(r[2]),
                    None if len(r) < 6 else [float(x) for x in r[3:6]])
        for r in block("RANGE")
    ]
    fixed = {VariableId(VariableKind(r[0]), int(r[1])) for r in block("FIXED")}
    return FactorGraph(poses, points, K, ext, rp, rg, fixed, loss[0], float(loss[1]))
