"""Text file formats shared by the CLI.

Trajectory: ``timestamp tx ty tz qx qy qz qw`` per line (camera-to-World,
quaternion scalar-last). Range log: ``timestamp distance [sigma]``.
Observations: ``POINT id x y z`` and ``OBS keyframe point u v sigma`` lines,
where ``keyframe`` is the 0-based row of the trajectory file. Extrinsics and
scale files are ``key = value`` with ``[section]`` headers. ``#`` starts a
comment everywhere. Floats are written with 17 significant digits unless a
different precision is requested.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .geometry import CameraIntrinsics, Pose, Rotation
from .optimizer import IterationRecord
from .ranging import DEFAULT_RANGE_SIGMA, RangeMeasurement, RangingExtrinsics
from .scale import ScaleEstimate
from .sim import Observations

log = logging.getLogger(__name__)

PRECISION = 17


def fmt(x: float, precision: int = PRECISION) -> str:
    return format(float(x), f".{precision}g")


def fmt_all(xs: Iterable[float], precision: int = PRECISION) -> str:
    return " ".join(fmt(x, precision) for x in xs)


def _data_lines(path):
    """Yield ``(line_number, fields)`` for non-comment, non-blank lines."""
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if line:
                yield n, line.split()


def _floats(path, n, fields, count=None):
    try:
        vals = [float(f) for f in fields]
    except ValueError:
        raise DataError(f"{path}:{n}: expected numbers, got {' '.join(fields)!r}") from None
    if count is not None and len(vals) not in (count if isinstance(count, tuple) else (count,)):
        raise DataError(f"{path}:{n}: expected {count} fields, got {len(vals)}")
    if not all(np.isfinite(vals)):
        raise DataError(f"{path}:{n}: non-finite value")
    return vals


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def pairs(self) -> list[tuple[float, Pose]]:
        return list(zip(self.timestamps.tolist(), self.poses))

    def scaled(self, alpha: float) -> Trajectory:
        return Trajectory(self.timestamps, [p.scaled(alpha) for p in self.poses])


def read_trajectory(path) -> Trajectory:
    times, poses = [], []
    for n, fields in _data_lines(path):
        v = _floats(path, n, fields, 8)
        q = np.array(v[4:8])
        norm = np.linalg.norm(q)
        if norm == 0:
            raise DataError(f"{path}:{n}: zero quaternion")
        if abs(norm - 1.0) > 1e-6:
            log.warning("%s:%d: quaternion norm %.9g, normalizing", path, n, norm)
        if times and v[0] <= times[-1]:
            raise DataError(f"{path}:{n}: timestamps must be strictly increasing")
        times.append(v[0])
        poses.append(Pose(Rotation.from_xyzw(q), v[1:4]))
    return Trajectory(np.array(times), poses)


def write_trajectory(path, traj: Trajectory, precision: int = PRECISION) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw (camera-to-World)\n")
        for t, p in zip(traj.timestamps, traj.poses):
            fh.write(f"{fmt(t, precision)} {fmt_all(p.translation, precision)} "
                     f"{fmt_all(p.rotation.as_xyzw(), precision)}\n")


def read_range_log(path) -> list[RangeMeasurement]:
    out = []
    for n, fields in _data_lines(path):
        v = _floats(path, n, fields, (2, 3))
        sigma = v[2] if len(v) == 3 else DEFAULT_RANGE_SIGMA
        try:
            out.append(RangeMeasurement(v[0], v[1], sigma))
        except ValueError as e:
            raise DataError(f"{path}:{n}: {e}") from None
    return out


def write_range_log(path, ranges: Sequence[RangeMeasurement], precision: int = PRECISION) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp_s distance_m sigma_m\n")
        for r in ranges:
            fh.write(f"{fmt(r.timestamp, precision)} {fmt(r.distance, precision)} {fmt(r.sigma, precision)}\n")


def read_observations(path) -> tuple[np.ndarray, np.ndarray, Observations]:
    """Returns ``(point_ids, points, observations)``; observation point
    indices refer to rows of ``points``."""
    ids, pts, obs = [], [], []
    for n, fields in _data_lines(path):
        tag, rest = fields[0], fields[1:]
        if tag == "POINT":
            v = _floats(path, n, rest, 4)
            ids.append(int(v[0]))
            pts.append(v[1:])
        elif tag == "OBS":
            v = _floats(path, n, rest, 5)
            obs.append((n, int(v[0]), int(v[1]), v[2], v[3], v[4]))
        else:
            raise DataError(f"{path}:{n}: unknown record {tag!r}")
    index = {pid: i for i, pid in enumerate(ids)}
    if len(index) != len(ids):
        raise DataError(f"{path}: duplicate POINT ids")
    kf, pt, uv, sg = [], [], [], []
    for n, k, pid, u, v, s in obs:
        if pid not in index:
            raise DataError(f"{path}:{n}: observation of unknown point {pid}")
        if not s > 0:
            raise DataError(f"{path}:{n}: sigma must be positive")
        kf.append(k)
        pt.append(index[pid])
        uv.append((u, v))
        sg.append(s)
    return (
        np.array(ids, dtype=np.intp),
        np.array(pts, dtype=float).reshape(-1, 3),
        Observations(np.array(kf, dtype=np.intp), np.array(pt, dtype=np.intp),
                     np.array(uv, dtype=float).reshape(-1, 2), np.array(sg, dtype=float)),
    )


def write_observations(path, points: np.ndarray, obs: Observations, point_ids=None,
                       precision: int = PRECISION) -> None:
    ids = np.arange(len(points)) if point_ids is None else np.asarray(point_ids)
    with open(path, "w") as fh:
        fh.write("# POINT id x y z   (map point, World frame)\n")
        fh.write("# OBS keyframe point_id u v sigma_px\n")
        for i, x in zip(ids, points):
            fh.write(f"POINT {int(i)} {fmt_all(x, precision)}\n")
        for k, p, uv, s in zip(obs.keyframe, obs.point, obs.pixels, obs.sigma):
            fh.write(f"OBS {int(k)} {int(ids[p])} {fmt_all(uv, precision)} {fmt(s, precision)}\n")


def write_points(path, points: np.ndarray, point_ids=None, precision: int = PRECISION) -> None:
    ids = np.arange(len(points)) if point_ids is None else np.asarray(point_ids)
    with open(path, "w") as fh:
        fh.write("# POINT id x y z   (map point, World frame)\n")
        for i, x in zip(ids, points):
            fh.write(f"POINT {int(i)} {fmt_all(x, precision)}\n")


def _read_ini(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as e:
        raise DataError(f"{path}: {e}") from None
    return cp


def _get(cp, path, section, key, conv=float):
    try:
        raw = cp[section][key]
    except KeyError:
        raise DataError(f"{path}: missing [{section}] {key}") from None
    try:
        return conv(raw)
    except ValueError:
        raise DataError(f"{path}: bad value for [{section}] {key}: {raw!r}") from None


def _vec3(raw: str) -> list[float]:
    v = [float(x) for x in raw.split()]
    if len(v) != 3:
        raise ValueError("expected 3 numbers")
    return v


def read_extrinsics(path) -> tuple[RangingExtrinsics, CameraIntrinsics]:
    cp = _read_ini(path)
    try:
        ext = RangingExtrinsics(
            _get(cp, path, "ranging", "anchor_position", _vec3),
            _get(cp, path, "ranging", "tag_lever_arm", _vec3),
        )
        K = CameraIntrinsics(
            _get(cp, path, "camera", "fx"), _get(cp, path, "camera", "fy"),
            _get(cp, path, "camera", "cx"), _get(cp, path, "camera", "cy"),
            _get(cp, path, "camera", "width", int), _get(cp, path, "camera", "height", int),
        )
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    return ext, K


def write_extrinsics(path, ext: RangingExtrinsics, K: CameraIntrinsics, precision: int = PRECISION) -> None:
    with open(path, "w") as fh:
        fh.write("# anchor in the World frame, tag lever arm in the Camera frame (m)\n")
        fh.write("[ranging]\n")
        fh.write(f"anchor_position = {fmt_all(ext.anchor_position, precision)}\n")
        fh.write(f"tag_lever_arm = {fmt_all(ext.tag_lever_arm, precision)}\n")
        fh.write("\n[camera]\n")
        for key in ("fx", "fy", "cx", "cy"):
            fh.write(f"{key} = {fmt(getattr(K, key), precision)}\n")
        fh.write(f"width = {K.width}\nheight = {K.height}\n")


def write_scale_file(path, est: ScaleEstimate, precision: int = PRECISION) -> None:
    with open(path, "w") as fh:
        fh.write("[scale]\n")
        fh.write(f"alpha = {fmt(est.alpha, precision)}\n")
        fh.write(f"std_dev = {fmt(est.std_dev, precision)}\n")
        fh.write(f"n_samples = {est.n_samples}\n")
        fh.write(f"branch = {est.branch}\n")
        fh.write(f"rejected_branch_mean = {fmt(est.rejected_branch_mean, precision)}\n")
        fh.write(f"rejected_branch_std = {fmt(est.rejected_branch_std, precision)}\n")
        fh.write(f"ambiguous = {str(est.ambiguous).lower()}\n")


def read_scale_file(path) -> ScaleEstimate:
    cp = _read_ini(path)
    return ScaleEstimate(
        alpha=_get(cp, path, "scale", "alpha"),
        std_dev=_get(cp, path, "scale", "std_dev"),
        n_samples=_get(cp, path, "scale", "n_samples", int),
        rejected_branch_mean=_get(cp, path, "scale", "rejected_branch_mean"),
        rejected_branch_std=_get(cp, path, "scale", "rejected_branch_std"),
        branch=_get(cp, path, "scale", "branch", str),
        ambiguous=_get(cp, path, "scale", "ambiguous", lambda s: s.strip().lower() == "true"),
    )


def read_survey(path) -> list[tuple[list[float], float]]:
    out = []
    for n, fields in _data_lines(path):
        v = _floats(path, n, fields, 4)
        out.append((v[:3], v[3]))
    return out


def write_survey(path, samples, precision: int = PRECISION) -> None:
    with open(path, "w") as fh:
        fh.write("# tag_x tag_y tag_z distance (World frame, m)\n")
        for x, d in samples:
            fh.write(f"{fmt_all(x, precision)} {fmt(d, precision)}\n")


def read_lm_log(path) -> tuple[float, list[IterationRecord]]:
    """Initial cost and per-trial records of an LM log."""
    initial = None
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            s = line.strip()
            if s.startswith("# initial_cost"):
                initial = float(s.split()[2])
                continue
            if not s or s.startswith("#"):
                continue
            f = s.split()
            if len(f) != 5:
                raise DataError(f"{path}:{n}: expected 5 fields")
            rows.append(IterationRecord(int(f[0]), float(f[1]), float(f[2]), float(f[3]), f[4] == "1"))
    if initial is None:
        raise DataError(f"{path}: missing initial_cost header")
    return initial, rows
