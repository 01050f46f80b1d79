"""Synthetic world, measurement synthesis and a visual-odometry corruption model.

The simulator builds a rover trajectory in a local "site" frame (z up),
mounts a forward-looking camera on it and then re-expresses everything in
the World frame, i.e. the frame of the first camera. The VO trajectory is
the true trajectory divided by the true scale, optionally with a random
walk on the relative motions. VO map points are re-triangulated from the
corrupted poses and the noisy pixels.

Defaults form the benchmark world: a 20 m x 10 m figure-eight with 100
keyframes, 500 map points, the anchor 15 m off the path and a true scale
of 4.6. These numbers are arbitrary but fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InfeasibleWorldError
from .geometry import DEPTH_EPSILON, CameraIntrinsics, Pose, Rotation, compose, project_points
from .graph import DEFAULT_PIXEL_SIGMA
from .ranging import DEFAULT_RANGE_SIGMA, RangeMeasurement, RangingExtrinsics

log = logging.getLogger(__name__)

TRAJECTORIES = ("circle", "figure-eight", "straight")
MAX_REJECTION_ROUNDS = 1000


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=400.0, fy=400.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass(frozen=True)
class WorldConfig:
    trajectory: str = "figure-eight"
    length: float = 20.0  # figure-eight x extent / straight line length (m)
    width: float = 10.0  # figure-eight y extent (m)
    radius: float = 10.0  # circle radius (m)
    # closed shapes stop short of the start; the last keyframes would otherwise
    # sit next to the World origin, where the scale quadratic is ill-conditioned
    loop_fraction: float = 0.9
    n_keyframes: int = 100
    keyframe_period: float = 1.0  # s
    n_map_points: int = 500
    # site-frame (xmin, xmax, ymin, ymax, zmin, zmax); None derives it from the path
    point_box: tuple | None = None
    box_margin: float = 12.0
    camera_height: float = 1.0
    min_depth: float = 1.0
    max_depth: float = 30.0
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    anchor_distance: float = 15.0
    anchor_height: float = 2.0
    tag_lever_arm: tuple = (0.1, -0.3, -0.2)  # camera frame: right, down, forward
    true_scale: float = 4.6
    seed: int = 0

    def __post_init__(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"trajectory must be one of {TRAJECTORIES}, got {self.trajectory!r}")
        if self.n_keyframes < 2:
            raise ValueError("n_keyframes must be >= 2")
        if self.n_map_points < 8:
            raise ValueError("n_map_points must be >= 8")
        if not self.true_scale > 0:
            raise ValueError("true_scale must be positive")
        if not 0 < self.loop_fraction <= 1:
            raise ValueError("loop_fraction must be in (0, 1]")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma: float = 1.0  # px
    range_sigma: float = DEFAULT_RANGE_SIGMA  # m
    rotation_walk: float = 0.001  # rad per keyframe
    translation_walk: float = 0.01  # fraction of the step length per keyframe
    outlier_probability: float = 0.0
    outlier_magnitude: float = 0.0  # m, positive excess path

    def __post_init__(self):
        for name, v in vars(self).items():
            if not v >= 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def noiseless(cls) -> NoiseConfig:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class World:
    timestamps: np.ndarray
    poses: list[Pose]  # metric, camera-to-World
    points: np.ndarray  # (L, 3) World frame
    intrinsics: CameraIntrinsics
    extrinsics: RangingExtrinsics
    true_scale: float
    world_to_site: Pose  # for plotting in the site frame

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


@dataclass
class Observations:
    """Pixel observations as parallel arrays, ordered by (keyframe, point)."""

    keyframe: np.ndarray
    point: np.ndarray
    pixels: np.ndarray
    sigma: np.ndarray

    def __len__(self) -> int:
        return len(self.keyframe)

    def subset(self, mask) -> Observations:
        return Observations(self.keyframe[mask], self.point[mask], self.pixels[mask], self.sigma[mask])


def _site_path(config: WorldConfig):
    """Keyframe positions and headings in the site frame, plus the anchor direction."""
    n = config.n_keyframes
    h = config.camera_height
    if config.trajectory == "straight":
        s = np.linspace(0.0, config.length, n)
        xy = np.stack([s, np.zeros(n)], axis=1)
        heading = np.zeros(n)
        away = np.array([-1.0, 0.0])
    elif config.trajectory == "circle":
        th = 2.0 * np.pi * config.loop_fraction * np.arange(n) / n
        r = config.radius
        xy = np.stack([r * np.cos(th), r * np.sin(th)], axis=1)
        heading = th + np.pi / 2
        away = np.array([1.0, 0.0])
    else:
        s = -np.pi / 2 + 2.0 * np.pi * config.loop_fraction * np.arange(n) / n
        a, b = config.length / 2, config.width / 2
        xy = np.stack([a * np.sin(s), b * np.sin(2 * s)], axis=1)
        heading = np.arctan2(2 * b * np.cos(2 * s), a * np.cos(s))
        away = np.array([-1.0, 0.0])
    pos = np.column_stack([xy, np.full(n, h)])
    return pos, heading, away


def _camera_rotation(heading: float) -> np.ndarray:
    """Site-frame rotation of a level camera looking along ``heading``."""
    c, s = np.cos(heading), np.sin(heading)
    # columns: right, down, forward
    return np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])


def _visibility(config: WorldConfig, R: np.ndarray, t: np.ndarray, X: np.ndarray):
    """(K, B) visibility mask and pixels of points ``X`` from every keyframe."""
    uv, depth = project_points(config.intrinsics, R[:, None], t[:, None], X[None])
    ok = (depth >= config.min_depth) & (depth <= config.max_depth)
    with np.errstate(invalid="ignore"):
        ok &= config.intrinsics.in_image(uv)
    return ok, uv


def generate_world(config: WorldConfig) -> World:
    """Ground-truth keyframes, map points and ranging extrinsics.

    Raises:
        InfeasibleWorldError: not enough points visible from two keyframes
            after the rejection-sampling budget.
    """
    rng = np.random.default_rng([config.seed, 0])
    pos, heading, away = _site_path(config)
    site_poses = [Pose(Rotation.from_matrix(_camera_rotation(hd)), p) for hd, p in zip(heading, pos)]
    world_to_site = site_poses[0]
    site_to_world = world_to_site.inverse()
    poses = [Pose.identity()] + [compose(site_to_world, p) for p in site_poses[1:]]

    anchor_site = np.array([*(pos[0, :2] + config.anchor_distance * away), config.anchor_height])
    ext = RangingExtrinsics(site_to_world.apply(anchor_site), config.tag_lever_arm)

    if config.point_box is None:
        m = config.box_margin
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        box = (lo[0] - m, hi[0] + m, lo[1] - m, hi[1] + m, 0.0, 4.0)
    else:
        box = tuple(float(v) for v in config.point_box)
    lo = np.array(box[0::2])
    hi = np.array(box[1::2])

    R = np.stack([p.rotation.matrix for p in poses])
    t = np.stack([p.translation for p in poses])
    need = config.n_map_points
    kept = []
    for _ in range(MAX_REJECTION_ROUNDS):
        cand_site = rng.uniform(lo, hi, size=(max(2 * need, 64), 3))
        cand = site_to_world.apply(cand_site)
        ok, _ = _visibility(config, R, t, cand)
        good = cand[ok.sum(axis=0) >= 2]
        kept.extend(good[: need - len(kept)])
        if len(kept) >= need:
            break
    else:
        raise InfeasibleWorldError(
            f"only {len(kept)} of {need} map points are visible from two keyframes "
            f"after {MAX_REJECTION_ROUNDS} rounds"
        )
    times = config.keyframe_period * np.arange(config.n_keyframes, dtype=float)
    return World(times, poses, np.array(kept), config.intrinsics, ext, config.true_scale, world_to_site)


def synthesize_measurements(world: World, noise: NoiseConfig, seed) -> tuple[Observations, list[RangeMeasurement]]:
    """Noisy pixels of every visible point and one range per keyframe."""
    rng = np.random.default_rng(seed)
    K = world.intrinsics
    R = np.stack([p.rotation.matrix for p in world.poses])
    t = np.stack([p.translation for p in world.poses])
    uv, depth = project_points(K, R[:, None], t[:, None], world.points[None])
    visible = depth > DEPTH_EPSILON
    with np.errstate(invalid="ignore"):
        visible &= K.in_image(uv)
    kf, pt = np.nonzero(visible)
    pixels = uv[kf, pt] + noise.pixel_sigma * rng.standard_normal((len(kf), 2))
    inside = K.in_image(pixels)
    sigma = noise.pixel_sigma if noise.pixel_sigma > 0 else DEFAULT_PIXEL_SIGMA
    obs = Observations(kf[inside], pt[inside], pixels[inside], np.full(int(inside.sum()), sigma))

    ext = world.extrinsics
    u = t + R @ ext.tag_lever_arm - ext.anchor_position
    dist = np.linalg.norm(u, axis=1)
    dist = dist + noise.range_sigma * rng.standard_normal(len(dist))
    outlier = rng.uniform(size=len(dist)) < noise.outlier_probability
    dist = dist + outlier * noise.outlier_magnitude * rng.uniform(0.5, 1.5, size=len(dist))
    rsig = noise.range_sigma if noise.range_sigma > 0 else DEFAULT_RANGE_SIGMA
    ranges = [RangeMeasurement(float(ts), float(max(d, 0.0)), rsig) for ts, d in zip(world.timestamps, dist)]
    return obs, ranges


def corrupt_to_vo(true_poses: Sequence[Pose], true_scale: float, noise: NoiseConfig, seed) -> list[Pose]:
    """Up-to-scale VO trajectory with random-walk drift on relative motions.

    The first pose stays the identity. Without drift noise every
    translation is exactly the true one divided by ``true_scale``.
    """
    if not true_scale > 0:
        raise ValueError("true_scale must be positive")
    scaled = [Pose(p.rotation, p.translation / true_scale) for p in true_poses]
    if noise.rotation_walk == 0 and noise.translation_walk == 0:
        return scaled
    rng = np.random.default_rng(seed)
    out = [scaled[0]]
    for prev, cur in zip(scaled[:-1], scaled[1:]):
        rel = compose(prev.inverse(), cur)
        step = np.linalg.norm(rel.translation)
        drot = Rotation.from_rotvec(noise.rotation_walk * rng.standard_normal(3))
        dt = noise.translation_walk * step * rng.standard_normal(3)
        noisy = Pose(rel.rotation * drot, rel.translation + dt)
        out.append(compose(out[-1], noisy))
    return out


def _rays(K: CameraIntrinsics, R: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    xn = np.column_stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))])
    d = np.einsum("mij,mj->mi", R, xn)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def triangulate_midpoint(
    poses: Sequence[Pose], obs: Observations, K: CameraIntrinsics, n_points: int
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares multi-ray midpoint of every point.

    Returns ``(points, parallax)`` where ``parallax`` is the largest angle
    (rad) between a point's first ray and any of its other rays.
    """
    R = np.stack([p.rotation.matrix for p in poses])
    c = np.stack([p.translation for p in poses])
    d = _rays(K, R[obs.keyframe], obs.pixels)
    P = np.eye(3)[None] - d[:, :, None] * d[:, None, :]
    A = np.zeros((n_points, 3, 3))
    b = np.zeros((n_points, 3))
    np.add.at(A, obs.point, P)
    np.add.at(b, obs.point, np.einsum("mij,mj->mi", P, c[obs.keyframe]))
    first = np.zeros(n_points, dtype=np.intp)
    uniq, first_idx = np.unique(obs.point, return_index=True)
    first[uniq] = first_idx
    cosang = np.einsum("mi,mi->m", d, d[first[obs.point]])
    parallax = np.zeros(n_points)
    np.maximum.at(parallax, obs.point, np.arccos(np.clip(cosang, -1.0, 1.0)))
    X = np.full((n_points, 3), np.nan)
    ok = parallax > 0
    X[ok] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return X, parallax


@dataclass
class VoMap:
    """Map points of the VO back-end; ``point_ids`` index the true points."""

    points: np.ndarray
    point_ids: np.ndarray
    observations: Observations  # point indices refer to ``points``


def build_vo_map(
    vo_poses: Sequence[Pose], obs: Observations, K: CameraIntrinsics, n_points: int,
    min_parallax_deg: float = 1.0,
) -> VoMap:
    """Triangulate map points from VO poses, dropping poorly conditioned ones."""
    X, parallax = triangulate_midpoint(vo_poses, obs, K, n_points)
    keep = parallax >= np.deg2rad(min_parallax_deg)
    R = np.stack([p.rotation.matrix for p in vo_poses])
    t = np.stack([p.translation for p in vo_poses])
    Xo = np.nan_to_num(X[obs.point])
    depth = np.einsum("mji,mj->mi", R[obs.keyframe], Xo - t[obs.keyframe])[:, 2]
    obs_ok = keep[obs.point] & (depth > DEPTH_EPSILON)
    counts = np.bincount(obs.point[obs_ok], minlength=n_points)
    keep &= counts >= 2
    obs_ok &= keep[obs.point]
    ids = np.flatnonzero(keep)
    remap = np.full(n_points, -1)
    remap[ids] = np.arange(len(ids))
    sub = obs.subset(obs_ok)
    sub = Observations(sub.keyframe, remap[sub.point], sub.pixels, sub.sigma)
    dropped = n_points - len(ids)
    if dropped:
        log.debug("VO map dropped %d of %d points", dropped, n_points)
    return VoMap(X[ids], ids, sub)


@dataclass
class Scenario:
    world: World
    noise: NoiseConfig
    observations: Observations  # against true point indices
    ranges: list[RangeMeasurement]
    vo_poses: list[Pose]
    vo_map: VoMap

    @property
    def timestamps(self) -> np.ndarray:
        return self.world.timestamps


def make_scenario(world_config: WorldConfig, noise: NoiseConfig, seed: int | None = None) -> Scenario:
    """Generate a world and everything a VO + ranging back-end would see.

    ``seed`` overrides ``world_config.seed``; every random draw is derived
    from it.
    """
    if seed is not None:
        world_config = replace(world_config, seed=seed)
    s = world_config.seed
    world = generate_world(world_config)
    obs, ranges = synthesize_measurements(world, noise, [s, 1])
    vo = corrupt_to_vo(world.poses, world.true_scale, noise, [s, 2])
    vo_map = build_vo_map(vo, obs, world.intrinsics, len(world.points))
    return Scenario(world, noise, obs, ranges, vo, vo_map)


def survey_samples(world: World, n: int, sigma: float, seed, spread: float = 5.0):
    """Tag positions near the start with noisy anchor distances, for trilateration.

    The tag is raised and lowered on a mast so the survey is not coplanar.
    """
    rng = np.random.default_rng(seed)
    site = np.column_stack([
        rng.uniform(-spread, spread, size=(n, 2)),
        rng.uniform(0.2, 3.0, size=n),
    ])
    start = world.world_to_site.translation
    site[:, :2] += start[:2]
    pos = world.world_to_site.inverse().apply(site)
    d = np.linalg.norm(pos - world.extrinsics.anchor_position, axis=1) + sigma * rng.standard_normal(n)
    return [(p, float(max(x, 0.0))) for p, x in zip(pos, d)]
