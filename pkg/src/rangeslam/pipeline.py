"""Scale initialization followed by global least-squares refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .graph import FactorGraph, RangeFactor, ReprojectionFactor, apply_scale, point_var, pose_var
from .optimizer import LmConfig, LmReport, optimize
from .ranging import RangeMeasurement, RangingExtrinsics
from .scale import (
    DEFAULT_ASSOCIATION_TOLERANCE,
    DEFAULT_MIN_SAMPLES,
    DupletSet,
    ScaleEstimate,
    accumulate_duplets,
    associate,
    select_scale,
)
from .sim import Observations, Scenario

log = logging.getLogger(__name__)


def build_graph(
    poses: Sequence[Pose],
    timestamps: np.ndarray,
    points: np.ndarray,
    observations: Observations,
    ranges: Sequence[RangeMeasurement],
    intrinsics: CameraIntrinsics,
    extrinsics: RangingExtrinsics,
    tolerance: float = DEFAULT_ASSOCIATION_TOLERANCE,
    robust_range: bool = False,
) -> FactorGraph:
    """Factor graph over the given poses and points, first pose fixed.

    Ranges are attached to the keyframe nearest in time (within
    ``tolerance``); unmatched ranges are dropped.
    """
    timestamps = np.asarray(timestamps, dtype=float)
    reproj = [
        ReprojectionFactor(pose_var(k), point_var(p), uv, s)
        for k, p, uv, s in zip(observations.keyframe, observations.point, observations.pixels, observations.sigma)
    ]
    rng_factors = []
    for m in sorted(ranges, key=lambda r: r.timestamp):
        k = associate(timestamps, m.timestamp, tolerance)
        if k is not None:
            rng_factors.append(RangeFactor(pose_var(k), m.distance, m.sigma))
    if len(rng_factors) < len(ranges):
        log.info("%d ranges not associated with a keyframe", len(ranges) - len(rng_factors))
    return FactorGraph(
        poses, points, intrinsics, extrinsics, reproj, rng_factors,
        fixed={pose_var(0)}, range_loss="huber" if robust_range else "l2",
    )


@dataclass
class PipelineResult:
    duplets: DupletSet
    scale: ScaleEstimate
    scaled: FactorGraph
    refined: FactorGraph
    report: LmReport


def run_pipeline(
    scenario: Scenario,
    lm_config: LmConfig | None = None,
    min_samples: int = DEFAULT_MIN_SAMPLES,
    tolerance: float = DEFAULT_ASSOCIATION_TOLERANCE,
    robust_range: bool = False,
) -> PipelineResult:
    """Estimate the global scale, rescale the VO map and refine it."""
    w = scenario.world
    traj = list(zip(w.timestamps, scenario.vo_poses))
    duplets = accumulate_duplets(traj, scenario.ranges, w.extrinsics, tolerance)
    est = select_scale(duplets.duplets, min_samples)
    vo = scenario.vo_map
    graph = build_graph(
        scenario.vo_poses, w.timestamps, vo.points, vo.observations, scenario.ranges,
        w.intrinsics, w.extrinsics, tolerance, robust_range,
    )
    scaled = apply_scale(graph, est.alpha)
    refined, report = optimize(scaled, lm_config)
    return PipelineResult(duplets, est, scaled, refined, report)
