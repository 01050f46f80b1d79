"""Two-way time-of-flight ranging, the range model and anchor trilateration."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometryError, InsufficientSamplesError, NegativeDistanceError
from .geometry import Pose

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0  # m/s, exact
DEFAULT_RANGE_SIGMA = 0.10  # m


@dataclass(frozen=True)
class RangeMeasurement:
    timestamp: float
    distance: float
    sigma: float = DEFAULT_RANGE_SIGMA

    def __post_init__(self):
        if not self.distance >= 0.0:
            raise ValueError(f"distance must be >= 0, got {self.distance}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class RangingExtrinsics:
    """Anchor position in the World frame and tag lever arm in the Camera frame."""

    anchor_position: np.ndarray
    tag_lever_arm: np.ndarray

    def __post_init__(self):
        for name in ("anchor_position", "tag_lever_arm"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            v.setflags(write=False)
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class TofSample:
    round_trip_time_avg: float  # s
    time_offset: float  # s, calibrated system delay


def tof_to_distance(sample: TofSample) -> float:
    """Distance from an averaged round-trip time: ``c/2 * (t_tof - t_off)``."""
    dt = sample.round_trip_time_avg - sample.time_offset
    if dt < 0.0:
        raise NegativeDistanceError(
            f"round-trip time {sample.round_trip_time_avg!r} s is below the offset {sample.time_offset!r} s"
        )
    return 0.5 * SPEED_OF_LIGHT * dt


def tag_offset(pose: Pose, ext: RangingExtrinsics) -> np.ndarray:
    """``R_WC @ p_CT - p_WA``, the scale-independent part of the range model."""
    return pose.rotation.apply(ext.tag_lever_arm) - ext.anchor_position


def predict_range(pose: Pose, scale: float, ext: RangingExtrinsics) -> float:
    """Tag-anchor distance for an up-to-scale pose multiplied by ``scale``."""
    return float(np.linalg.norm(scale * pose.translation + tag_offset(pose, ext)))


def _linear_start(x: np.ndarray, d: np.ndarray) -> np.ndarray:
    # ||a||^2 - 2 a.x_i + ||x_i||^2 = d_i^2, differenced against the centroid
    sq = np.sum(x * x, axis=1) - d * d
    M = 2.0 * (x - x.mean(axis=0))
    b = sq - sq.mean()
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e8:
        raise DegenerateGeometryError(
            f"survey geometry is degenerate (condition number {cond:.3g}); tag positions may be coplanar"
        )
    a, *_ = np.linalg.lstsq(M, b, rcond=None)
    return a


def trilaterate_anchor(
    samples: Sequence[tuple[Sequence[float], float]],
    max_iterations: int = 50,
    step_tolerance: float = 1e-10,
) -> tuple[np.ndarray, float]:
    """Estimate a fixed position from distances measured at known positions.

    Args:
        samples: ``(tag_position_W, distance)`` pairs, at least four.
        max_iterations: Gauss-Newton iteration cap.
        step_tolerance: stop once the update norm falls below this (m).

    Returns:
        ``(anchor, residual_rms)``.

    Raises:
        InsufficientSamplesError: fewer than four samples.
        DegenerateGeometryError: the linearized system is ill-conditioned.
    """
    if len(samples) < 4:
        raise InsufficientSamplesError(f"trilateration needs at least 4 samples, got {len(samples)}")
    x = np.array([s[0] for s in samples], dtype=float).reshape(-1, 3)
    d = np.array([s[1] for s in samples], dtype=float)

    a = _linear_start(x, d)
    for _ in range(max_iterations):
        diff = a - x
        rho = np.linalg.norm(diff, axis=1)
        if np.any(rho < 1e-12):
            break
        r = rho - d
        J = diff / rho[:, None]
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        a = a + step
        if np.linalg.norm(step) < step_tolerance:
            break
    rms = float(np.sqrt(np.mean((np.linalg.norm(a - x, axis=1) - d) ** 2)))
    return a, rms
