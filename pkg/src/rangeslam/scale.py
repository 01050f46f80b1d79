"""Global scale from single-anchor ranges.

Every range measurement paired with an up-to-scale pose gives a quadratic
in the unknown scale whose two roots form a duplet. Over time the root
belonging to the true scale stays put while the other one wanders, so the
branch with the smaller spread is selected.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateGeometryError, InsufficientSamplesError
from .geometry import Pose
from .ranging import RangeMeasurement, RangingExtrinsics, tag_offset

log = logging.getLogger(__name__)

POSITION_EPSILON = 1e-6  # m
DEFAULT_ASSOCIATION_TOLERANCE = 0.05  # s
DEFAULT_MIN_SAMPLES = 10
AMBIGUITY_RATIO = 0.10


class NoRealSolution(ArithmeticError):
    """The measured sphere misses the camera ray."""


@dataclass(frozen=True)
class ScaleDuplet:
    timestamp: float
    alpha_minus: float
    alpha_plus: float
    discriminant: float


@dataclass(frozen=True)
class ScaleEstimate:
    alpha: float
    std_dev: float
    n_samples: int
    rejected_branch_mean: float
    rejected_branch_std: float
    branch: str  # "minus" or "plus"
    ambiguous: bool = False


def quadratic_coefficients(pose: Pose, distance: float, ext: RangingExtrinsics) -> tuple[float, float, float]:
    """``(A, B, C)`` with ``A*a**2 + 2*B*a + C == 0`` at every consistent scale ``a``."""
    p = pose.translation
    w = tag_offset(pose, ext)
    A = float(p @ p)
    B = float(p @ w)
    C = float(w @ w) - distance * distance
    return A, B, C


def scale_candidates(pose: Pose, measurement: RangeMeasurement, ext: RangingExtrinsics) -> ScaleDuplet:
    """Both scale roots for one range measurement.

    Raises:
        DegenerateGeometryError: the camera sits at the World origin.
        NoRealSolution: negative discriminant.
    """
    if np.linalg.norm(pose.translation) < POSITION_EPSILON:
        raise DegenerateGeometryError("camera has not moved away from the World origin")
    A, B, C = quadratic_coefficients(pose, measurement.distance, ext)
    b = B / A
    disc = b * b - C / A
    if disc < 0.0:
        raise NoRealSolution(f"discriminant {disc:.3g} < 0 at t={measurement.timestamp}")
    root = math.sqrt(disc)
    # the larger-magnitude root is exact; recover the other from the product C/A
    if b > 0:
        lo = -b - root
        hi = (C / A) / lo if lo != 0.0 else -b + root
    elif b < 0:
        hi = -b + root
        lo = (C / A) / hi if hi != 0.0 else -b - root
    else:
        lo, hi = -root, root
    return ScaleDuplet(measurement.timestamp, min(lo, hi), max(lo, hi), disc)


@dataclass
class SkipCounts:
    unassociated: int = 0
    degenerate: int = 0
    no_real_solution: int = 0

    @property
    def total(self) -> int:
        return self.unassociated + self.degenerate + self.no_real_solution


class DupletSet(NamedTuple):
    duplets: list[ScaleDuplet]
    skipped: SkipCounts


def associate(timestamps: np.ndarray, t: float, tolerance: float) -> int | None:
    """Index of the nearest timestamp within ``tolerance``; ties go to the earlier one."""
    if len(timestamps) == 0:
        return None
    i = int(np.searchsorted(timestamps, t))
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(timestamps):
            dt = abs(timestamps[j] - t)
            if dt <= tolerance and (best is None or dt < best[0]):
                best = (dt, j)
    return None if best is None else best[1]


def accumulate_duplets(
    trajectory: Sequence[tuple[float, Pose]],
    ranges: Sequence[RangeMeasurement],
    ext: RangingExtrinsics,
    tolerance: float = DEFAULT_ASSOCIATION_TOLERANCE,
) -> DupletSet:
    """Solve the scale quadratic for every range that matches a pose in time."""
    times = np.array([t for t, _ in trajectory], dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ValueError("trajectory timestamps must be strictly increasing")
    skipped = SkipCounts()
    duplets = []
    for m in sorted(ranges, key=lambda r: r.timestamp):
        k = associate(times, m.timestamp, tolerance)
        if k is None:
            skipped.unassociated += 1
            continue
        try:
            duplets.append(scale_candidates(trajectory[k][1], m, ext))
        except DegenerateGeometryError:
            skipped.degenerate += 1
        except NoRealSolution:
            skipped.no_real_solution += 1
    if skipped.total:
        log.info(
            "skipped %d ranges (%d unassociated, %d degenerate, %d without real root)",
            skipped.total, skipped.unassociated, skipped.degenerate, skipped.no_real_solution,
        )
    return DupletSet(duplets, skipped)


def mad_filter(values: np.ndarray, threshold: float = 3.0) -> np.ndarray:
    """Drop values further than ``threshold`` robust sigmas from the median."""
    values = np.asarray(values, dtype=float)
    med = np.median(values)
    mad = 1.4826 * np.median(np.abs(values - med))
    if mad == 0.0:
        return values[values == med]
    return values[np.abs(values - med) <= threshold * mad]


def select_scale(
    duplets: Sequence[ScaleDuplet],
    min_samples: int = DEFAULT_MIN_SAMPLES,
    mad_threshold: float | None = None,
) -> ScaleEstimate:
    """Pick the root branch with the smaller sample standard deviation.

    ``mad_threshold`` enables an optional per-branch median-absolute-deviation
    pre-filter; it is off by default.
    """
    if len(duplets) < min_samples:
        raise InsufficientSamplesError(f"{len(duplets)} duplets, need at least {min_samples}")
    minus = np.array([d.alpha_minus for d in duplets])
    plus = np.array([d.alpha_plus for d in duplets])
    if mad_threshold is not None:
        minus = mad_filter(minus, mad_threshold)
        plus = mad_filter(plus, mad_threshold)
        if min(len(minus), len(plus)) < max(min_samples, 2):
            raise InsufficientSamplesError("too few duplets survive the MAD filter")
    stats = {
        "minus": (float(np.mean(minus)), float(np.std(minus, ddof=1)), len(minus)),
        "plus": (float(np.mean(plus)), float(np.std(plus, ddof=1)), len(plus)),
    }
    chosen = "minus" if stats["minus"][1] < stats["plus"][1] else "plus"
    other = "plus" if chosen == "minus" else "minus"
    mean, std, n = stats[chosen]
    rmean, rstd, _ = stats[other]
    top = max(std, rstd)
    ambiguous = top == 0.0 or (rstd - std) / top < AMBIGUITY_RATIO
    if ambiguous:
        log.warning("ambiguous scale selection: branch stds %.6g vs %.6g", std, rstd)
    return ScaleEstimate(mean, std, n, rmean, rstd, chosen, ambiguous)
