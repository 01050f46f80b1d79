"""Trajectory error metrics against ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .formats import Trajectory, fmt
from .scale import associate


@dataclass(frozen=True)
class EvalReport:
    rmse: float  # m
    rmse_xyz: tuple[float, float, float]  # m
    max_error: float  # m
    n_poses: int
    tolerance: float  # s
    aligned: bool = False

    def format(self, precision: int = 17) -> str:
        f = lambda x: fmt(x, precision)  # noqa: E731
        return "\n".join([
            f"poses_compared = {self.n_poses}",
            f"association_tolerance_s = {f(self.tolerance)}",
            f"alignment = {'rigid' if self.aligned else 'none'}",
            f"rmse_m = {f(self.rmse)}",
            f"rmse_x_m = {f(self.rmse_xyz[0])}",
            f"rmse_y_m = {f(self.rmse_xyz[1])}",
            f"rmse_z_m = {f(self.rmse_xyz[2])}",
            f"max_error_m = {f(self.max_error)}",
        ]) + "\n"


def associate_positions(estimate: Trajectory, truth: Trajectory, tolerance: float):
    """Position pairs matched by nearest timestamp within ``tolerance``."""
    est, gt = [], []
    est_pos, gt_pos = estimate.positions, truth.positions
    for i, t in enumerate(estimate.timestamps):
        j = associate(truth.timestamps, float(t), tolerance)
        if j is not None:
            est.append(est_pos[i])
            gt.append(gt_pos[j])
    return np.array(est).reshape(-1, 3), np.array(gt).reshape(-1, 3)


def rigid_alignment(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation ``R`` and translation ``t`` minimizing ``Σ‖R s + t − g‖²`` (Kabsch)."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    H = (source - mu_s).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_t - R @ mu_s


def evaluate_trajectory(
    estimate: Trajectory, truth: Trajectory, tolerance: float = 0.05, align: bool = False
) -> EvalReport:
    """Position RMSE of ``estimate`` against ``truth`` in the shared World frame.

    Raises:
        DataError: fewer than two poses could be associated.
    """
    est, gt = associate_positions(estimate, truth, tolerance)
    if len(est) < 2:
        raise DataError(
            f"only {len(est)} associable pose pair(s) within {tolerance} s; need at least 2"
        )
    if align:
        R, t = rigid_alignment(est, gt)
        est = est @ R.T + t
    d = est - gt
    err = np.linalg.norm(d, axis=1)
    return EvalReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        rmse_xyz=tuple(float(x) for x in np.sqrt(np.mean(d**2, axis=0))),
        max_error=float(err.max()),
        n_poses=len(err),
        tolerance=float(tolerance),
        aligned=align,
    )
