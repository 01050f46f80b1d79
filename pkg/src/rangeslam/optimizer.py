"""Levenberg-Marquardt over all free poses and map points.

Each outer iteration linearizes every factor once, builds the block normal
equations (pose blocks, point blocks, pose-point cross blocks) and solves
the Marquardt-damped system, eliminating map points through the Schur
complement. A step is accepted only if the cost strictly decreases;
otherwise the damping grows and the solve is retried with the same
linearization and the same set of active factors.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import NumericalError, RankDeficiencyError
from .geometry import Pose, Rotation, quat_exp, quat_multiply, quat_to_matrix
from .graph import (
    FactorGraph,
    VariableKind,
    huber_weights,
    point_var,
    pose_var,
    range_cost_terms,
    range_terms,
    reprojection_terms,
)

log = logging.getLogger(__name__)


class Termination(str, enum.Enum):
    CONVERGED_COST = "converged-cost"
    CONVERGED_STEP = "converged-step"
    MAX_ITERATIONS = "max-iterations"
    LAMBDA_OVERFLOW = "lambda-overflow"


@dataclass(frozen=True)
class LmConfig:
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    cost_rel_tolerance: float = 1e-8
    step_norm_tolerance: float = 1e-10
    max_lambda: float = 1e10
    linear_solver: str = "schur"  # or "dense"
    # Marquardt diagonal clamp; keeps directions with zero curvature damped
    min_diagonal: float = 1e-6

    def __post_init__(self):
        positive = (
            self.max_iterations, self.initial_lambda, self.lambda_up, self.lambda_down,
            self.cost_rel_tolerance, self.step_norm_tolerance, self.max_lambda, self.min_diagonal,
        )
        if any(not v > 0 for v in positive):
            raise ValueError("LM configuration values must be positive")
        if not self.lambda_up > 1.0 > self.lambda_down:
            raise ValueError("need lambda_up > 1 > lambda_down")
        if self.linear_solver not in ("schur", "dense"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    cost: float
    lambda_: float
    step_norm: float
    accepted: bool


@dataclass
class LmReport:
    iterations: int
    initial_cost: float
    final_cost: float
    termination: Termination
    history: list[IterationRecord] = field(default_factory=list)
    inactive_reprojection: int = 0
    inactive_range: int = 0
    range_loss: str = "l2"
    huber_threshold: float = 3.0

    def accepted_costs(self) -> list[float]:
        return [self.initial_cost] + [h.cost for h in self.history if h.accepted]

    def is_monotone(self) -> bool:
        c = self.accepted_costs()
        return all(b < a for a, b in zip(c, c[1:]))

    def to_log(self) -> str:
        loss = "l2" if self.range_loss == "l2" else f"huber {self.huber_threshold:.17g}"
        lines = [
            "# rangeslam LM log",
            f"# range_loss {loss}",
            f"# initial_cost {self.initial_cost:.17g}",
            f"# final_cost {self.final_cost:.17g}",
            f"# termination {self.termination.value} iterations {self.iterations}",
            "# iter cost lambda step_norm accepted",
        ]
        for h in self.history:
            lines.append(
                f"{h.iteration} {h.cost:.17g} {h.lambda_:.17g} {h.step_norm:.17g} {int(h.accepted)}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class NormalEquations:
    """Block structure of ``J^T J`` and ``J^T r`` over free variables.

    ``pose_blocks`` and ``point_blocks`` are the block-diagonal parts; the
    pose-pose part has no off-diagonal blocks because no factor links two
    poses. ``cross`` holds the pose-point blocks as a (6P, 3L) sparse matrix.
    """

    pose_blocks: np.ndarray
    point_blocks: np.ndarray
    cross: sp.csr_matrix
    pose_rhs: np.ndarray
    point_rhs: np.ndarray
    pose_vars: list = field(default_factory=list)
    point_vars: list = field(default_factory=list)

    @property
    def n_pose_params(self) -> int:
        return 6 * len(self.pose_blocks)

    @property
    def gradient(self) -> np.ndarray:
        """``J^T r``; the gradient of the total cost is twice this."""
        return np.concatenate([self.pose_rhs, self.point_rhs])

    def dense(self) -> np.ndarray:
        P, L = len(self.pose_blocks), len(self.point_blocks)
        H = np.zeros((6 * P + 3 * L, 6 * P + 3 * L))
        for i, b in enumerate(self.pose_blocks):
            H[6 * i:6 * i + 6, 6 * i:6 * i + 6] = b
        for j, b in enumerate(self.point_blocks):
            o = 6 * P + 3 * j
            H[o:o + 3, o:o + 3] = b
        W = self.cross.toarray()
        H[:6 * P, 6 * P:] = W
        H[6 * P:, :6 * P] = W.T
        return H


def _damped_diagonal(diag: np.ndarray, lam: float, min_diagonal: float) -> np.ndarray:
    return lam * np.clip(diag, min_diagonal, 1e32)


def _null_variables(H: np.ndarray, param_vars: list) -> list:
    """Variables carrying weight in the (near) null space of ``H``."""
    w, V = np.linalg.eigh(H)
    tol = 1e-12 * max(1.0, float(np.abs(w).max(initial=0.0)))
    found = []
    for k in np.flatnonzero(w <= tol):
        for i in np.flatnonzero(np.abs(V[:, k]) > 1e-3):
            if param_vars[i] not in found:
                found.append(param_vars[i])
    return found


def _param_vars(pose_vars: list, point_vars: list) -> list:
    return [v for v in pose_vars for _ in range(6)] + [v for v in point_vars for _ in range(3)]


def solve_normal_equations(
    neq: NormalEquations,
    lam: float,
    method: str = "schur",
    min_diagonal: float = 1e-6,
) -> np.ndarray:
    """Solve ``(H + lam * diag(H)) step = -J^T r``.

    Returns the step as one vector: free poses (6 each) then free points
    (3 each).

    Raises:
        RankDeficiencyError: the damped system is singular; lists the
            under-constrained variables.
    """
    P, L = len(neq.pose_blocks), len(neq.point_blocks)
    idx6 = np.arange(6)
    idx3 = np.arange(3)
    Hpp = neq.pose_blocks.copy()
    Hll = neq.point_blocks.copy()
    if lam > 0:
        Hpp[:, idx6, idx6] += _damped_diagonal(Hpp[:, idx6, idx6], lam, min_diagonal)
        Hll[:, idx3, idx3] += _damped_diagonal(Hll[:, idx3, idx3], lam, min_diagonal)

    if method == "dense":
        damped = NormalEquations(Hpp, Hll, neq.cross, neq.pose_rhs, neq.point_rhs)
        H = damped.dense()
        try:
            c = scipy.linalg.cho_factor(H)
        except np.linalg.LinAlgError:
            pv = neq.pose_vars or [pose_var(i) for i in range(P)]
            lv = neq.point_vars or [point_var(i) for i in range(L)]
            names = _null_variables(H, _param_vars(pv, lv))
            raise RankDeficiencyError("singular normal equations", names) from None
        return scipy.linalg.cho_solve(c, -neq.gradient)
    if method != "schur":
        raise ValueError(f"unknown method {method!r}")

    if L:
        # eigvalsh is batched and tells singular 3x3 blocks apart reliably
        ev = np.linalg.eigvalsh(Hll)
        bad = np.flatnonzero(ev[:, 0] <= 1e-12 * np.maximum(1.0, ev[:, -1]))
        if len(bad):
            names = [neq.point_vars[i] for i in bad] if neq.point_vars else [point_var(i) for i in bad]
            raise RankDeficiencyError(f"{len(bad)} map points are under-constrained", names)
        Hll_inv = np.linalg.inv(Hll)
        V_inv = sp.bsr_matrix((Hll_inv, np.arange(L), np.arange(L + 1)), shape=(3 * L, 3 * L)).tocsr()
        WV = neq.cross @ V_inv
        S = -(WV @ neq.cross.T).toarray()
        rhs = -neq.pose_rhs + WV @ neq.point_rhs
    else:
        S = np.zeros((6 * P, 6 * P))
        rhs = -neq.pose_rhs.copy()
    for i in range(P):
        S[6 * i:6 * i + 6, 6 * i:6 * i + 6] += Hpp[i]

    if P:
        try:
            c = scipy.linalg.cho_factor(S)
        except np.linalg.LinAlgError:
            names = neq.pose_vars or [pose_var(i) for i in range(P)]
            raise RankDeficiencyError(
                "reduced camera system is singular", _null_variables(S, _param_vars(names, []))
            ) from None
        dp = scipy.linalg.cho_solve(c, rhs)
    else:
        dp = np.zeros(0)
    if L:
        dl = V_inv @ (-neq.point_rhs - neq.cross.T @ dp)
    else:
        dl = np.zeros(0)
    return np.concatenate([dp, dl])


class _Problem:
    """Optimizer-side view of a graph: free-variable indexing and state arrays."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        P, L = graph.n_poses, graph.n_points
        fixed_p = {v.index for v in graph.fixed if v.kind is VariableKind.POSE}
        fixed_l = {v.index for v in graph.fixed if v.kind is VariableKind.POINT}
        self.free_poses = np.array([i for i in range(P) if i not in fixed_p], dtype=np.intp)
        self.free_points = np.array([i for i in range(L) if i not in fixed_l], dtype=np.intp)
        self.pose_col = np.full(P, -1, dtype=np.intp)
        self.pose_col[self.free_poses] = np.arange(len(self.free_poses))
        self.point_col = np.full(L, -1, dtype=np.intp)
        self.point_col[self.free_points] = np.arange(len(self.free_points))

    def initial_state(self):
        g = self.graph
        q = np.array([p.rotation.quat for p in g.poses], dtype=float).reshape(-1, 4)
        t = np.array([p.translation for p in g.poses], dtype=float).reshape(-1, 3)
        return q, t, g.points.copy()

    def retract(self, state, step):
        q, t, X = state
        nP = len(self.free_poses)
        dp = step[:6 * nP].reshape(-1, 6)
        dl = step[6 * nP:].reshape(-1, 3)
        q2, t2, X2 = q.copy(), t.copy(), X.copy()
        if nP:
            qn = quat_multiply(q[self.free_poses], quat_exp(dp[:, :3]))
            q2[self.free_poses] = qn / np.linalg.norm(qn, axis=1, keepdims=True)
            t2[self.free_poses] = t[self.free_poses] + dp[:, 3:]
        if len(self.free_points):
            X2[self.free_points] = X[self.free_points] + dl
        return q2, t2, X2

    def terms(self, state, jacobians=True):
        q, t, X = state
        R = quat_to_matrix(q) if len(q) else np.zeros((0, 3, 3))
        rp = reprojection_terms(self.graph, R, t, X, jacobians)
        rg = range_terms(self.graph, R, t, jacobians)
        return rp, rg

    def cost(self, rp, rg, rp_active, rg_active) -> float:
        if np.any(rp_active & ~rp.active) or np.any(rg_active & ~rg.active):
            return np.inf
        c = np.sum(rp.residuals[rp_active] ** 2) + np.sum(range_cost_terms(self.graph, rg.residuals[rg_active]))
        return float(c)

    def check_finite(self, rp, rg):
        bad = np.flatnonzero(~np.all(np.isfinite(rp.residuals), axis=1))
        if len(bad):
            f = self.graph.reprojection_factors[bad[0]]
            raise NumericalError(
                f"non-finite residual in re-projection factor #{bad[0]} ({f.pose_id}, {f.point_id})"
            )
        bad = np.flatnonzero(~np.isfinite(rg.residuals))
        if len(bad):
            f = self.graph.range_factors[bad[0]]
            raise NumericalError(f"non-finite residual in range factor #{bad[0]} ({f.pose_id})")

    def normal_equations(self, rp, rg) -> NormalEquations:
        g = self.graph
        a = g.arrays
        nP, nL = len(self.free_poses), len(self.free_points)
        Hpp = np.zeros((nP, 6, 6))
        Hll = np.zeros((nL, 3, 3))
        bp = np.zeros((nP, 6))
        bl = np.zeros((nL, 3))

        pc = self.pose_col[a.rp_pose]
        lc = self.point_col[a.rp_point]
        mp = rp.active & (pc >= 0)
        ml = rp.active & (lc >= 0)
        Jp, Jl, r = rp.pose_jac, rp.point_jac, rp.residuals
        np.add.at(Hpp, pc[mp], np.einsum("mki,mkj->mij", Jp[mp], Jp[mp]))
        np.add.at(bp, pc[mp], np.einsum("mki,mk->mi", Jp[mp], r[mp]))
        np.add.at(Hll, lc[ml], np.einsum("mki,mkj->mij", Jl[ml], Jl[ml]))
        np.add.at(bl, lc[ml], np.einsum("mki,mk->mi", Jl[ml], r[ml]))
        both = mp & ml
        blocks = np.einsum("mki,mkj->mij", Jp[both], Jl[both])
        rows = (6 * pc[both])[:, None, None] + np.arange(6)[None, :, None]
        cols = (3 * lc[both])[:, None, None] + np.arange(3)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        cross = sp.coo_matrix(
            (blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(6 * nP, 3 * nL)
        ).tocsr()

        rc = self.pose_col[a.rg_pose]
        m = rg.active & (rc >= 0)
        e = rg.residuals[m]
        J = rg.pose_jac[m]
        if g.range_loss == "huber":
            sw = np.sqrt(huber_weights(e, g.huber_threshold))
            e = e * sw
            J = J * sw[:, None]
        np.add.at(Hpp, rc[m], np.einsum("ni,nj->nij", J, J))
        np.add.at(bp, rc[m], J * e[:, None])

        return NormalEquations(
            Hpp, Hll, cross, bp.ravel(), bl.ravel(),
            [pose_var(i) for i in self.free_poses], [point_var(i) for i in self.free_points],
        )

    def to_graph(self, state) -> FactorGraph:
        q, t, X = state
        g = self.graph
        poses = list(g.poses)
        for i in self.free_poses:
            poses[i] = Pose(Rotation(q[i]), t[i])
        points = g.points.copy()
        points[self.free_points] = X[self.free_points]
        return g.with_state(poses, points)


def build_normal_equations(graph: FactorGraph) -> NormalEquations:
    """Linearize ``graph`` at its current state."""
    prob = _Problem(graph)
    rp, rg = prob.terms(prob.initial_state())
    return prob.normal_equations(rp, rg)


def optimize(graph: FactorGraph, config: LmConfig | None = None) -> tuple[FactorGraph, LmReport]:
    """Minimize the total whitened cost of ``graph``.

    Raises:
        GraphError: structural invariants do not hold.
        NumericalError: a residual became non-finite, or the damped system
            is singular.
    """
    config = config or LmConfig()
    graph.validate()
    prob = _Problem(graph)
    state = prob.initial_state()
    rp, rg = prob.terms(state)
    prob.check_finite(rp, rg)
    cost = prob.cost(rp, rg, rp.active, rg.active)
    initial_cost = cost
    lam = config.initial_lambda
    history: list[IterationRecord] = []
    iterations = 0
    termination = Termination.CONVERGED_COST if cost == 0.0 else None

    while termination is None:
        if iterations >= config.max_iterations:
            termination = Termination.MAX_ITERATIONS
            break
        neq = prob.normal_equations(rp, rg)
        rp_active, rg_active = rp.active, rg.active
        while True:
            step = solve_normal_equations(neq, lam, config.linear_solver, config.min_diagonal)
            step_norm = float(np.linalg.norm(step))
            if step_norm < config.step_norm_tolerance:
                termination = Termination.CONVERGED_STEP
                break
            trial = prob.retract(state, step)
            trp, trg = prob.terms(trial, jacobians=False)
            prob.check_finite(trp, trg)
            new_cost = prob.cost(trp, trg, rp_active, rg_active)
            accepted = new_cost < cost
            history.append(IterationRecord(iterations + 1, new_cost, lam, step_norm, accepted))
            log.debug("iter %d cost %.6g lambda %.3g step %.3g %s",
                      iterations + 1, new_cost, lam, step_norm, "ok" if accepted else "rejected")
            if accepted:
                rel = (cost - new_cost) / cost
                state, cost = trial, new_cost
                iterations += 1
                lam *= config.lambda_down
                if rel < config.cost_rel_tolerance or cost == 0.0:
                    termination = Termination.CONVERGED_COST
                break
            lam *= config.lambda_up
            if lam > config.max_lambda:
                termination = Termination.LAMBDA_OVERFLOW
                break
        if termination is None:
            rp, rg = prob.terms(state)
            prob.check_finite(rp, rg)
            cost = prob.cost(rp, rg, rp.active, rg.active)

    rp_final, rg_final = prob.terms(state, jacobians=False)
    report = LmReport(
        iterations, initial_cost, cost, termination, history,
        int((~rp_final.active).sum()), int((~rg_final.active).sum()),
        graph.range_loss, graph.huber_threshold,
    )
    if not report.is_monotone():
        # only possible when factor activation changed between iterations
        log.warning("accepted costs are not strictly decreasing")
    log.info("LM %s after %d iterations: cost %.6g -> %.6g",
             termination.value, iterations, initial_cost, cost)
    return prob.to_graph(state), report
