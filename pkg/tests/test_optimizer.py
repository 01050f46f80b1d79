import numpy as np
import pytest
import scipy.sparse as sp

from conftest import random_pose
from rangeslam.errors import NumericalError, RankDeficiencyError
from rangeslam.geometry import CameraIntrinsics, Pose, Rotation, retract
from rangeslam.graph import (
    FactorGraph,
    RangeFactor,
    apply_scale,
    point_var,
    pose_var,
    total_cost,
)
from rangeslam.optimizer import (
    LmConfig,
    NormalEquations,
    Termination,
    build_normal_equations,
    optimize,
    solve_normal_equations,
)
from rangeslam.pipeline import build_graph, run_pipeline
from rangeslam.ranging import RangingExtrinsics
from rangeslam.sim import NoiseConfig, WorldConfig, make_scenario


def true_graph(sc):
    w = sc.world
    return build_graph(w.poses, w.timestamps, w.points, sc.observations, sc.ranges, w.intrinsics, w.extrinsics)


def perturbed(graph, rng, trans=0.05, rot=0.005, pts=0.0):
    poses = [graph.poses[0]] + [
        retract(p, np.r_[rng.normal(0, rot, 3), rng.normal(0, trans, 3)]) for p in graph.poses[1:]
    ]
    return graph.with_state(poses, graph.points + rng.normal(0, pts, graph.points.shape))


def three_sphere_intersection(c, r):
    """Both intersection points of three spheres (closed form)."""
    ex = (c[1] - c[0]) / np.linalg.norm(c[1] - c[0])
    i = ex @ (c[2] - c[0])
    ey = c[2] - c[0] - i * ex
    ey /= np.linalg.norm(ey)
    ez = np.cross(ex, ey)
    d = np.linalg.norm(c[1] - c[0])
    j = ey @ (c[2] - c[0])
    x = (r[0] ** 2 - r[1] ** 2 + d**2) / (2 * d)
    y = (r[0] ** 2 - r[2] ** 2 + i**2 + j**2) / (2 * j) - i / j * x
    z = np.sqrt(r[0] ** 2 - x**2 - y**2)
    base = c[0] + x * ex + y * ey
    return base + z * ez, base - z * ez


@pytest.fixture(scope="module")
def medium_scenario():
    cfg = WorldConfig(trajectory="straight", n_keyframes=10, n_map_points=50, length=10, seed=21)
    return make_scenario(cfg, NoiseConfig())


class TestConfig:
    def test_defaults(self):
        c = LmConfig()
        assert (c.max_iterations, c.initial_lambda, c.lambda_up, c.lambda_down) == (100, 1e-4, 10.0, 0.5)
        assert (c.cost_rel_tolerance, c.step_norm_tolerance, c.max_lambda) == (1e-8, 1e-10, 1e10)

    @pytest.mark.parametrize("kw", [{"lambda_up": 0.5}, {"lambda_down": 2.0}, {"initial_lambda": 0.0},
                                    {"max_iterations": 0}, {"linear_solver": "cg"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LmConfig(**kw)


class TestSolve:
    def _identity(self, P, L, g):
        return NormalEquations(
            np.tile(np.eye(6), (P, 1, 1)), np.tile(np.eye(3), (L, 1, 1)),
            sp.csr_matrix((6 * P, 3 * L)), g[:6 * P], g[6 * P:],
        )

    @pytest.mark.parametrize("method", ["schur", "dense"])
    def test_identity(self, method):
        g = np.random.default_rng(0).standard_normal(6 * 2 + 3 * 3)
        step = solve_normal_equations(self._identity(2, 3, g), 0.0, method)
        assert np.allclose(step, -g, rtol=1e-15)

    def test_large_lambda(self, medium_scenario):
        g = apply_scale(true_graph(medium_scenario), 1.1)
        neq = build_normal_equations(g)
        norms = [np.linalg.norm(solve_normal_equations(neq, lam)) for lam in (1e0, 1e4, 1e8, 1e12)]
        assert all(b < a for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 1e-9 * norms[0]

    def test_schur_matches_dense(self, medium_scenario):
        g = perturbed(apply_scale(true_graph(medium_scenario), 1.05), np.random.default_rng(1), pts=0.05)
        neq = build_normal_equations(g)
        assert len(neq.pose_blocks) == 9 and len(neq.point_blocks) == 50
        for lam in (0.0, 1e-4, 1.0):
            a = solve_normal_equations(neq, lam, "schur")
            b = solve_normal_equations(neq, lam, "dense")
            assert np.linalg.norm(a - b) <= 1e-9 * np.linalg.norm(b)
            # residual of the damped system
            H = neq.dense()
            Hd = H + lam * np.diag(np.clip(np.diag(H), 1e-6, None))
            assert np.linalg.norm(Hd @ a + neq.gradient) <= 1e-9 * np.linalg.norm(neq.gradient)

    def test_rank_deficient_point(self):
        P, L = 1, 2
        neq = self._identity(P, L, np.ones(12))
        neq.point_blocks[1] = np.diag([1.0, 1.0, 0.0])
        with pytest.raises(RankDeficiencyError) as e:
            solve_normal_equations(neq, 0.0)
        assert e.value.variables == [point_var(1)]

    def test_rank_deficient_pose_dense(self):
        neq = self._identity(2, 0, np.ones(12))
        neq.pose_blocks[1][2, 2] = 0.0
        with pytest.raises(RankDeficiencyError) as e:
            solve_normal_equations(neq, 0.0, "dense")
        assert pose_var(1) in e.value.variables and pose_var(0) not in e.value.variables

    def test_gradient_matches_finite_differences(self, medium_scenario):
        g = perturbed(apply_scale(true_graph(medium_scenario), 1.05), np.random.default_rng(2), pts=0.05)
        neq = build_normal_equations(g)
        grad = 2 * neq.gradient  # d(total cost)/d(delta)
        h = 1e-6
        rng = np.random.default_rng(3)
        for k in rng.choice(len(grad), 30, replace=False):
            def cost_at(s):
                step = np.zeros(len(grad))
                step[k] = s
                P = len(neq.pose_blocks)
                poses = [g.poses[0]] + [retract(p, step[6 * i:6 * i + 6]) for i, p in enumerate(g.poses[1:])]
                return total_cost(g.with_state(poses, g.points + step[6 * P:].reshape(-1, 3)))
            num = (cost_at(h) - cost_at(-h)) / (2 * h)
            assert num == pytest.approx(grad[k], rel=1e-4, abs=1e-4 * np.max(np.abs(grad)))


class TestOptimize:
    def test_zero_residual(self, noiseless_scenario):
        g = true_graph(noiseless_scenario)
        g = g.with_state(g.poses, g.points)
        exact = FactorGraph(g.poses, g.points, g.intrinsics, g.extrinsics,
                            g.reprojection_factors, [], g.fixed)
        # build an exactly consistent graph: observations equal the projections
        from rangeslam.graph import ReprojectionFactor, reprojection_residual
        factors = []
        for f in exact.reprojection_factors:
            r = reprojection_residual(exact, f)
            factors.append(ReprojectionFactor(f.pose_id, f.point_id, f.observed_pixel + r.residual * f.sigma_px))
        exact = FactorGraph(g.poses, g.points, g.intrinsics, g.extrinsics, factors, [], g.fixed)
        if total_cost(exact) != 0.0:
            pytest.skip("rounding left a nonzero residual")
        out, rep = optimize(exact)
        assert rep.iterations == 0 and rep.final_cost == 0.0
        assert rep.termination is Termination.CONVERGED_COST

    def test_recovers_perturbed_noiseless(self, noiseless_scenario):
        g = true_graph(noiseless_scenario)
        start = perturbed(g, np.random.default_rng(4))
        out, rep = optimize(start)
        assert rep.final_cost < 1e-10
        err = max(np.linalg.norm(a.translation - b.translation) for a, b in zip(out.poses, g.poses))
        assert err < 1e-6
        assert rep.is_monotone()

    def test_gauge_bit_identical(self, noisy_scenario):
        g = perturbed(true_graph(noisy_scenario), np.random.default_rng(5))
        out, _ = optimize(g)
        assert out.poses[0] is g.poses[0]
        assert not np.array_equal(out.poses[1].translation, g.poses[1].translation)

    def test_deterministic(self, noisy_scenario):
        g = perturbed(true_graph(noisy_scenario), np.random.default_rng(6))
        _, a = optimize(g)
        _, b = optimize(g)
        assert a.to_log() == b.to_log()

    def test_monotone_and_report(self, noisy_scenario):
        g = perturbed(true_graph(noisy_scenario), np.random.default_rng(7), trans=0.2)
        _, rep = optimize(g)
        assert rep.is_monotone()
        assert rep.final_cost <= rep.initial_cost
        log = rep.to_log().splitlines()
        assert log[1] == "# range_loss l2"
        assert "# iter cost lambda step_norm accepted" in log
        assert len([x for x in log if not x.startswith("#")]) == len(rep.history)

    def test_dense_solver_same_result(self, medium_scenario):
        g = perturbed(apply_scale(true_graph(medium_scenario), 1.02), np.random.default_rng(8))
        a, ra = optimize(g, LmConfig(linear_solver="schur"))
        b, rb = optimize(g, LmConfig(linear_solver="dense"))
        assert ra.final_cost == pytest.approx(rb.final_cost, rel=1e-8)
        assert np.allclose(a.points, b.points, atol=1e-6)

    def test_max_iterations(self, noisy_scenario):
        g = perturbed(true_graph(noisy_scenario), np.random.default_rng(9), trans=0.3)
        _, rep = optimize(g, LmConfig(max_iterations=1))
        assert rep.termination is Termination.MAX_ITERATIONS and rep.iterations == 1

    def test_lambda_overflow(self, medium_scenario):
        g = perturbed(apply_scale(true_graph(medium_scenario), 1.02), np.random.default_rng(10))
        tight = LmConfig(cost_rel_tolerance=1e-300, step_norm_tolerance=1e-300, max_lambda=1e-2)
        _, rep = optimize(g, tight)
        assert rep.termination is Termination.LAMBDA_OVERFLOW
        assert rep.is_monotone()

    def test_non_finite_names_factor(self, noisy_scenario):
        g = true_graph(noisy_scenario)
        pts = g.points.copy()
        pts[3] = np.nan
        with pytest.raises(NumericalError, match="point"):
            optimize(g.with_state(g.poses, pts))

    def test_three_anchor_toy(self, K):
        anchors = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 1.0], [2.0, 9.0, -1.0]])
        truth = np.array([4.0, 3.0, 6.0])
        r = np.linalg.norm(anchors - truth, axis=1)
        ext = RangingExtrinsics(np.zeros(3), np.zeros(3))
        factors = [RangeFactor(pose_var(1), d, 0.1, anchor=a) for a, d in zip(anchors, r)]
        start = Pose(Rotation.identity(), truth + [0.7, -0.5, 0.4])
        g = FactorGraph([Pose.identity(), start], np.zeros((0, 3)), K, ext,
                        range_factors=factors, fixed={pose_var(0)})
        out, rep = optimize(g)
        sols = three_sphere_intersection(anchors, r)
        closest = min(sols, key=lambda s: np.linalg.norm(s - start.translation))
        assert np.linalg.norm(out.poses[1].translation - closest) < 1e-9
        assert rep.is_monotone()

    def test_robust_range_downweights_outliers(self):
        cfg = WorldConfig(n_keyframes=30, n_map_points=120, length=12, width=6, seed=5)
        noise = NoiseConfig(outlier_probability=0.2, outlier_magnitude=3.0)
        sc = make_scenario(cfg, noise)
        l2 = run_pipeline(sc)
        hub = run_pipeline(sc, robust_range=True)
        assert hub.report.to_log().splitlines()[1].startswith("# range_loss huber")

        def rmse(graph):
            return np.sqrt(np.mean([np.sum((a.translation - b.translation) ** 2)
                                    for a, b in zip(graph.poses, sc.world.poses)]))
        assert rmse(hub.refined) < rmse(l2.refined)
