import numpy as np
import pytest

from conftest import random_pose
from rangeslam.errors import DataError, GraphError
from rangeslam.geometry import CameraIntrinsics, Pose, Rotation, project, retract
from rangeslam.graph import (
    FactorGraph,
    RangeFactor,
    ReprojectionFactor,
    VariableKind,
    apply_scale,
    cost_breakdown,
    dump_graph,
    load_graph,
    point_var,
    pose_var,
    range_residual,
    reprojection_residual,
    total_cost,
)
from rangeslam.pipeline import build_graph
from rangeslam.ranging import RangingExtrinsics, predict_range
from rangeslam.scale import accumulate_duplets, select_scale

H = 1e-6
RTOL = 1e-5


def true_graph(sc):
    w = sc.world
    return build_graph(w.poses, w.timestamps, w.points, sc.observations, sc.ranges, w.intrinsics, w.extrinsics)


def vo_graph(sc):
    w = sc.world
    vo = sc.vo_map
    return build_graph(sc.vo_poses, w.timestamps, vo.points, vo.observations, sc.ranges, w.intrinsics, w.extrinsics)


def _single_reprojection(rng, K, sigma=1.0):
    pose = random_pose(rng, 2.0)
    X = pose.apply(np.array([*rng.uniform(-1, 1, 2), rng.uniform(2, 10)]))
    obs = project(K, pose, X) + rng.normal(0, 2, 2)
    f = ReprojectionFactor(pose_var(0), point_var(0), obs, sigma)
    g = FactorGraph([pose], X[None], K, RangingExtrinsics(np.zeros(3), np.zeros(3)), [f])
    return g, f


def _single_range(rng, K, lever=None, sigma=0.1):
    pose = random_pose(rng, 10.0)
    lever = rng.normal(0, 0.5, 3) if lever is None else lever
    ext = RangingExtrinsics(rng.normal(0, 15, 3), lever)
    d = predict_range(pose, 1.0, ext) + rng.normal(0, 0.3)
    f = RangeFactor(pose_var(0), max(d, 0.0), sigma)
    return FactorGraph([pose], np.zeros((0, 3)), K, ext, range_factors=[f]), f


def _assert_close(analytic, numeric):
    scale = max(1.0, float(np.max(np.abs(analytic))))
    assert np.max(np.abs(analytic - numeric)) <= RTOL * scale


class TestVariables:
    def test_ids(self):
        assert pose_var(3).kind is VariableKind.POSE
        assert point_var(3) != pose_var(3)
        assert pose_var(1) < pose_var(2) < point_var(0)
        assert len({pose_var(1), pose_var(1)}) == 1


class TestReprojection:
    def test_exact_observation_is_zero(self, rng, K):
        g, f = _single_reprojection(rng, K)
        exact = project(K, g.poses[0], g.points[0])
        out = reprojection_residual(g, ReprojectionFactor(pose_var(0), point_var(0), exact))
        assert np.allclose(out.residual, 0.0, atol=1e-12) and out.active

    def test_whitening(self, rng, K):
        g, f = _single_reprojection(rng, K)
        r1 = reprojection_residual(g, f).residual
        r2 = reprojection_residual(g, ReprojectionFactor(f.pose_id, f.point_id, f.observed_pixel, 2.0)).residual
        assert np.allclose(r2, r1 / 2, rtol=1e-15)

    def test_jacobians_finite_differences(self, K):
        rng = np.random.default_rng(100)
        for _ in range(100):
            g, f = _single_reprojection(rng, K, sigma=rng.uniform(0.5, 2))
            out = reprojection_residual(g, f)
            pose, X = g.poses[0], g.points[0]
            num_pose = np.empty((2, 6))
            for k in range(6):
                e = np.zeros(6)
                e[k] = H
                plus = reprojection_residual(g.with_state([retract(pose, e)], g.points), f).residual
                minus = reprojection_residual(g.with_state([retract(pose, -e)], g.points), f).residual
                num_pose[:, k] = (plus - minus) / (2 * H)
            num_point = np.empty((2, 3))
            for k in range(3):
                e = np.zeros(3)
                e[k] = H
                plus = reprojection_residual(g.with_state([pose], (X + e)[None]), f).residual
                minus = reprojection_residual(g.with_state([pose], (X - e)[None]), f).residual
                num_point[:, k] = (plus - minus) / (2 * H)
            _assert_close(out.pose_jacobian, num_pose)
            _assert_close(out.point_jacobian, num_point)

    def test_behind_camera_inactive(self, K):
        f = ReprojectionFactor(pose_var(0), point_var(0), [320, 240])
        g = FactorGraph([Pose.identity()], [[0, 0, -2.0]], K, RangingExtrinsics(np.zeros(3), np.zeros(3)), [f])
        out = reprojection_residual(g, f)
        assert not out.active
        assert np.all(out.residual == 0) and np.all(out.pose_jacobian == 0) and np.all(out.point_jacobian == 0)
        cb = cost_breakdown(g)
        assert cb.total == 0.0 and cb.inactive_reprojection == 1


class TestRange:
    def test_exact_distance_is_zero(self, rng, K):
        g, f = _single_range(rng, K)
        d = predict_range(g.poses[0], 1.0, g.extrinsics)
        out = range_residual(g, RangeFactor(pose_var(0), d))
        assert abs(out.residual[0]) < 1e-12

    def test_no_lever_zero_rotation_block(self, rng, K):
        g, f = _single_range(rng, K, lever=np.zeros(3))
        assert np.all(range_residual(g, f).pose_jacobian[0, :3] == 0.0)

    def test_translation_block_is_unit_vector(self, rng, K):
        g, f = _single_range(rng, K)
        pose = g.poses[0]
        u = pose.translation + pose.rotation.apply(g.extrinsics.tag_lever_arm) - g.extrinsics.anchor_position
        J = range_residual(g, f).pose_jacobian[0]
        assert np.allclose(J[3:], u / np.linalg.norm(u) / f.sigma_m, rtol=1e-14)

    def test_jacobian_finite_differences(self, K):
        rng = np.random.default_rng(200)
        for _ in range(100):
            g, f = _single_range(rng, K, sigma=rng.uniform(0.05, 0.5))
            J = range_residual(g, f).pose_jacobian
            num = np.empty((1, 6))
            for k in range(6):
                e = np.zeros(6)
                e[k] = H
                plus = range_residual(g.with_state([retract(g.poses[0], e)], g.points), f).residual
                minus = range_residual(g.with_state([retract(g.poses[0], -e)], g.points), f).residual
                num[:, k] = (plus - minus) / (2 * H)
            _assert_close(J, num)

    def test_near_anchor_inactive(self, K):
        ext = RangingExtrinsics([1, 2, 3], [0, 0, 0])
        f = RangeFactor(pose_var(0), 1.0)
        g = FactorGraph([Pose(Rotation.identity(), [1, 2, 3])], np.zeros((0, 3)), K, ext, range_factors=[f])
        out = range_residual(g, f)
        assert not out.active and out.residual[0] == 0 and np.all(out.pose_jacobian == 0)
        assert cost_breakdown(g).inactive_range == 1

    def test_anchor_override(self, K):
        ext = RangingExtrinsics([100, 0, 0], [0, 0, 0])
        f = RangeFactor(pose_var(0), 5.0, anchor=[3, 4, 0])
        g = FactorGraph([Pose.identity()], np.zeros((0, 3)), K, ext, range_factors=[f])
        assert range_residual(g, f).residual[0] == 0.0


class TestCost:
    def test_exact_graph_zero(self, noiseless_scenario):
        assert total_cost(true_graph(noiseless_scenario)) < 1e-18

    def test_unit_whitened_range(self, K):
        ext = RangingExtrinsics([3, 4, 0], [0, 0, 0])
        g = FactorGraph([Pose.identity()], np.zeros((0, 3)), K, ext, range_factors=[RangeFactor(pose_var(0), 5.1, 0.1)])
        assert total_cost(g) == pytest.approx(1.0, rel=1e-12)

    def test_brute_force(self, noisy_scenario):
        g = vo_graph(noisy_scenario)
        g = apply_scale(g, 4.0)
        expected = 0.0
        for f in g.reprojection_factors:
            r = reprojection_residual(g, f)
            expected += float(r.residual @ r.residual) if r.active else 0.0
        for f in g.range_factors:
            pose = g.poses[f.pose_id.index]
            rho = predict_range(pose, 1.0, g.extrinsics)
            expected += ((rho - f.measured_distance) / f.sigma_m) ** 2
        assert total_cost(g) == pytest.approx(expected, rel=1e-12)

    def test_order_invariant(self, noisy_scenario):
        g = vo_graph(noisy_scenario)
        rng = np.random.default_rng(0)
        rp = [g.reprojection_factors[i] for i in rng.permutation(len(g.reprojection_factors))]
        rg = [g.range_factors[i] for i in rng.permutation(len(g.range_factors))]
        shuffled = FactorGraph(g.poses, g.points, g.intrinsics, g.extrinsics, rp, rg, g.fixed)
        assert total_cost(shuffled) == pytest.approx(total_cost(g), rel=1e-12)

    def test_huber(self, K):
        ext = RangingExtrinsics([3, 4, 0], [0, 0, 0])
        g = FactorGraph([Pose.identity()], np.zeros((0, 3)), K, ext,
                        range_factors=[RangeFactor(pose_var(0), 5.5, 0.1), RangeFactor(pose_var(0), 5.2, 0.1)])
        assert total_cost(g) == pytest.approx(25 + 4)
        hub = g.with_loss("huber", 3.0)
        assert total_cost(hub) == pytest.approx(2 * 3 * 5 - 9 + 4)


class TestApplyScale:
    def test_identity(self, noisy_scenario):
        g = vo_graph(noisy_scenario)
        g1 = apply_scale(g, 1.0)
        assert all(np.array_equal(a.translation, b.translation) for a, b in zip(g.poses, g1.poses))
        assert np.array_equal(g.points, g1.points)

    def test_zero(self, noisy_scenario):
        with pytest.raises(DataError):
            apply_scale(vo_graph(noisy_scenario), 0.0)

    def test_leaves_rotations_and_parameters(self, noisy_scenario):
        g = vo_graph(noisy_scenario)
        g2 = apply_scale(g, 2.5)
        assert all(a.rotation is b.rotation for a, b in zip(g.poses, g2.poses))
        assert g2.extrinsics is g.extrinsics and g2.range_factors is g.range_factors

    def test_scale_ambiguity_invariant(self, noiseless_scenario):
        sc = noiseless_scenario
        g = vo_graph(sc)
        base = cost_breakdown(g).reprojection
        range_costs = {}
        for alpha in (0.5, 1.0, 3.0, 4.0, 4.6, 5.0, 9.0):
            cb = cost_breakdown(apply_scale(g, alpha))
            assert cb.reprojection == pytest.approx(base, rel=1e-9, abs=1e-18)
            range_costs[alpha] = cb.range
        assert range_costs[4.6] < 1e-16
        assert min(range_costs, key=range_costs.get) == 4.6

    def test_noiseless_ranges_zero_after_selected_scale(self, noiseless_scenario):
        sc = noiseless_scenario
        ds = accumulate_duplets(list(zip(sc.timestamps, sc.vo_poses)), sc.ranges, sc.world.extrinsics)
        g = apply_scale(vo_graph(sc), select_scale(ds.duplets).alpha)
        for f in g.range_factors:
            assert abs(range_residual(g, f).residual[0]) * f.sigma_m < 1e-8


class TestValidate:
    def _graph(self, K, **kw):
        ext = RangingExtrinsics(np.zeros(3), np.zeros(3))
        poses = [Pose.identity(), Pose(Rotation.identity(), [1, 0, 0])]
        pts = np.array([[0, 0, 5.0]])
        f = [ReprojectionFactor(pose_var(i), point_var(0), project(K, poses[i], pts[0])) for i in range(2)]
        args = dict(reprojection_factors=f, fixed={pose_var(0)})
        args.update(kw)
        return FactorGraph(poses, pts, K, ext, **args)

    def test_valid(self, K):
        self._graph(K).validate()

    def test_no_gauge(self, K):
        with pytest.raises(GraphError, match="gauge"):
            self._graph(K, fixed=set()).validate()

    def test_missing_variable(self, K):
        g = self._graph(K)
        bad = g.reprojection_factors + [ReprojectionFactor(pose_var(5), point_var(0), [1, 1])]
        with pytest.raises(GraphError, match="missing pose"):
            self._graph(K, reprojection_factors=bad).validate()

    def test_weak_point(self, K):
        g = self._graph(K)
        with pytest.raises(GraphError, match="fewer than 2"):
            self._graph(K, reprojection_factors=g.reprojection_factors[:1]).validate()

    def test_pixel_outside_image(self, K):
        g = self._graph(K)
        bad = g.reprojection_factors + [ReprojectionFactor(pose_var(1), point_var(0), [-5, 10])]
        with pytest.raises(GraphError, match="outside the image"):
            self._graph(K, reprojection_factors=bad).validate()

    def test_lists_every_problem(self, K):
        g = self._graph(K)
        with pytest.raises(GraphError) as e:
            self._graph(K, reprojection_factors=g.reprojection_factors[:1], fixed=set()).validate()
        assert "gauge" in str(e.value) and "fewer than 2" in str(e.value)

    def test_invalid_factor_values(self):
        with pytest.raises(ValueError):
            RangeFactor(pose_var(0), -1.0)
        with pytest.raises(ValueError):
            ReprojectionFactor(pose_var(0), point_var(0), [0, 0], 0.0)


class TestSnapshot:
    def test_roundtrip_bit_identical(self, noisy_scenario):
        g = apply_scale(vo_graph(noisy_scenario), 4.123456789).with_loss("huber", 2.5)
        text = dump_graph(g)
        back = load_graph(text)
        assert dump_graph(back) == text
        assert total_cost(back) == total_cost(g)
        assert back.fixed == g.fixed and back.range_loss == "huber" and back.huber_threshold == 2.5
        for a, b in zip(g.poses, back.poses):
            assert np.array_equal(a.translation, b.translation)
            assert np.array_equal(a.rotation.matrix, b.rotation.matrix)
        assert np.array_equal(g.points, back.points)

    def test_blocks_present(self, noisy_scenario):
        text = dump_graph(vo_graph(noisy_scenario))
        for block in ("POSES", "POINTS", "REPROJ", "RANGE"):
            assert block in text
