import json

import numpy as np
import pytest
from sklearn.cluster import DBSCAN

from dexgeom.errors import DegenerateAnchors, DimensionMismatch, FormatError, RankDeficientFit
from dexgeom.fixtures import pinch_joints
from dexgeom.geom import NearestIndex, PointCloud, RigidTransform, box_mesh, compose, sphere_mesh
from dexgeom.grasp import (
    DistanceMatrix, extract_contacts, fit_grasp_config, kabsch,
    multilaterate_points, stability_check,
)
from dexgeom.robot import RobotConfig, robot_mesh_at, robot_points_at

from conftest import random_transform
from oracles import gauss_newton_position, oracle_residuals


def sphere_ring(mu_lat=np.radians(30), k=3, r=0.05):
    pts = []
    for i in range(k):
        th = 2 * np.pi * i / k
        n = np.array([np.cos(mu_lat) * np.cos(th), np.cos(mu_lat) * np.sin(th), np.sin(mu_lat)])
        pts.append((r * n, n))
    return pts


ANTIPODAL = [((0.5, 0.0, 0.0), (1.0, 0.0, 0.0)), ((-0.5, 0.0, 0.0), (-1.0, 0.0, 0.0))]


# --- distance matrix ---------------------------------------------------------


def test_distance_matrix_binary_round_trip(rng):
    D = DistanceMatrix(rng.random((7, 5)).astype(np.float32))
    data = D.to_bytes()
    assert data.startswith(b"VMDM1\n7 5\n") and len(data) == len(b"VMDM1\n7 5\n") + 4 * 35
    back = DistanceMatrix.from_bytes(data)
    assert np.array_equal(back.values, D.values)
    with pytest.raises(FormatError):
        DistanceMatrix.from_bytes(data[:-1])
    with pytest.raises(FormatError):
        DistanceMatrix.from_bytes(b"XXXX" + data)


def test_distance_matrix_rejects_negative():
    with pytest.raises(ValueError):
        DistanceMatrix([[0.1, -0.2]])


# --- multilateration ---------------------------------------------------------


def test_noiseless_recovery(rng):
    anchors = rng.normal(size=(200, 3)) * 0.05
    x = rng.normal(size=(100, 3)) * 0.05
    pos, res = multilaterate_points(DistanceMatrix.between(x, anchors), anchors)
    assert np.abs(pos.points - x).max() < 1e-9 and res.max() < 1e-9


def test_tetrahedron_centroid():
    tet = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1.0]])
    d = np.full((1, 4), np.sqrt(3.0))
    pos, _ = multilaterate_points(d, tet)
    np.testing.assert_allclose(pos.points[0], 0.0, atol=1e-12)


def test_noisy_matches_gauss_newton(rng):
    anchors = rng.uniform(-0.05, 0.05, size=(200, 3))
    x = rng.uniform(-0.08, 0.08, size=(100, 3))
    D = DistanceMatrix.between(x, anchors).values + rng.uniform(-1e-3, 1e-3, size=(100, 200))
    pos, _ = multilaterate_points(np.abs(D), anchors)
    oracle = np.array([gauss_newton_position(np.abs(D[i]), anchors, anchors.mean(0) + 0.01) for i in range(100)])
    assert np.linalg.norm(pos.points - x, axis=1).max() < 5e-3
    assert np.linalg.norm(pos.points - oracle, axis=1).max() < 1e-3


def test_degenerate_and_mismatched_anchors():
    planar = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0], [2, 3, 0.0]])
    with pytest.raises(DegenerateAnchors):
        multilaterate_points(np.ones((2, 5)), planar)
    with pytest.raises(DimensionMismatch):
        multilaterate_points(np.ones((2, 4)), planar)


# --- rigid and articulated fit -----------------------------------------------


def test_kabsch_recovers_transform(rng):
    src = rng.normal(size=(50, 3))
    T = random_transform(rng)
    assert kabsch(src, T.apply(src)).allclose(T, 1e-12)


def test_kabsch_handles_reflection_case(rng):
    src = rng.normal(size=(30, 3))
    mirrored = src * [1, 1, -1]
    R = kabsch(src, mirrored).rotation_matrix()
    assert np.linalg.det(R) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def canonical(hand):
    c = robot_points_at(hand, hand.zero_config(), 512, 0)
    return PointCloud(c.points, links=c.links)


def test_fit_round_trip(hand, canonical):
    rng = np.random.default_rng(8)
    for _ in range(3):
        T = random_transform(rng, 0.1)
        q_hat = RobotConfig(T, pinch_joints(hand) + rng.uniform(-0.2, 0.2, hand.n_joints) * 0.5)
        q_hat = q_hat.with_joints(hand.clamp(q_hat.joint_angles))
        placed = robot_points_at(hand, q_hat, 512, 0).points
        res = fit_grasp_config(hand, placed, canonical)
        assert res.wrist_pose.allclose(T, 1e-6)
        assert np.abs(res.config.joint_angles - q_hat.joint_angles).max() < 1e-3


def test_fit_identity(hand, canonical):
    res = fit_grasp_config(hand, canonical.points, canonical)
    assert res.wrist_pose.allclose(RigidTransform.identity(), 1e-9)
    assert np.abs(res.config.joint_angles).max() < 1e-9


def test_fit_with_noise(hand, canonical, rng):
    q_hat = RobotConfig(random_transform(rng, 0.1), pinch_joints(hand))
    placed = robot_points_at(hand, q_hat, 512, 0).points + rng.uniform(-1e-3, 1e-3, size=(512, 3))
    assert fit_grasp_config(hand, placed, canonical).fit_rms <= 2e-3


def test_fit_equivariance(hand, canonical, rng):
    q_hat = RobotConfig(random_transform(rng, 0.1), pinch_joints(hand))
    placed = robot_points_at(hand, q_hat, 512, 0).points
    T = random_transform(rng, 0.2)
    a = fit_grasp_config(hand, placed, canonical)
    b = fit_grasp_config(hand, T.apply(placed), canonical)
    assert b.wrist_pose.allclose(compose(T, a.wrist_pose), 1e-6)


def test_fit_rank_deficient(hand, canonical):
    line = np.outer(np.linspace(0, 1, 512), [1.0, 2.0, 3.0])
    with pytest.raises(RankDeficientFit):
        fit_grasp_config(hand, line, canonical)


def test_grasp_result_regenerates_cloud(hand, canonical, rng):
    q_hat = RobotConfig(random_transform(rng, 0.1), pinch_joints(hand))
    placed = robot_points_at(hand, q_hat, 512, 0).points + rng.uniform(-5e-4, 5e-4, size=(512, 3))
    res = fit_grasp_config(hand, placed, canonical)
    regen = robot_points_at(hand, res.config, 512, 0).points
    rms = np.sqrt(np.mean(np.sum((regen - placed) ** 2, axis=1)))
    assert rms == pytest.approx(res.fit_rms, rel=1e-6)
    json.loads(res.to_json())


# --- contacts -----------------------------------------------------------------


def test_separated_meshes_have_no_contacts():
    assert extract_contacts(sphere_mesh(0.01, center=(1, 0, 0)), box_mesh((0.1, 0.1, 0.1))) == []


def test_sphere_on_cube_face():
    cube = box_mesh((0.1, 0.1, 0.1), divisions=10)
    tip = sphere_mesh(0.01, center=(0.0, 0.0, 0.06))
    contacts = extract_contacts(tip, cube, 0.002)
    assert len(contacts) == 1
    p, n = contacts[0]
    assert p[2] == pytest.approx(0.05)
    np.testing.assert_allclose(n, [0, 0, 1], atol=1e-6)


def test_pinch_gives_two_clusters_like_dbscan(pinch):
    model, q, obj, _ = pinch
    hand = robot_mesh_at(model, q)
    eps = 0.002
    contacts = extract_contacts(hand, obj, eps)
    d, _ = NearestIndex(hand.vertices).query(obj.vertices)
    near = obj.vertices[d < eps]
    labels = DBSCAN(eps=2 * eps, min_samples=1).fit(near).labels_
    assert len(contacts) == 2 == len(set(labels))
    patch = extract_contacts(hand, obj, eps, merge=False)
    assert len(patch) == len(near)


# --- stability ------------------------------------------------------------------


def test_antipodal_cube_resists_everything():
    rep = stability_check(ANTIPODAL, 1.0, 0.5, friction_cone_edges_m=8, center=(0, 0, 0))
    assert rep.success and all(rep.resisted.values())
    assert rep.disturbance_newtons == pytest.approx(0.5)
    assert all(v < 1e-9 for v in oracle_residuals(ANTIPODAL, 1.0, 0.5, 8, (0, 0, 0)).values())


def test_single_frictionless_contact_fails():
    rep = stability_check([((0, 0, -0.05), (0, 0, -1))], 1.0, 0.0, center=(0, 0, 0))
    assert not rep.success and not all(rep.resisted.values())


def test_three_contacts_on_sphere_depend_on_friction():
    assert stability_check(sphere_ring(), 0.2, 0.8, center=(0, 0, 0)).success
    assert not stability_check(sphere_ring(), 0.2, 0.01, center=(0, 0, 0)).success


def test_no_contacts_fail_everywhere():
    rep = stability_check([], 1.0)
    assert not any(rep.resisted.values()) and not rep.success


def test_lp_agrees_with_cone_sampling_oracle():
    fixtures = [(ANTIPODAL, 1.0, 0.5), ([((0, 0, -0.05), (0, 0, -1))], 1.0, 0.0),
                ([((0, 0, -0.05), (0, 0, -1))], 1.0, 0.7),
                (sphere_ring(), 0.2, 0.8), (sphere_ring(), 0.2, 0.01), (sphere_ring(k=4), 0.3, 0.4)]
    rng = np.random.default_rng(17)
    for _ in range(25):
        k = int(rng.integers(1, 5))
        normals = rng.normal(size=(k, 3))
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        fixtures.append(([(0.05 * n, n) for n in normals], 0.5, float(rng.uniform(0.05, 1.5))))
    checked = 0
    for contacts, mass, mu in fixtures:
        rep = stability_check(contacts, mass, mu, center=(0, 0, 0))
        oracle = oracle_residuals(contacts, mass, mu, 8, (0, 0, 0))
        for name, res in oracle.items():
            if 1e-7 < res < 1e-4:
                continue  # numerically on the cone boundary
            assert rep.resisted[name] == (res <= 1e-7), (contacts, mu, name, res)
            checked += 1
    assert checked >= 0.95 * 6 * len(fixtures)


def test_more_friction_never_hurts():
    rng = np.random.default_rng(3)
    for _ in range(5):
        normals = rng.normal(size=(3, 3))
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        contacts = [(0.05 * n, n) for n in normals]
        prev = None
        for mu in np.linspace(0.0, 2.0, 11):
            cur = stability_check(contacts, 0.5, mu, center=(0, 0, 0)).resisted
            if prev is not None:
                assert all(cur[k] or not prev[k] for k in cur)
            prev = cur


def test_report_json():
    rep = stability_check(ANTIPODAL, 2.0, 0.5, disturbance_scale=9.81, center=(0, 0, 0))
    d = json.loads(rep.to_json())
    assert d["success"] and d["disturbance_newtons"] == pytest.approx(0.5 * 2.0 * 9.81)
    assert set(d["resisted"]) == {"+x", "-x", "+y", "-y", "+z", "-z"}
    assert d["notes"]["sim_steps"] == 300 and d["notes"]["displacement_threshold_m"] == 0.03
