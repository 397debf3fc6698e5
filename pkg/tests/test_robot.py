import warnings

import numpy as np
import pytest

from dexgeom.errors import CyclicKinematics, DimensionMismatch, MalformedXml, MissingLink, NonUnitAxis
from dexgeom.fixtures import hand_urdf, pinch_joints
from dexgeom.geom import RigidTransform, box_mesh, compose
from dexgeom.robot import (
    JointLimitWarning, RobotConfig, forward_kinematics, format_urdf, link_points_world, parse_urdf,
    point_jacobian, robot_mesh_at, robot_points_at,
)

from conftest import random_transform

ONE_JOINT = """<robot name="r">
  <link name="a"/><link name="b"/>
  <joint name="j" type="revolute"><parent link="a"/><child link="b"/>
    <axis xyz="0 0 1"/><limit lower="-1" upper="1"/></joint>
  <transmission name="t"/>
</robot>"""


def _random_q(model, rng):
    lo = np.where(np.isfinite(model.lower_limits()), model.lower_limits(), -np.pi)
    hi = np.where(np.isfinite(model.upper_limits()), model.upper_limits(), np.pi)
    return RobotConfig(random_transform(rng, 0.1), rng.uniform(lo, hi))


def test_minimal_chain():
    m = parse_urdf(ONE_JOINT)
    assert m.n_joints == 1 and m.root == "a"
    assert any("transmission" in w for w in m.warnings)


def test_hand_has_22_dof(hand):
    assert hand.n_joints == 16 and hand.zero_config().dof == 22


@pytest.mark.parametrize("text,err", [
    (ONE_JOINT.replace('parent link="a"', 'parent link="ghost"'), MissingLink),
    ("<robot><link name='a'", MalformedXml),
    (ONE_JOINT.replace('xyz="0 0 1"', 'xyz="0 0 0"'), NonUnitAxis),
    ("""<robot><link name="a"/><link name="b"/>
        <joint name="j1" type="fixed"><parent link="a"/><child link="b"/></joint>
        <joint name="j2" type="fixed"><parent link="b"/><child link="a"/></joint></robot>""", CyclicKinematics),
])
def test_parse_errors(text, err):
    with pytest.raises(err):
        parse_urdf(text)


def test_two_link_planar_fk(two_link):
    q = RobotConfig(RigidTransform.identity(), [np.pi / 2, -np.pi / 2])
    fk = forward_kinematics(two_link, q)
    np.testing.assert_allclose(fk["tip"].translation, [1.0, 1.0, 0.0], atol=1e-12)


def test_zero_config_is_static_composition(hand):
    fk = forward_kinematics(hand, hand.zero_config())
    for j in hand.joints:
        expect = compose(fk[j.parent], j.origin)
        assert fk[j.child].allclose(expect, 1e-12)


def test_fk_equivariance(hand, rng):
    q = _random_q(hand, rng)
    T = random_transform(rng)
    a = forward_kinematics(hand, q.with_wrist(compose(T, q.wrist)))
    b = forward_kinematics(hand, q)
    for name in a:
        assert a[name].allclose(compose(T, b[name]), 1e-9)


def test_wrist_translation_shifts_links(hand, rng):
    q = _random_q(hand, rng)
    t = np.array([0.3, -0.2, 0.1])
    moved = q.with_wrist(RigidTransform(q.wrist.rotation, q.wrist.translation + t))
    a, b = forward_kinematics(hand, moved), forward_kinematics(hand, q)
    for name in a:
        np.testing.assert_allclose(a[name].translation - b[name].translation, t, atol=1e-12)


def test_dimension_mismatch(hand):
    with pytest.raises(DimensionMismatch):
        forward_kinematics(hand, RobotConfig(RigidTransform.identity(), [0.0]))


def test_limit_violation_is_a_warning(two_link):
    m = parse_urdf(ONE_JOINT)
    with pytest.warns(JointLimitWarning):
        forward_kinematics(m, RobotConfig(RigidTransform.identity(), [2.0]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        forward_kinematics(m, RobotConfig(RigidTransform.identity(), [1.0 + 1e-10]))


def test_urdf_round_trip(hand):
    again = parse_urdf(format_urdf(hand))
    assert again.joint_names == hand.joint_names
    q = _random_q(hand, np.random.default_rng(3))
    a, b = forward_kinematics(hand, q), forward_kinematics(again, q)
    for name in a:
        assert a[name].allclose(b[name], 1e-12)
    np.testing.assert_allclose(robot_mesh_at(again, q).vertices, robot_mesh_at(hand, q).vertices, atol=1e-12)


def test_single_cube_link_mesh():
    m = parse_urdf('<robot name="c"><link name="l"><visual><geometry><box size="1 1 1"/></geometry></visual>'
                   '</link></robot>')
    mesh = robot_mesh_at(m, m.zero_config())
    np.testing.assert_allclose(mesh.vertices, m.link_meshes()[0].vertices)
    assert np.allclose(np.abs(mesh.vertices), 0.5)


def test_collision_preferred_over_visual():
    m = parse_urdf('<robot name="c"><link name="l">'
                   '<visual><geometry><box size="1 1 1"/></geometry></visual>'
                   '<collision><geometry><box size="2 2 2"/></geometry></collision></link></robot>')
    assert np.allclose(np.abs(m.link_meshes()[0].vertices), 1.0)


def test_mesh_rotation_equivariance(hand, rng):
    q = _random_q(hand, rng)
    R = RigidTransform.from_rotvec(rng.normal(size=3))
    a = robot_mesh_at(hand, q.with_wrist(compose(R, q.wrist))).vertices
    b = R.apply(robot_mesh_at(hand, q).vertices)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_two_link_mesh_against_manual_matrices(two_link):
    th1, th2 = 0.4, -1.1

    def rz(t, x=0.0):
        c, s = np.cos(t), np.sin(t)
        return np.array([[c, -s, 0, x], [s, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])

    upper = rz(th1)
    fore = upper @ rz(th2, 1.0)
    box = box_mesh((1, 0.1, 0.1)).vertices + [0.5, 0, 0]
    h = np.hstack([box, np.ones((len(box), 1))])
    expect = np.vstack([(h @ upper.T)[:, :3], (h @ fore.T)[:, :3]])
    got = robot_mesh_at(two_link, RobotConfig(RigidTransform.identity(), [th1, th2])).vertices
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_point_cloud_transport(hand, rng):
    q1 = _random_q(hand, rng)
    a = robot_points_at(hand, q1, 512, 0)
    b = robot_points_at(hand, q1, 512, 0)
    assert a.points.tobytes() == b.points.tobytes()
    T = random_transform(rng)
    q2 = q1.with_wrist(compose(T, q1.wrist))
    np.testing.assert_allclose(robot_points_at(hand, q2, 512, 0).points, T.apply(a.points), atol=1e-12)
    q3 = _random_q(hand, rng)
    assert np.array_equal(robot_points_at(hand, q3, 512, 0).links, a.links)


def test_points_split_by_area(hand):
    pc = robot_points_at(hand, hand.zero_config(), 20000, 1)
    areas = np.array([m.surface_area() if len(m.faces) else 0.0 for m in hand.link_meshes()])
    frac = np.bincount(pc.links, minlength=len(areas)) / len(pc)
    np.testing.assert_allclose(frac, areas / areas.sum(), atol=0.01)
    assert len(robot_points_at(hand, hand.zero_config(), 512, 0)) == 512


def test_point_jacobian_matches_finite_differences(hand, rng):
    for _ in range(5):
        q = _random_q(hand, rng)
        local, links, _ = hand.canonical_samples(64, 2)
        world = link_points_world(hand, hand.fk_matrices(q), links, local)
        J = point_jacobian(hand, q, links, world)
        h = 1e-6
        for k in range(q.dof):
            e = np.zeros(q.dof)
            e[k] = h
            hi = link_points_world(hand, hand.fk_matrices(q.retract(e)), links, local)
            lo = link_points_world(hand, hand.fk_matrices(q.retract(-e)), links, local)
            fd = (hi - lo) / (2 * h)
            err = np.linalg.norm(fd - J[:, :, k]) / max(np.linalg.norm(fd), 1e-12)
            assert err < 1e-4 or np.linalg.norm(fd) < 1e-9, k


def test_config_dict_round_trip(hand):
    q = RobotConfig(RigidTransform.from_rotvec([0.1, 0.2, 0.3], [1, 2, 3]), pinch_joints(hand))
    back = RobotConfig.from_dict(q.to_dict())
    assert back.wrist.allclose(q.wrist, 0) and np.array_equal(back.joint_angles, q.joint_angles)


def test_continuous_joint_unlimited():
    m = parse_urdf(ONE_JOINT.replace('type="revolute"', 'type="continuous"'))
    assert np.isinf(m.lower_limits()[0]) and np.isinf(m.upper_limits()[0])


def test_hand_urdf_is_deterministic():
    assert hand_urdf() == hand_urdf()
