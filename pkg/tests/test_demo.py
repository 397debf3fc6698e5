import json
import time

import numpy as np
import pytest

from dexgeom import fixtures
from dexgeom.demo import (
    SynthesisSpec, Trajectory, export_training_set, integrate_actions, partial_transform,
    propagate_object_by_grasp, segment_stages, skill_start, synthesize,
)
from dexgeom.errors import FormatError, NoApproach, UnmarkedTrajectory
from dexgeom.geom import RigidTransform, box_mesh, compose
from dexgeom.robot import RobotConfig

TIPS = fixtures.fingertip_links()


@pytest.fixture(scope="module")
def source(hand):
    traj, mesh = fixtures.pick_and_move(hand)
    # a second, non-target object well away from the hand
    far = RigidTransform.from_translation([0.5, 0.5, 0.0])
    objs = [dict(o, box=far) for o in traj.objects]
    traj = Trajectory(traj.times, traj.configs, objs, traj.joint_names, 10, 15)
    return traj, {"cyl": mesh, "box": box_mesh((0.05, 0.05, 0.05))}


def object_shift(out, src, k=0):
    return compose(out.objects[k]["cyl"], src.objects[k]["cyl"].inverse())


# --- trajectory file ---------------------------------------------------------------


def test_jsonl_round_trip(source, tmp_path):
    traj, _ = source
    traj.save(tmp_path / "t.jsonl")
    back = Trajectory.load(tmp_path / "t.jsonl")
    assert back.to_jsonl() == traj.to_jsonl()
    assert (back.t1, back.t2) == (10, 15)
    for a, b in zip(back.configs, traj.configs):
        assert np.array_equal(a.wrist.translation, b.wrist.translation)
        assert np.array_equal(a.joint_angles, b.joint_angles)


def test_jsonl_rejects_bad_input():
    with pytest.raises(FormatError):
        Trajectory.from_jsonl("")
    with pytest.raises(FormatError):
        Trajectory.from_jsonl('{"t": 0}\n')


def test_trajectory_invariants(hand):
    q = hand.zero_config()
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], [q, q], [{}, {}], hand.joint_names)
    with pytest.raises(ValueError):
        Trajectory([0.0, 1.0], [q, q], [{}, {}], hand.joint_names, 1, 0)


# --- segmentation ----------------------------------------------------------------


def test_segment_pick_and_move(hand, pick_and_move):
    traj, mesh = pick_and_move
    assert segment_stages(traj, mesh, hand, "cyl", fingertips=TIPS) == (10, 15)


def test_segment_never_near(hand, pick_and_move):
    traj, mesh = pick_and_move
    away = RigidTransform.from_translation([1.0, 0.0, 0.0])
    far = Trajectory(traj.times, traj.configs, [{"cyl": compose(away, o["cyl"])} for o in traj.objects],
                     traj.joint_names)
    with pytest.raises(NoApproach):
        segment_stages(far, mesh, hand, "cyl", fingertips=TIPS)


def test_segment_boundary_at_zero(hand):
    traj, mesh = fixtures.pick_and_move(hand, approach_frame=0, contact_frame=0, lift=(0.0, 0.0, 0.3))
    assert segment_stages(traj, mesh, hand, "cyl", fingertips=TIPS) == (0, 0)


def test_segment_without_motion_uses_last_contact(hand, pick_and_move):
    traj, mesh = pick_and_move
    still = Trajectory(traj.times, traj.configs[:16] + [traj.configs[15]] * 14,
                       [traj.objects[0]] * 30, traj.joint_names)
    assert segment_stages(still, mesh, hand, "cyl", fingertips=TIPS) == (10, 29)


# --- synthesis -----------------------------------------------------------------------


def test_identity_sampler_reproduces_source(hand, source):
    traj, scene = source
    out = synthesize(traj, SynthesisSpec.identity("cyl", count=3), scene, hand)
    assert len(out) == 3 and all(o.to_jsonl() == traj.to_jsonl() for o in out)


def test_inverse_transform_recovers_skill_segment(hand, source):
    traj, scene = source
    spec = SynthesisSpec("cyl", yaw_bounds=(-0.5, 0.5), count=5, seed=3)
    s0 = skill_start(traj, hand, scene["cyl"], spec)
    assert 0 < s0 <= traj.t1
    for out in synthesize(traj, spec, scene, hand):
        assert len(out) == len(traj) and (out.t1, out.t2) == (traj.t1, traj.t2)
        inv = object_shift(out, traj).inverse()
        assert not inv.allclose(RigidTransform.identity(), 1e-6)
        for k in range(s0, len(traj)):
            assert compose(inv, out.configs[k].wrist).allclose(traj.configs[k].wrist, 1e-9)
            assert compose(inv, out.objects[k]["cyl"]).allclose(traj.objects[k]["cyl"], 1e-9)
            assert np.array_equal(out.configs[k].joint_angles, traj.configs[k].joint_angles)
        assert all(out.objects[k]["box"] == traj.objects[k]["box"] for k in range(len(traj)))


def test_motion_segment_is_interpolated(hand, source):
    traj, scene = source
    spec = SynthesisSpec("cyl", count=2, seed=11)
    s0 = skill_start(traj, hand, scene["cyl"], spec)
    for out in synthesize(traj, spec, scene, hand):
        T = object_shift(out, traj)
        assert out.configs[0].wrist.allclose(traj.configs[0].wrist, 0.0)
        for k in range(1, s0):
            # pure translation sampler: offsets grow linearly with frame index
            offset = out.configs[k].wrist.translation - traj.configs[k].wrist.translation
            np.testing.assert_allclose(offset, T.translation * k / s0, atol=1e-12)


def test_partial_transform_endpoints(rng):
    T = RigidTransform.from_rotvec([0.3, -0.2, 0.9], [1.0, 2.0, 3.0])
    assert partial_transform(T, 0.0).allclose(RigidTransform.identity(), 0.0)
    assert partial_transform(T, 1.0) is T
    half = partial_transform(T, 0.5)
    np.testing.assert_allclose(half.rotvec(), 0.5 * T.rotvec(), atol=1e-12)
    np.testing.assert_allclose(half.translation, 0.5 * T.translation)


def test_thousand_samples_in_bounds(hand, source):
    traj, scene = source
    spec = SynthesisSpec("cyl", count=1000, seed=7)
    start = time.perf_counter()
    out = synthesize(traj, spec, scene, hand)
    elapsed = time.perf_counter() - start
    assert len(out) == 1000 and elapsed < 30
    pivot = traj.object_pose(0, "cyl").translation
    d = np.array([o.object_pose(0, "cyl").translation - pivot for o in out])
    assert np.all(np.abs(d[:, :2]) <= 0.2) and np.all(d[:, 2] == 0)
    assert np.ptp(d[:, 0]) > 0.3 and np.ptp(d[:, 1]) > 0.3


def test_synthesis_deterministic_per_seed(hand, source):
    traj, scene = source
    a = synthesize(traj, SynthesisSpec("cyl", count=4, seed=5), scene, hand)
    b = synthesize(traj, SynthesisSpec("cyl", count=4, seed=5), scene, hand)
    c = synthesize(traj, SynthesisSpec("cyl", count=4, seed=6), scene, hand)
    assert [x.to_jsonl() for x in a] == [x.to_jsonl() for x in b]
    assert a[0].to_jsonl() != c[0].to_jsonl()
    # sample i depends only on seed + i
    assert a[1].to_jsonl() == c[0].to_jsonl()


def test_synthesis_needs_marks(hand, source):
    traj, scene = source
    with pytest.raises(UnmarkedTrajectory):
        synthesize(traj.with_marks(None, None), SynthesisSpec("cyl"), scene, hand)


def test_spec_validation():
    with pytest.raises(ValueError):
        SynthesisSpec("cyl", count=0)
    with pytest.raises(ValueError):
        SynthesisSpec("cyl", x_bounds=(0.1, -0.1))


# --- fixed-grasp propagation -------------------------------------------------------


def _wrist_traj(hand, wrists, obj):
    q = hand.zero_config()
    return Trajectory(np.arange(len(wrists)), [q.with_wrist(w) for w in wrists], [{"o": obj}] * len(wrists),
                      hand.joint_names)


def test_static_wrist_keeps_object(hand):
    w = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [0.0, 0.1, 0.2])
    obj = RigidTransform.from_translation([0.05, 0.0, 0.0])
    out = propagate_object_by_grasp(_wrist_traj(hand, [w] * 4, obj), "o", 1)
    assert all(out.objects[k]["o"].allclose(obj, 1e-15) for k in range(4))


def test_translated_wrist_translates_object(hand):
    w = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [0.0, 0.1, 0.2])
    t = np.array([0.01, -0.02, 0.03])
    obj = RigidTransform.from_rotvec([0.0, 0.4, 0.0], [0.05, 0.0, 0.0])
    moved = RigidTransform(w.rotation, w.translation + t)
    out = propagate_object_by_grasp(_wrist_traj(hand, [w, w, moved], obj), "o", 1)
    assert out.objects[2]["o"].allclose(RigidTransform(obj.rotation, obj.translation + t), 1e-15)
    assert out.objects[0]["o"] == obj and out.objects[1]["o"] == obj


def test_rotated_wrist_conjugates_object(hand):
    w = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [0.0, 0.1, 0.2])
    R = RigidTransform.from_rotvec([0.0, 0.0, 0.8])
    obj = RigidTransform.from_rotvec([0.0, 0.4, 0.0], [0.05, 0.0, 0.0])
    out = propagate_object_by_grasp(_wrist_traj(hand, [w, compose(w, R)], obj), "o", 0)
    expect = w.as_matrix() @ R.as_matrix() @ np.linalg.inv(w.as_matrix()) @ obj.as_matrix()
    np.testing.assert_allclose(out.objects[1]["o"].as_matrix(), expect, atol=1e-12)


# --- export ---------------------------------------------------------------------------


def test_constant_trajectory_zero_actions(hand, tmp_path):
    traj = _wrist_traj(hand, [RigidTransform.identity()] * 5, RigidTransform.identity()).with_marks(0, 1)
    (d,) = export_training_set([traj], hand, {"o": box_mesh((0.1, 0.1, 0.1))}, tmp_path, n_points=32)
    acts = json.loads((d / "actions.json").read_text())["actions"]
    assert len(acts) == 3
    assert all(v == 0 for a in acts for key in ("dt", "drot", "djoints") for v in a[key])


def test_one_centimetre_step(hand, tmp_path):
    traj = _wrist_traj(hand, [RigidTransform.identity(), RigidTransform.from_translation([0.01, 0, 0])],
                       RigidTransform.identity()).with_marks(0, 0)
    (d,) = export_training_set([traj], hand, {}, tmp_path, n_points=32)
    (a,) = json.loads((d / "actions.json").read_text())["actions"]
    assert a["dt"] == [0.01, 0.0, 0.0] and a["drot"] == [0.0, 0.0, 0.0]
    obs = json.loads((d / "obs.json").read_text())
    assert len(obs["robot_points"]) == 96 and obs["t2"] == 0


def test_integrated_actions_reproduce_configs(hand, source, tmp_path):
    traj, scene = source
    dirs = export_training_set([traj], hand, scene, tmp_path, n_points=64)
    obs = json.loads((dirs[0] / "obs.json").read_text())
    acts = json.loads((dirs[0] / "actions.json").read_text())["actions"]
    rebuilt = integrate_actions(RobotConfig.from_dict(obs["q_grasp"]), acts)
    assert len(rebuilt) == len(traj) - traj.t2
    for q, ref in zip(rebuilt, traj.configs[traj.t2:]):
        assert np.abs(q.as_vector() - ref.as_vector()).max() < 1e-6
    assert set(obs["object_points"]) == {"cyl", "box"}


def test_export_deterministic_and_requires_marks(hand, source, tmp_path):
    traj, scene = source
    a = export_training_set([traj], hand, scene, tmp_path / "a", n_points=64, seed=2)[0]
    b = export_training_set([traj], hand, scene, tmp_path / "b", n_points=64, seed=2)[0]
    for name in ("obs.json", "actions.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    with pytest.raises(UnmarkedTrajectory):
        export_training_set([traj.with_marks(None, None)], hand, scene, tmp_path / "c")
