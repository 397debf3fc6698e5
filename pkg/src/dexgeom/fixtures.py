"""Synthetic robots, objects and trajectories used by the tests, the demo CLI run and
the acceptance suite."""

from __future__ import annotations

import numpy as np

from .geom import RigidTransform, TriMesh, cylinder_mesh
from .robot import RobotConfig, RobotModel, parse_urdf

TWO_LINK_URDF = """<robot name="planar2">
  <link name="base"/>
  <link name="upper">
    <collision><origin xyz="0.5 0 0"/><geometry><box size="1 0.1 0.1"/></geometry></collision>
  </link>
  <link name="fore">
    <collision><origin xyz="0.5 0 0"/><geometry><box size="1 0.1 0.1"/></geometry></collision>
  </link>
  <link name="tip"/>
  <joint name="shoulder" type="revolute">
    <parent link="base"/><child link="upper"/>
    <origin xyz="0 0 0"/><axis xyz="0 0 1"/>
    <limit lower="-3.14159" upper="3.14159" effort="1" velocity="1"/>
  </joint>
  <joint name="elbow" type="revolute">
    <parent link="upper"/><child link="fore"/>
    <origin xyz="1 0 0"/><axis xyz="0 0 1"/>
    <limit lower="-3.14159" upper="3.14159" effort="1" velocity="1"/>
  </joint>
  <joint name="tip_fixed" type="fixed">
    <parent link="fore"/><child link="tip"/>
    <origin xyz="1 0 0"/>
  </joint>
</robot>
"""

FINGERS = ("thumb", "index", "middle", "ring")
TIP_RADIUS = 0.009
PROXIMAL_LEN, MIDDLE_LEN, DISTAL_LEN = 0.045, 0.03, 0.02
FINGER_RADIUS = 0.008


def _thumb_rpy() -> tuple:
    x = np.array([1.0, 0.0, 0.0])
    z = np.array([0.0, 1.0, 0.3])
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return tuple(RigidTransform.from_rotation_matrix(np.column_stack([x, y, z])).rpy())


def hand_urdf() -> str:
    """A four-finger, sixteen-joint hand built from primitives.

    The palm faces +x and the fingers point along +z at zero configuration.
    Positive flexion curls a finger toward +x.
    """
    bases = {
        "index": ((0.0, 0.025, 0.09), (0.0, 0.0, 0.0)),
        "middle": ((0.0, 0.0, 0.09), (0.0, 0.0, 0.0)),
        "ring": ((0.0, -0.025, 0.09), (0.0, 0.0, 0.0)),
        "thumb": ((0.012, 0.04, 0.03), _thumb_rpy()),
    }
    out = ['<robot name="hand16">',
           '  <link name="palm">',
           '    <collision><origin xyz="0 0 0.045"/><geometry><box size="0.02 0.08 0.09"/></geometry></collision>',
           "  </link>"]
    joints = []
    r = FINGER_RADIUS
    for f in FINGERS:
        xyz, rpy = bases[f]
        out.append(f'  <link name="{f}_base"/>')
        out.append(f'  <link name="{f}_proximal"><collision><origin xyz="0 0 {PROXIMAL_LEN / 2}"/>'
                   f'<geometry><cylinder radius="{r}" length="{PROXIMAL_LEN}"/></geometry></collision></link>')
        out.append(f'  <link name="{f}_middle"><collision><origin xyz="0 0 {MIDDLE_LEN / 2}"/>'
                   f'<geometry><cylinder radius="{r}" length="{MIDDLE_LEN}"/></geometry></collision></link>')
        out.append(f'  <link name="{f}_distal">'
                   f'<collision><origin xyz="0 0 {DISTAL_LEN / 2}"/>'
                   f'<geometry><cylinder radius="{r}" length="{DISTAL_LEN}"/></geometry></collision>'
                   f'<collision><origin xyz="0 0 {DISTAL_LEN}"/>'
                   f'<geometry><sphere radius="{TIP_RADIUS}"/></geometry></collision></link>')
        spec = [
            (f"{f}_abd", "palm", f"{f}_base", xyz, rpy, "1 0 0", (-0.4, 0.4)),
            (f"{f}_mcp", f"{f}_base", f"{f}_proximal", (0, 0, 0), (0, 0, 0), "0 1 0", (-0.3, 1.6)),
            (f"{f}_pip", f"{f}_proximal", f"{f}_middle", (0, 0, PROXIMAL_LEN), (0, 0, 0), "0 1 0", (0.0, 1.7)),
            (f"{f}_dip", f"{f}_middle", f"{f}_distal", (0, 0, MIDDLE_LEN), (0, 0, 0), "0 1 0", (0.0, 1.5)),
        ]
        for name, parent, child, o_xyz, o_rpy, axis, (lo, hi) in spec:
            joints.append(
                f'  <joint name="{name}" type="revolute"><parent link="{parent}"/><child link="{child}"/>'
                f'<origin xyz="{" ".join(repr(float(v)) for v in o_xyz)}" '
                f'rpy="{" ".join(repr(float(v)) for v in o_rpy)}"/>'
                f'<axis xyz="{axis}"/><limit lower="{lo}" upper="{hi}" effort="1" velocity="1"/></joint>')
    out += joints
    out.append("</robot>")
    return "\n".join(out) + "\n"


def two_link_model() -> RobotModel:
    return parse_urdf(TWO_LINK_URDF)


def hand_model() -> RobotModel:
    return parse_urdf(hand_urdf())


def fingertip_links() -> list:
    return [f"{f}_distal" for f in FINGERS]


def default_mapping_entries() -> list:
    """Wrist and fingertips at weight 1, distal-joint centres at weight 0.5.

    Human keypoint indices follow the 21-joint layout: 0 wrist, then four per
    finger (thumb 1-4, index 5-8, middle 9-12, ring 13-16, little 17-20).
    """
    tip = (0.0, 0.0, DISTAL_LEN + TIP_RADIUS)
    entries = [("palm", (0.0, 0.0, 0.0), 0, 1.0)]
    for k, f in enumerate(FINGERS):
        entries.append((f"{f}_distal", tip, 4 * (k + 1), 1.0))
        entries.append((f"{f}_distal", (0.0, 0.0, 0.0), 4 * (k + 1) - 1, 0.5))
    return entries


def pinch_joints(model: RobotModel) -> np.ndarray:
    """Thumb-index pinch with the middle and ring fingers curled away."""
    vals = {
        "thumb_abd": 0.0, "thumb_mcp": 0.9, "thumb_pip": 0.3, "thumb_dip": 0.6,
        "index_abd": 0.0, "index_mcp": 0.9, "index_pip": 0.5, "index_dip": 0.2,
        "middle_abd": 0.0, "middle_mcp": 1.5, "middle_pip": 1.6, "middle_dip": 1.2,
        "ring_abd": 0.0, "ring_mcp": 1.5, "ring_pip": 1.6, "ring_dip": 1.2,
    }
    return np.array([vals[n] for n in model.joint_names])


def tip_centers(model: RobotModel, q: RobotConfig) -> dict:
    fk = model.fk_matrices(q)
    out = {}
    for f in FINGERS:
        m = fk[f"{f}_distal"]
        out[f] = m[:3, :3] @ np.array([0.0, 0.0, DISTAL_LEN]) + m[:3, 3]
    return out


def pinch_cylinder(model: RobotModel, q: RobotConfig, segments: int = 128, rings: int = 40,
                   height: float = 0.04):
    """Cylinder squeezed between the thumb and index fingertip spheres at ``q``.

    Returns ``(mesh_in_object_frame, object_pose)``. The cylinder axis is
    perpendicular to the pinch line and to the palm normal; both sphere surfaces
    are tangent to the side wall.
    """
    c = tip_centers(model, q)
    a, b = c["thumb"], c["index"]
    mid = 0.5 * (a + b)
    d = b - a
    radius = 0.5 * np.linalg.norm(d) - TIP_RADIUS
    x = d / np.linalg.norm(d)
    palm_normal = q.wrist.apply_vector([1.0, 0.0, 0.0])
    z = np.cross(x, palm_normal)
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    pose = RigidTransform.from_rotation_matrix(np.column_stack([x, y, z]), mid)
    return cylinder_mesh(radius, height, segments, rings), pose


def pinch_scene(seed_offset: float = 0.0):
    """Hand at a pinch grasp with the cylinder it holds, both in the world frame."""
    model = hand_model()
    q = RobotConfig(RigidTransform.from_translation([0.0, 0.0, 0.0]), pinch_joints(model))
    mesh, pose = pinch_cylinder(model, q)
    return model, q, mesh, pose


def _tip_gap(model: RobotModel, q: RobotConfig, mesh: TriMesh, pose: RigidTransform) -> float:
    """Minimum vertex distance between the thumb/index distal links and the object."""
    from .geom import NearestIndex

    fk = model.fk_matrices(q)
    meshes = model.link_meshes()
    index = NearestIndex(mesh.vertices)
    best = np.inf
    for name in ("thumb_distal", "index_distal"):
        m = fk[name]
        v = meshes[model.link_index[name]].vertices @ m[:3, :3].T + m[:3, 3]
        best = min(best, float(index.query(pose.inverse().apply(v))[0].min()))
    return best


def pick_and_move(model: RobotModel, object_id: str = "cyl", n_frames: int = 30,
                  approach_frame: int = 10, contact_frame: int = 15, lift=(0.0, 0.0, 0.12),
                  d_approach: float = 0.02):
    """A pick-and-move trajectory around the pinch scene.

    The hand keeps its pinch shape and slides in along the cylinder axis. The
    thumb/index gap to the object is scheduled: well beyond ``d_approach`` before
    ``approach_frame``, 0.75 * ``d_approach`` at it, shrinking (but above 5 mm)
    until contact at ``contact_frame``. Afterwards the wrist lifts and the object
    follows rigidly.

    Returns ``(trajectory, object_mesh_in_object_frame)``.
    """
    from .demo import Trajectory, propagate_object_by_grasp

    grasp_q = RobotConfig(RigidTransform.identity(), pinch_joints(model))
    mesh, obj_pose = pinch_cylinder(model, grasp_q)
    axis = obj_pose.apply_vector([0.0, 0.0, -1.0])

    def offset_for_gap(gap):
        lo, hi = 0.0, 0.5
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            w = RigidTransform(grasp_q.wrist.rotation, grasp_q.wrist.translation + mid * axis)
            if _tip_gap(model, RobotConfig(w, grasp_q.joint_angles), mesh, obj_pose) < gap:
                lo = mid
            else:
                hi = mid
        return hi

    n_near = contact_frame - approach_frame
    gaps = list(np.linspace(0.2, 2.0 * d_approach, approach_frame))
    gaps += list(np.linspace(0.75 * d_approach, 0.006, n_near))
    offsets = [offset_for_gap(g) for g in gaps] + [0.0] * (n_frames - contact_frame)
    configs, objects = [], []
    lift = np.asarray(lift, dtype=float)
    n_move = n_frames - contact_frame - 1
    for k in range(n_frames):
        t = grasp_q.wrist.translation + offsets[k] * axis
        if k > contact_frame:
            t = t + lift * (k - contact_frame) / n_move
        wrist = RigidTransform(grasp_q.wrist.rotation, t)
        configs.append(RobotConfig(wrist, grasp_q.joint_angles))
        objects.append({object_id: obj_pose})
    traj = Trajectory(np.arange(n_frames) * 0.1, configs, objects, list(model.joint_names))
    traj = propagate_object_by_grasp(traj, object_id, contact_frame)
    return traj, mesh
