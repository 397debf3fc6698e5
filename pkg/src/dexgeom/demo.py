"""Trajectories: stage segmentation, SE(3) demonstration synthesis, grasp-fixed object
propagation and training-set export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    CollisionInRegeneration,
    FormatError,
    MissingPose,
    NoApproach,
    RetryExhausted,
    UnmarkedTrajectory,
)
from .geom import NearestIndex, RigidTransform, TriMesh, compose, quat_mul, sample_surface
from .robot import RobotConfig, RobotModel, robot_points_at

log = logging.getLogger(__name__)

FORMAT_NAME = "dexgeom-trajectory"
DEFAULT_D_APPROACH = 0.02
DEFAULT_MOTION_EPS = 0.005
DEFAULT_CONTACT_EPS = 0.004
DEFAULT_CLEARANCE = 0.01
INTERACTION_FACTOR = 3.0


class Trajectory:
    """Time-indexed robot configurations with per-frame object poses and stage marks."""

    def __init__(self, times, configs: Sequence[RobotConfig], objects: Sequence[Dict[str, RigidTransform]],
                 joint_names: Sequence[str], t1: Optional[int] = None, t2: Optional[int] = None):
        self.times = np.array(times, dtype=float).reshape(-1)
        self.configs = list(configs)
        self.objects = [dict(o) for o in objects]
        self.joint_names = list(joint_names)
        self.t1 = None if t1 is None else int(t1)
        self.t2 = None if t2 is None else int(t2)
        n = len(self.times)
        if len(self.configs) != n or len(self.objects) != n:
            raise ValueError("times, configs and objects must have equal length")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.t1 is not None and self.t2 is not None and not 0 <= self.t1 <= self.t2 < n:
            raise ValueError(f"invalid stage marks t1={self.t1}, t2={self.t2} for {n} frames")

    def __len__(self):
        return len(self.times)

    @property
    def marked(self) -> bool:
        return self.t1 is not None and self.t2 is not None

    def with_marks(self, t1, t2) -> "Trajectory":
        return Trajectory(self.times, self.configs, self.objects, self.joint_names, t1, t2)

    def object_pose(self, k: int, object_id: str) -> RigidTransform:
        try:
            return self.objects[k][object_id]
        except KeyError:
            raise MissingPose(f"frame {k} has no pose for object {object_id!r}") from None

    # --- JSON lines ---------------------------------------------------------

    def to_jsonl(self) -> str:
        header = {"format": FORMAT_NAME, "version": 1, "joint_names": self.joint_names,
                  "t1": self.t1, "t2": self.t2, "rotation": "quaternion w,x,y,z"}
        lines = [json.dumps(header)]
        for t, q, objs in zip(self.times, self.configs, self.objects):
            rec = {"t": float(t), "wrist": q.wrist.to_dict(), "joints": [float(v) for v in q.joint_angles],
                   "objects": {k: objs[k].to_dict() for k in sorted(objs)}}
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Trajectory":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines:
            raise FormatError("empty trajectory file")
        header = json.loads(lines[0])
        if header.get("format") != FORMAT_NAME:
            raise FormatError("missing trajectory header line")
        times, configs, objects = [], [], []
        for n, line in enumerate(lines[1:], 2):
            rec = json.loads(line)
            try:
                times.append(rec["t"])
                configs.append(RobotConfig(RigidTransform.from_dict(rec["wrist"]), rec["joints"]))
                objects.append({k: RigidTransform.from_dict(v) for k, v in rec.get("objects", {}).items()})
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"line {n}: {exc}") from exc
        return cls(times, configs, objects, header.get("joint_names", []), header.get("t1"), header.get("t2"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "Trajectory":
        return cls.from_jsonl(Path(path).read_text())


# --- segmentation ---------------------------------------------------------


def _link_vertices(model: RobotModel, fk, names: Sequence[str]) -> List[np.ndarray]:
    meshes = model.link_meshes()
    out = []
    for name in names:
        mesh = meshes[model.link_index[name]]
        if len(mesh.vertices):
            m = fk[name]
            out.append(mesh.vertices @ m[:3, :3].T + m[:3, 3])
    return out


def fingertip_distances(traj: Trajectory, model: RobotModel, obj: TriMesh, object_id: str,
                        fingertips: Sequence[str]) -> np.ndarray:
    """``(frames, fingertips)`` minimum vertex distance from each fingertip link to the object."""
    index = NearestIndex(obj.vertices)
    out = np.full((len(traj), len(fingertips)), np.inf)
    meshes = model.link_meshes()
    for k, q in enumerate(traj.configs):
        inv = traj.object_pose(k, object_id).inverse()
        fk = model.fk_matrices(q)
        for i, name in enumerate(fingertips):
            if len(meshes[model.link_index[name]].vertices) == 0:
                continue
            pts = _link_vertices(model, fk, [name])[0]
            d, _ = index.query(inv.apply(pts))
            out[k, i] = d.min()
    return out


def segment_stages(traj: Trajectory, obj: TriMesh, model: RobotModel, object_id: str,
                   d_approach: float = DEFAULT_D_APPROACH, motion_eps: float = DEFAULT_MOTION_EPS,
                   contact_eps: float = DEFAULT_CONTACT_EPS,
                   fingertips: Optional[Sequence[str]] = None) -> Tuple[int, int]:
    """Find the approach frame ``t1`` and the stable-grasp frame ``t2``."""
    if len(traj) < 3:
        raise ValueError("segmentation needs at least 3 frames")
    tips = list(fingertips) if fingertips is not None else model.leaf_links()
    d = fingertip_distances(traj, model, obj, object_id, tips)
    near = np.flatnonzero(d.min(axis=1) < d_approach)
    if len(near) == 0:
        raise NoApproach(f"hand never comes within {d_approach} m of {object_id!r}")
    t1 = int(near[0])
    touching = (d < contact_eps).sum(axis=1) >= 2
    moves = np.zeros(len(traj), dtype=bool)
    for k in range(len(traj) - 1):
        a = traj.object_pose(k, object_id).translation
        b = traj.object_pose(k + 1, object_id).translation
        moves[k] = np.linalg.norm(b - a) > motion_eps
    cand = np.flatnonzero(touching & moves)
    cand = cand[cand >= t1]
    if len(cand):
        return t1, int(cand[0])
    held = np.flatnonzero(touching)
    held = held[held >= t1]
    return t1, int(held[-1]) if len(held) else t1


# --- synthesis ------------------------------------------------------------


@dataclass(frozen=True)
class SynthesisSpec:
    target: str
    x_bounds: Tuple[float, float] = (-0.2, 0.2)
    y_bounds: Tuple[float, float] = (-0.2, 0.2)
    yaw_bounds: Tuple[float, float] = (0.0, 0.0)
    count: int = 1
    seed: int = 0
    method: str = "interpolate"
    full_rotation: bool = False
    clearance: float = DEFAULT_CLEARANCE
    max_retries: int = 20
    d_approach: float = DEFAULT_D_APPROACH

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        for lo, hi in (self.x_bounds, self.y_bounds, self.yaw_bounds):
            if lo > hi:
                raise ValueError("bounds must be ordered (lo <= hi)")

    @classmethod
    def identity(cls, target: str, **kw) -> "SynthesisSpec":
        return cls(target, (0.0, 0.0), (0.0, 0.0), (0.0, 0.0), **kw)


def _uniform(rng, lo, hi) -> float:
    return lo if lo == hi else float(rng.uniform(lo, hi))


def sample_transform(spec: SynthesisSpec, rng, pivot) -> RigidTransform:
    """World-frame transform moving ``pivot`` by an in-bounds x-y offset and rotating
    about the vertical through ``pivot``."""
    dx = _uniform(rng, *spec.x_bounds)
    dy = _uniform(rng, *spec.y_bounds)
    if spec.full_rotation:
        v = rng.normal(size=4)
        rot = RigidTransform(v / np.linalg.norm(v))
    else:
        yaw = _uniform(rng, *spec.yaw_bounds)
        rot = RigidTransform([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])
    pivot = np.asarray(pivot, dtype=float)
    return compose(RigidTransform.from_translation(pivot + np.array([dx, dy, 0.0])),
                   compose(rot, RigidTransform.from_translation(-pivot)))


def slerp(q0: np.ndarray, q1: np.ndarray, a: float) -> np.ndarray:
    if a == 0.0:
        return np.array(q0, dtype=float)
    if a == 1.0:
        return np.array(q1, dtype=float)
    dot = float(q0 @ q1)
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 0.9995:
        q = q0 + a * (q1 - q0)
        return q / np.linalg.norm(q)
    th = np.arccos(dot)
    return (np.sin((1 - a) * th) * q0 + np.sin(a * th) * q1) / np.sin(th)


def partial_transform(t: RigidTransform, a: float) -> RigidTransform:
    """Fraction ``a`` of ``t``: slerp from identity for rotation, linear for translation."""
    if a == 1.0:
        return t
    return RigidTransform(slerp(np.array([1.0, 0.0, 0.0, 0.0]), t.rotation, a), a * t.translation)


def interaction_frames(traj: Trajectory, model: RobotModel, obj: TriMesh, object_id: str,
                       reach: float) -> np.ndarray:
    """Boolean per frame: any robot vertex within ``reach`` of the object."""
    index = NearestIndex(obj.vertices)
    verts_local = model.link_meshes()
    out = np.zeros(len(traj), dtype=bool)
    for k, q in enumerate(traj.configs):
        fk = model.fk_matrices(q)
        pts = np.vstack(_link_vertices(model, fk, [l.name for l, m in zip(model.links, verts_local) if len(m.vertices)]))
        d, _ = index.query(traj.object_pose(k, object_id).inverse().apply(pts), max_distance=reach)
        out[k] = np.isfinite(d).any()
    return out


def skill_start(traj: Trajectory, model: RobotModel, obj: TriMesh, spec: SynthesisSpec) -> int:
    """First frame of the skill segment (hand within interaction range of the target)."""
    inside = interaction_frames(traj, model, obj, spec.target, INTERACTION_FACTOR * spec.d_approach)
    idx = np.flatnonzero(inside)
    if len(idx) == 0:
        return traj.t1 if traj.t1 is not None else 0
    s0 = int(idx[0])
    return min(s0, traj.t1) if traj.t1 is not None else s0


def apply_sample(source: Trajectory, transform: RigidTransform, target: str, s0: int) -> Trajectory:
    """Move the target object and the skill segment by ``transform``.

    Frames before ``s0`` (the free-space approach) receive a partial transform that
    grows from identity at frame 0 to the full transform at ``s0``: translation
    offsets are interpolated linearly and rotation offsets spherically.
    """
    configs, objects = [], []
    for k, (q, objs) in enumerate(zip(source.configs, source.objects)):
        step = transform if k >= s0 else partial_transform(transform, k / s0)
        configs.append(RobotConfig(compose(step, q.wrist), q.joint_angles))
        new = dict(objs)
        if target in new:
            new[target] = compose(transform, new[target])
        objects.append(new)
    return Trajectory(source.times, configs, objects, source.joint_names, source.t1, source.t2)


def check_clearance(traj: Trajectory, frames: Sequence[int], scene: Dict[str, TriMesh],
                    clearance: float, indexes: Optional[Dict[str, NearestIndex]] = None) -> None:
    indexes = indexes or {k: NearestIndex(m.vertices) for k, m in scene.items()}
    if not len(frames):
        return
    for oid, index in indexes.items():
        pts = []
        for k in frames:
            if oid not in traj.objects[k]:
                continue
            pts.append(traj.objects[k][oid].inverse().apply(traj.configs[k].wrist.translation))
        if not pts:
            continue
        d, _ = index.query(np.array(pts), max_distance=clearance)
        if np.isfinite(d).any():
            raise CollisionInRegeneration(f"regenerated wrist path within {clearance} m of {oid!r}")


def synthesize(source: Trajectory, spec: SynthesisSpec, scene: Dict[str, TriMesh],
               model: RobotModel) -> List[Trajectory]:
    """Spatially randomized copies of ``source`` (one per sample, sample ``i`` seeded
    with ``spec.seed + i``)."""
    if not source.marked:
        raise UnmarkedTrajectory("synthesis needs stage marks t1, t2")
    if spec.target not in scene:
        raise MissingPose(f"no mesh for target object {spec.target!r}")
    s0 = skill_start(source, model, scene[spec.target], spec)
    pivot = source.object_pose(0, spec.target).translation
    indexes = {k: NearestIndex(m.vertices) for k, m in scene.items()}
    regen = list(range(1, s0))
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng(spec.seed + i)
        for attempt in range(spec.max_retries + 1):
            T = sample_transform(spec, rng, pivot)
            cand = apply_sample(source, T, spec.target, s0)
            try:
                check_clearance(cand, regen, scene, spec.clearance, indexes)
            except CollisionInRegeneration:
                log.debug("sample %d attempt %d rejected", i, attempt)
                continue
            out.append(cand)
            break
        else:
            raise RetryExhausted(f"sample {i}: no collision-free transform after {spec.max_retries + 1} tries")
    return out


# --- fixed-grasp propagation ------------------------------------------------


def propagate_object_by_grasp(traj: Trajectory, object_id: str, t2: int) -> Trajectory:
    """After ``t2`` the object keeps the hand-relative pose it had at ``t2``."""
    if not 0 <= t2 < len(traj):
        raise MissingPose(f"t2={t2} outside trajectory")
    obj_t2 = traj.object_pose(t2, object_id)
    rel = compose(traj.configs[t2].wrist.inverse(), obj_t2)
    objects = []
    for k, objs in enumerate(traj.objects):
        new = dict(objs)
        if k > t2:
            new[object_id] = compose(traj.configs[k].wrist, rel)
        objects.append(new)
    return Trajectory(traj.times, traj.configs, objects, traj.joint_names, traj.t1, traj.t2)


# --- training-set export ----------------------------------------------------

ACTION_NOTE = ("dt: wrist translation delta (m); drot: rotation vector of R[t+1] R[t]^T "
               "(world frame, left-multiplied); djoints: elementwise joint deltas")


def config_delta(a: RobotConfig, b: RobotConfig) -> dict:
    """Action taking ``a`` to ``b``."""
    drot = compose(b.wrist, a.wrist.inverse())
    return {"dt": (b.wrist.translation - a.wrist.translation).tolist(),
            "drot": RigidTransform(drot.rotation).rotvec().tolist(),
            "djoints": (b.joint_angles - a.joint_angles).tolist()}


def apply_delta(q: RobotConfig, action: dict) -> RobotConfig:
    rot = RigidTransform.from_rotvec(action["drot"])
    wrist = RigidTransform(quat_mul(rot.rotation, q.wrist.rotation), q.wrist.translation + np.asarray(action["dt"]))
    return RobotConfig(wrist, q.joint_angles + np.asarray(action["djoints"]))


def export_training_set(trajs: Sequence[Trajectory], model: RobotModel, meshes: Dict[str, TriMesh],
                        out_dir, n_points: int = 512, seed: int = 0) -> List[Path]:
    """Write ``traj_XXXX/obs.json`` and ``traj_XXXX/actions.json`` per trajectory.

    The observation is taken at the grasp frame ``t2``; actions cover ``t2 .. T-1``.
    """
    out_dir = Path(out_dir)
    written = []
    obj_samples = {k: sample_surface(m, n_points, seed).points for k, m in sorted(meshes.items())}
    for i, traj in enumerate(trajs):
        if not traj.marked:
            raise UnmarkedTrajectory(f"trajectory {i} has no stage marks")
        d = out_dir / f"traj_{i:04d}"
        d.mkdir(parents=True, exist_ok=True)
        q_grasp = traj.configs[traj.t2]
        robot_pts = robot_points_at(model, q_grasp, n_points, seed).points
        objs = {}
        for oid, pts in obj_samples.items():
            if oid in traj.objects[traj.t2]:
                objs[oid] = traj.objects[traj.t2][oid].apply(pts).ravel().tolist()
        obs = {"joint_names": traj.joint_names, "t2": traj.t2, "q_grasp": q_grasp.to_dict(),
               "robot_points": robot_pts.ravel().tolist(), "object_points": objs}
        actions = [dict(t=float(traj.times[k]), **config_delta(traj.configs[k], traj.configs[k + 1]))
                   for k in range(traj.t2, len(traj) - 1)]
        (d / "obs.json").write_text(json.dumps(obs))
        (d / "actions.json").write_text(json.dumps({"convention": ACTION_NOTE, "actions": actions}))
        written.append(d)
    return written


def integrate_actions(q0: RobotConfig, actions: Sequence[dict]) -> List[RobotConfig]:
    out = [q0]
    for a in actions:
        out.append(apply_delta(out[-1], a))
    return out
