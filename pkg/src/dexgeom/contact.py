"""Distance-based hand-object contact maps and contact-alignment grasp refinement."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, EmptyMesh, FormatError, NonPositiveRadius, UnmarkedTrajectory
from .demo import Trajectory
from .geom import NearestIndex, TriMesh, as_points
from .robot import RobotConfig, RobotModel, _posed_vertices, robot_mesh_at

log = logging.getLogger(__name__)

DEFAULT_C_RAD = 0.01
DEFAULT_PENETRATION_WEIGHT = 10.0
FD_STEP = 1e-5
ARMIJO_C = 1e-4
SHRINK = 0.5
# Length used to put rotations and joint angles on the same footing as translations.
CHAR_LENGTH = 0.05
INITIAL_STEP = 0.005
MAX_BACKTRACKS = 30


@dataclass(frozen=True)
class ContactMap:
    values: np.ndarray
    c_rad: float

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("contact values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def to_json(self) -> str:
        return json.dumps({"c_rad": float(self.c_rad), "values": [float(x) for x in self.values]})

    @classmethod
    def from_json(cls, text: str, mesh: Optional[TriMesh] = None) -> "ContactMap":
        d = json.loads(text)
        cm = cls(d["values"], d["c_rad"])
        if mesh is not None and len(cm) != len(mesh.vertices):
            raise FormatError(f"contact map has {len(cm)} values, mesh has {len(mesh.vertices)} vertices")
        return cm


def _values(d: np.ndarray, c_rad: float) -> np.ndarray:
    return np.where(np.isfinite(d), np.maximum(0.0, 1.0 - d / c_rad), 0.0)


def contact_values(subject, other, c_rad: float, index: Optional[NearestIndex] = None) -> np.ndarray:
    """``max(0, 1 - min_j |other_j - subject_i| / c_rad)`` for every subject vertex."""
    index = index if index is not None else NearestIndex(other)
    d, _ = index.query(as_points(subject), max_distance=c_rad)
    return _values(d, c_rad)


def contact_map(subject: TriMesh, other: TriMesh, c_rad: float = DEFAULT_C_RAD) -> ContactMap:
    if len(as_points(subject)) == 0 or len(as_points(other)) == 0:
        raise EmptyMesh("contact map needs two nonempty meshes")
    if not c_rad > 0:
        raise NonPositiveRadius(f"c_rad must be positive, got {c_rad}")
    return ContactMap(contact_values(subject, other, c_rad), c_rad)


def penetration_depths(points, obj: TriMesh, normals: Optional[np.ndarray] = None,
                       index: Optional[NearestIndex] = None) -> np.ndarray:
    """Depth below the object surface, measured along the outward normal of the nearest
    object vertex; zero outside."""
    normals = normals if normals is not None else obj.vertex_normals()
    index = index if index is not None else NearestIndex(obj.vertices)
    p = as_points(points)
    _, idx = index.query(p)
    signed = np.einsum("ij,ij->i", p - obj.vertices[idx], normals[idx])
    return np.maximum(0.0, -signed)


class ContactProblem:
    """Alignment energy of a robot hand against fixed contact targets on an object.

    The object mesh is given in the world frame.
    """

    def __init__(self, model: RobotModel, obj: TriMesh, target_hand, target_object,
                 c_rad: float = DEFAULT_C_RAD, penetration_weight: float = DEFAULT_PENETRATION_WEIGHT):
        if not c_rad > 0:
            raise NonPositiveRadius(f"c_rad must be positive, got {c_rad}")
        if len(obj.vertices) == 0:
            raise EmptyMesh("object mesh is empty")
        self.model = model
        self.obj = obj
        self.c_rad = float(c_rad)
        self.penetration_weight = float(penetration_weight)
        self.obj_index = NearestIndex(obj.vertices)
        self.obj_normals = obj.vertex_normals()
        n_hand = sum(len(m.vertices) for m in model.link_meshes())
        self.target_hand = np.asarray(getattr(target_hand, "values", target_hand), dtype=float).reshape(-1)
        self.target_object = np.asarray(getattr(target_object, "values", target_object), dtype=float).reshape(-1)
        if len(self.target_hand) != n_hand:
            raise DimensionMismatch(f"hand target has {len(self.target_hand)} values, hand mesh has {n_hand} vertices")
        if len(self.target_object) != len(obj.vertices):
            raise DimensionMismatch(
                f"object target has {len(self.target_object)} values, object has {len(obj.vertices)} vertices")

    def hand_vertices(self, q: RobotConfig) -> np.ndarray:
        return _posed_vertices(self.model, self.model.fk_matrices(q))

    def _evaluate(self, hv: np.ndarray, hand_sel=None, obj_sel=None) -> dict:
        th, to = self.target_hand, self.target_object
        obj_pts = self.obj.vertices
        if hand_sel is not None:
            hv, th = hv[hand_sel], th[hand_sel]
        if obj_sel is not None:
            obj_pts, to = obj_pts[obj_sel], to[obj_sel]
        d_hand, idx = self.obj_index.query(hv, max_distance=self.reach)
        c_hand = _values(np.where(d_hand <= self.c_rad, d_hand, np.inf), self.c_rad)
        depth = np.zeros(len(hv))
        near = idx >= 0
        if np.any(near):
            j = idx[near]
            signed = np.einsum("ij,ij->i", hv[near] - self.obj.vertices[j], self.obj_normals[j])
            depth[near] = np.maximum(0.0, -signed)
        if len(hv) and len(obj_pts):
            c_obj = contact_values(obj_pts, hv, self.c_rad, NearestIndex(hv))
        else:
            c_obj = np.zeros(len(obj_pts))
        return {
            "hand": c_hand,
            "object": c_obj,
            "depth": depth,
            "hand_error": float(np.abs(c_hand - th).sum()),
            "object_error": float(np.abs(c_obj - to).sum()),
            "penetration": float(depth.sum()),
        }

    @property
    def reach(self) -> float:
        """Penetration is measured only for hand vertices this close to an object vertex."""
        return 2.0 * self.c_rad

    def terms(self, q: RobotConfig) -> dict:
        return self._evaluate(self.hand_vertices(q))

    def _total(self, t: dict) -> float:
        e = t["object_error"] + t["hand_error"]
        if self.penetration_weight > 0:
            e += self.penetration_weight * t["penetration"]
        return e

    def energy(self, q: RobotConfig) -> float:
        return self._total(self.terms(q))

    def gradient(self, q: RobotConfig, h: float = FD_STEP) -> np.ndarray:
        """Central differences over the local increment of :meth:`RobotConfig.retract`.

        Terms that a perturbation cannot change cancel in the difference, so each
        coordinate only re-evaluates the vertices it can move: everything near the
        object for wrist coordinates, the downstream links for a joint.
        """
        margin = 1e-3
        model = self.model
        g = np.zeros(model.dof)
        hv = self.hand_vertices(q)
        d, _ = self.obj_index.query(hv, max_distance=self.reach + margin)
        hand_sel = np.flatnonzero(np.isfinite(d))
        if len(hand_sel) == 0:
            return g
        d_o, _ = NearestIndex(hv[hand_sel]).query(self.obj.vertices, max_distance=self.c_rad + margin)
        obj_sel = np.flatnonzero(np.isfinite(d_o))
        for i in range(6):
            e = np.zeros(model.dof)
            e[i] = h
            hi = self._total(self._evaluate(self.hand_vertices(q.retract(e)), hand_sel, obj_sel))
            lo = self._total(self._evaluate(self.hand_vertices(q.retract(-e)), hand_sel, obj_sel))
            g[i] = (hi - lo) / (2 * h)

        sel_links = model.vertex_links()[hand_sel]
        groups = {}
        for j in range(model.n_joints):
            moved_links = [li for li, l in enumerate(model.links) if j in model.chain(l.name)]
            mask = np.isin(sel_links, moved_links)
            if not np.any(mask):
                continue
            key = tuple(moved_links)
            if key not in groups:
                groups[key] = self._partial_setup(hv, hand_sel, mask, margin)
            setup = groups[key]
            e = np.zeros(model.dof)
            e[6 + j] = h
            hi = self._partial_energy(q.retract(e), setup)
            lo = self._partial_energy(q.retract(-e), setup)
            g[6 + j] = (hi - lo) / (2 * h)
        return g

    def _partial_setup(self, hv, hand_sel, mask, margin):
        moved = hand_sel[mask]
        static = hand_sel[~mask]
        d, _ = NearestIndex(hv[moved]).query(self.obj.vertices, max_distance=self.c_rad + margin)
        obj_idx = np.flatnonzero(np.isfinite(d))
        obj_pts = self.obj.vertices[obj_idx]
        if len(static) and len(obj_idx):
            d_static, _ = NearestIndex(hv[static]).query(obj_pts, max_distance=self.c_rad)
        else:
            d_static = np.full(len(obj_idx), np.inf)
        return moved, obj_idx, obj_pts, d_static

    def _partial_energy(self, q: RobotConfig, setup) -> float:
        """Energy restricted to the moved vertices and the object vertices they can reach."""
        moved, obj_idx, obj_pts, d_static = setup
        hv = self.hand_vertices(q)[moved]
        d_hand, idx = self.obj_index.query(hv, max_distance=self.reach)
        c_hand = _values(np.where(d_hand <= self.c_rad, d_hand, np.inf), self.c_rad)
        e = float(np.abs(c_hand - self.target_hand[moved]).sum())
        if len(obj_idx):
            d_m, _ = NearestIndex(hv).query(obj_pts, max_distance=self.c_rad)
            c_obj = _values(np.minimum(d_m, d_static), self.c_rad)
            e += float(np.abs(c_obj - self.target_object[obj_idx]).sum())
        if self.penetration_weight > 0:
            near = idx >= 0
            if np.any(near):
                j = idx[near]
                signed = np.einsum("ij,ij->i", hv[near] - self.obj.vertices[j], self.obj_normals[j])
                e += self.penetration_weight * float(np.maximum(0.0, -signed).sum())
        return e


def contact_energy(model: RobotModel, q: RobotConfig, obj: TriMesh, targets: Tuple, c_rad: float = DEFAULT_C_RAD,
                   penetration_weight: float = DEFAULT_PENETRATION_WEIGHT) -> float:
    """Sum of absolute contact-map errors on both meshes plus weighted penetration depth."""
    return ContactProblem(model, obj, targets[0], targets[1], c_rad, penetration_weight).energy(q)


def mesh_alignment_energy(hand: TriMesh, obj: TriMesh, targets: Tuple, c_rad: float = DEFAULT_C_RAD,
                          penetration_weight: float = 0.0) -> float:
    """Same energy for two fixed meshes (no robot model involved)."""
    th = np.asarray(getattr(targets[0], "values", targets[0]), dtype=float)
    to = np.asarray(getattr(targets[1], "values", targets[1]), dtype=float)
    if len(th) != len(hand.vertices) or len(to) != len(obj.vertices):
        raise DimensionMismatch("target lengths must match mesh vertex counts")
    c_hand = contact_map(hand, obj, c_rad).values
    c_obj = contact_map(obj, hand, c_rad).values
    e = float(np.abs(c_obj - to).sum() + np.abs(c_hand - th).sum())
    if penetration_weight > 0:
        e += penetration_weight * float(penetration_depths(hand.vertices, obj).sum())
    return e


def optimize_contact(model: RobotModel, q_init: RobotConfig, obj: TriMesh, targets: Tuple,
                     c_rad: float = DEFAULT_C_RAD, penetration_weight: float = DEFAULT_PENETRATION_WEIGHT,
                     max_iters: int = 100) -> Tuple[RobotConfig, List[float]]:
    """Gradient descent with Armijo backtracking on the contact alignment energy.

    Returns the refined configuration and the energy after each accepted step
    (the first entry is the initial energy).
    """
    problem = ContactProblem(model, obj, targets[0], targets[1], c_rad, penetration_weight)
    model.check_config(q_init)
    q = q_init
    energy = problem.energy(q)
    trace = [energy]
    # u = [t, L*omega, L*theta] puts all coordinates in metres
    scale = np.concatenate([np.ones(3), np.full(model.dof - 3, 1.0 / CHAR_LENGTH ** 2)])
    step_len = INITIAL_STEP
    for it in range(max_iters):
        if energy <= 0.0:
            break
        g = problem.gradient(q)
        gu = g * np.sqrt(scale)
        gnorm2 = float(gu @ gu)
        if gnorm2 == 0.0:
            break
        direction = -g * scale  # raw-coordinate step for alpha = 1
        alpha = step_len / float(np.abs(gu).max())
        accepted = False
        for _ in range(MAX_BACKTRACKS):
            cand = q.retract(alpha * direction)
            cand = cand.with_joints(model.clamp(cand.joint_angles))
            e = problem.energy(cand)
            if e <= energy - ARMIJO_C * alpha * gnorm2 and e < energy:
                accepted = True
                break
            alpha *= SHRINK
        if not accepted:
            log.debug("line search failed at iteration %d", it)
            break
        q, energy = cand, e
        trace.append(energy)
        step_len = min(2.0 * alpha * float(np.abs(gu).max()), INITIAL_STEP)
    return q, trace


def heuristic_targets(model: RobotModel, q: RobotConfig, obj: TriMesh, c_rad: float = DEFAULT_C_RAD,
                      fingertips: Optional[Sequence[str]] = None, k: int = 5):
    """Fingertip vertices within ``3 * c_rad`` of the object get hand target 1; the ``k``
    nearest object vertices of each of them get object target 1."""
    tips = set(fingertips if fingertips is not None else model.leaf_links())
    hand = robot_mesh_at(model, q)
    vlinks = model.vertex_links()
    tip_mask = np.isin(vlinks, [model.link_index[n] for n in tips])
    obj_index = NearestIndex(obj.vertices)
    d, _ = obj_index.query(hand.vertices)
    hot = tip_mask & (d < 3.0 * c_rad)
    t_hand = hot.astype(float)
    t_obj = np.zeros(len(obj.vertices))
    if np.any(hot):
        kk = min(k, len(obj.vertices))
        _, nn = cKDTree(obj_index.target).query(hand.vertices[hot], k=kk)
        t_obj[np.asarray(nn).ravel()] = 1.0
    return ContactMap(t_hand, c_rad), ContactMap(t_obj, c_rad)


def fingertip_contact(model: RobotModel, q: RobotConfig, obj: TriMesh, c_rad: float = DEFAULT_C_RAD,
                      fingertips: Optional[Sequence[str]] = None) -> dict:
    """Largest hand contact value on each fingertip link."""
    tips = list(fingertips if fingertips is not None else model.leaf_links())
    hand = robot_mesh_at(model, q)
    c = contact_map(hand, obj, c_rad).values
    vlinks = model.vertex_links()
    return {n: float(c[vlinks == model.link_index[n]].max()) for n in tips}


def refine_window(model: RobotModel, traj, obj: TriMesh, object_id: str, targets: Optional[Tuple] = None,
                  c_rad: float = DEFAULT_C_RAD, penetration_weight: float = DEFAULT_PENETRATION_WEIGHT,
                  max_iters: int = 100, fingertips: Optional[Sequence[str]] = None):
    """Optimize every frame of the grasp window ``[t1, t2]`` independently.

    ``targets`` applies to all frames; when omitted, :func:`heuristic_targets` is
    evaluated per frame. ``obj`` is given in the object frame. Returns the refined
    trajectory and ``{frame: energy_trace}``.
    """
    if not traj.marked:
        raise UnmarkedTrajectory("contact refinement needs stage marks t1, t2")
    configs = list(traj.configs)
    traces = {}
    for k in range(traj.t1, traj.t2 + 1):
        obj_world = obj.transformed(traj.object_pose(k, object_id))
        tg = targets if targets is not None else heuristic_targets(model, configs[k], obj_world, c_rad, fingertips)
        configs[k], traces[k] = optimize_contact(model, configs[k], obj_world, tg, c_rad, penetration_weight, max_iters)
    return Trajectory(traj.times, configs, traj.objects, traj.joint_names, traj.t1, traj.t2), traces
