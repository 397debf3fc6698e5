"""Grasp recovery from robot-object distance matrices and quasi-static stability checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateAnchors, DimensionMismatch, FormatError, RankDeficientFit
from .geom import NearestIndex, PointCloud, RigidTransform, TriMesh, as_points
from .retarget import PointProblem, solve_points
from .robot import RobotConfig, RobotModel

DM_MAGIC = b"VMDM1\n"
GRAVITY = 9.81
DEFAULT_MU = 0.5
DEFAULT_CONE_EDGES = 8
DEFAULT_CONTACT_EPS = 0.002
DEFAULT_DISTURBANCE_SCALE = 1.0
DISTURBANCE_FACTOR = 0.5
DIRECTIONS = (("+x", (1.0, 0.0, 0.0)), ("-x", (-1.0, 0.0, 0.0)),
              ("+y", (0.0, 1.0, 0.0)), ("-y", (0.0, -1.0, 0.0)),
              ("+z", (0.0, 0.0, 1.0)), ("-z", (0.0, 0.0, -1.0)))
# kept for reference in reports; the check itself is static
SIM_STEPS = 300
DISPLACEMENT_THRESHOLD = 0.03


@dataclass
class DistanceMatrix:
    """Dense robot-point by object-point distances in meters."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise DimensionMismatch(f"distance matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("distances must be finite and nonnegative")
        self.values = v

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def between(cls, robot_points, object_points) -> "DistanceMatrix":
        r, o = as_points(robot_points), as_points(object_points)
        diff = r[:, None, :] - o[None, :, :]
        return cls(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)))

    def to_bytes(self) -> bytes:
        nr, no = self.shape
        return DM_MAGIC + f"{nr} {no}\n".encode() + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DistanceMatrix":
        if not data.startswith(DM_MAGIC):
            raise FormatError("missing VMDM1 magic")
        rest = data[len(DM_MAGIC):]
        nl = rest.find(b"\n")
        try:
            nr, no = (int(x) for x in rest[:nl].split())
        except ValueError as exc:
            raise FormatError("bad VMDM1 header") from exc
        body = rest[nl + 1:]
        if len(body) != 4 * nr * no:
            raise FormatError(f"expected {4 * nr * no} payload bytes, got {len(body)}")
        return cls(np.frombuffer(body, dtype="<f4").reshape(nr, no).astype(float))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DistanceMatrix":
        return cls.from_bytes(Path(path).read_bytes())


def multilaterate_points(D, object_points) -> Tuple[PointCloud, np.ndarray]:
    """Locate every robot point from its distances to the object points.

    Subtracting the mean of the sphere equations ``|x - a_j|^2 = d_j^2`` removes
    the quadratic term and leaves the linear system
    ``2 (a_j - a_mean) . x = (|a_j|^2 - mean|a|^2) - (d_j^2 - mean d^2)``,
    solved in the least-squares sense for all rows at once.
    Returns the positions and the per-point RMS range residual.
    """
    d = D.values if isinstance(D, DistanceMatrix) else np.asarray(D, dtype=float)
    anchors = as_points(object_points)
    if d.ndim != 2 or d.shape[1] != len(anchors):
        raise DimensionMismatch(f"distance matrix {d.shape} does not match {len(anchors)} anchors")
    if len(anchors) < 4:
        raise DegenerateAnchors("need at least 4 anchors")
    centre = anchors.mean(axis=0)
    A = 2.0 * (anchors - centre)
    if np.linalg.matrix_rank(A, tol=1e-9 * max(1.0, float(np.abs(A).max()))) < 3:
        raise DegenerateAnchors("anchors are coplanar or collinear")
    sq = np.einsum("ij,ij->i", anchors, anchors)
    d2 = d * d
    rhs = (sq - sq.mean())[:, None] - (d2 - d2.mean(axis=1, keepdims=True)).T
    # solving in centred coordinates keeps the system well scaled
    rhs -= (A @ centre)[:, None]
    y, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    x = y.T + centre
    diff = x[:, None, :] - anchors[None, :, :]
    rng = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    residuals = np.sqrt(np.mean((rng - d) ** 2, axis=1))
    return PointCloud(x), residuals


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking ``source`` onto ``target``."""
    src, dst = np.asarray(source, dtype=float), np.asarray(target, dtype=float)
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, sign]) @ U.T
    return RigidTransform.from_rotation_matrix(R, cd - R @ cs)


def _centred_rank(p: np.ndarray) -> int:
    if len(p) < 3:
        return 0
    c = p - p.mean(axis=0)
    return int(np.linalg.matrix_rank(c, tol=1e-9 * max(1e-3, float(np.abs(c).max()))))


@dataclass
class GraspResult:
    placed_cloud: PointCloud
    wrist_pose: RigidTransform
    config: RobotConfig
    residuals: np.ndarray  # multilateration residual per point (m); zeros when not applicable
    fit_rms: float
    converged: bool = True

    def to_dict(self) -> dict:
        return {"config": self.config.to_dict(), "wrist_pose": self.wrist_pose.to_dict(),
                "fit_rms": self.fit_rms, "converged": self.converged,
                "max_multilateration_residual": float(np.max(self.residuals)) if len(self.residuals) else 0.0,
                "placed_points": self.placed_cloud.points.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _local_coordinates(model: RobotModel, canonical: PointCloud, q_canonical: RobotConfig) -> np.ndarray:
    fk = model.fk_matrices(q_canonical)
    local = np.empty_like(canonical.points)
    for li in np.unique(canonical.links):
        sel = canonical.links == li
        m = fk[model.links[li].name]
        local[sel] = (canonical.points[sel] - m[:3, 3]) @ m[:3, :3]
    return local


def fit_grasp_config(model: RobotModel, placed, canonical: PointCloud,
                     q_init: Optional[RobotConfig] = None,
                     q_canonical: Optional[RobotConfig] = None,
                     residuals: Optional[np.ndarray] = None) -> GraspResult:
    """Find the configuration whose transported canonical cloud best matches ``placed``.

    ``canonical`` must carry per-point link indices and be posed at ``q_canonical``
    (zero configuration at the identity wrist by default). The wrist is seeded by
    a rigid fit on the root-link points when they span 3-D, otherwise on all
    points, then every coordinate is refined by damped least squares.
    """
    placed_pts = as_points(placed)
    if canonical.links is None:
        raise ValueError("canonical cloud needs per-point link indices")
    if len(placed_pts) != len(canonical):
        raise DimensionMismatch(f"{len(placed_pts)} placed points vs {len(canonical)} canonical points")
    if _centred_rank(placed_pts) < 3:
        raise RankDeficientFit("placed cloud does not span three dimensions")
    q_canonical = q_canonical if q_canonical is not None else model.zero_config()
    root = canonical.links == model.link_index[model.root]
    sel = root if _centred_rank(canonical.points[root]) == 3 else np.ones(len(placed_pts), bool)
    T = kabsch(canonical.points[sel], placed_pts[sel])
    joints = q_init.joint_angles if q_init is not None else q_canonical.joint_angles
    start = RobotConfig(T.compose(q_canonical.wrist), joints)
    local = _local_coordinates(model, canonical, q_canonical)
    problem = PointProblem(model, canonical.links, local, placed_pts, np.ones(len(placed_pts)))
    res = solve_points(problem, start)
    rms = float(np.sqrt(res.residual / len(placed_pts)))
    resid = np.zeros(len(placed_pts)) if residuals is None else np.asarray(residuals, dtype=float)
    return GraspResult(PointCloud(placed_pts), res.config.wrist, res.config, resid, rms, res.converged)


def grasp_from_distances(model: RobotModel, D, object_points, canonical: PointCloud,
                         q_init: Optional[RobotConfig] = None) -> GraspResult:
    """Multilaterate the robot cloud in the object frame, then fit the configuration."""
    placed, resid = multilaterate_points(D, object_points)
    return fit_grasp_config(model, placed, canonical, q_init, residuals=resid)


# --- contacts and stability -----------------------------------------------


def extract_contacts(robot_mesh: TriMesh, obj: TriMesh, eps: float = DEFAULT_CONTACT_EPS,
                     merge: bool = True):
    """Object vertices within ``eps`` of a robot vertex, one contact per cluster.

    Vertices are grouped into connected components under a ``2 * eps`` radius.
    Each cluster is represented by its vertex nearest the robot, with the outward
    vertex normal of the object there. With ``merge=False`` every vertex of every
    cluster is returned instead, which models a finite contact patch: two point
    contacts alone cannot resist torque about the line joining them.
    Returns ``[(point, normal), ...]``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(robot_mesh.vertices) == 0 or len(obj.vertices) == 0:
        return []
    d, _ = NearestIndex(robot_mesh.vertices).query(obj.vertices, max_distance=eps)
    near = np.flatnonzero(d < eps)
    if len(near) == 0:
        return []
    pts = obj.vertices[near]
    pairs = cKDTree(pts).query_pairs(2.0 * eps, output_type="ndarray")
    n = len(near)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) \
        else coo_matrix((n, n))
    _, labels = connected_components(graph, directed=False)
    normals = obj.vertex_normals(outward=True)
    out = []
    # order clusters by their smallest vertex index for determinism
    first = {}
    for k, lab in enumerate(labels):
        first.setdefault(lab, k)
    for lab in sorted(first, key=first.get):
        members = np.flatnonzero(labels == lab)
        if not merge:
            out.extend((obj.vertices[near[k]].copy(), normals[near[k]].copy()) for k in members)
            continue
        best = members[np.argmin(d[near[members]])]
        vi = near[best]
        out.append((obj.vertices[vi].copy(), normals[vi].copy()))
    return out


def _tangent_basis(n: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, helper)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def friction_cone_edges(normal, mu: float, m: int = DEFAULT_CONE_EDGES) -> np.ndarray:
    """``(m, 3)`` edge directions of the pyramid approximating the cone about ``-normal``.

    Forces push into the object, so the cone axis is the inward normal.
    """
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    t1, t2 = _tangent_basis(n)
    th = 2.0 * np.pi * np.arange(m) / m
    return -n + mu * (np.cos(th)[:, None] * t1 + np.sin(th)[:, None] * t2)


def contact_wrench_matrix(contacts, center, mu: float, m: int = DEFAULT_CONE_EDGES) -> np.ndarray:
    """Columns are the unit-coefficient wrenches ``[f; (p - c) x f]`` of every cone edge."""
    center = np.asarray(center, dtype=float)
    cols = []
    for p, n in contacts:
        e = friction_cone_edges(n, mu, m)
        r = np.asarray(p, dtype=float) - center
        cols.append(np.hstack([e, np.cross(r, e)]))
    return np.vstack(cols).T if cols else np.zeros((6, 0))


def wrench_feasible(W: np.ndarray, external: np.ndarray) -> bool:
    """Is there ``c >= 0`` with ``W c + external = 0``? Solved as a linear program."""
    if W.shape[1] == 0:
        return bool(np.allclose(external, 0.0))
    scale = max(1.0, float(np.abs(external).max()))
    res = linprog(np.ones(W.shape[1]), A_eq=W / scale, b_eq=-external / scale,
                  bounds=(0, None), method="highs")
    return res.status == 0


@dataclass
class StabilityReport:
    resisted: dict
    contacts: List[Tuple[np.ndarray, np.ndarray]]
    mu: float
    disturbance_newtons: float
    mass: float
    center: np.ndarray
    cone_edges: int = DEFAULT_CONE_EDGES
    notes: dict = field(default_factory=lambda: {"sim_steps": SIM_STEPS,
                                                 "displacement_threshold_m": DISPLACEMENT_THRESHOLD})

    @property
    def success(self) -> bool:
        return bool(self.resisted) and all(self.resisted.values())

    def to_dict(self) -> dict:
        return {"success": self.success, "resisted": dict(self.resisted), "mu": self.mu,
                "disturbance_newtons": self.disturbance_newtons, "mass": self.mass,
                "gravity": GRAVITY, "center": list(map(float, self.center)), "cone_edges": self.cone_edges,
                "contacts": [{"point": list(map(float, p)), "normal": list(map(float, n))}
                             for p, n in self.contacts],
                "notes": self.notes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def stability_check(contacts: Sequence, object_mass: float, mu: float = DEFAULT_MU,
                    disturbance_scale: float = DEFAULT_DISTURBANCE_SCALE,
                    friction_cone_edges_m: int = DEFAULT_CONE_EDGES,
                    center=None) -> StabilityReport:
    """Quasi-static check against gravity plus a push along each of six axes.

    The push has magnitude ``0.5 * mass * disturbance_scale`` and, like gravity,
    acts at ``center`` (mean of the contact points when not given). A direction
    is resisted when nonnegative edge forces can cancel the resulting wrench.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    if friction_cone_edges_m < 4:
        raise ValueError("need at least 4 cone edges")
    contacts = [(np.asarray(p, dtype=float), np.asarray(n, dtype=float)) for p, n in contacts]
    if center is None:
        center = np.mean([p for p, _ in contacts], axis=0) if contacts else np.zeros(3)
    center = np.asarray(center, dtype=float)
    magnitude = DISTURBANCE_FACTOR * object_mass * disturbance_scale
    weight = np.array([0.0, 0.0, -object_mass * GRAVITY])
    W = contact_wrench_matrix(contacts, center, mu, friction_cone_edges_m)
    resisted = {}
    for name, d in DIRECTIONS:
        ext = np.concatenate([weight + magnitude * np.asarray(d), np.zeros(3)])
        resisted[name] = bool(contacts) and wrench_feasible(W, ext)
    return StabilityReport(resisted, contacts, float(mu), float(magnitude), float(object_mass), center,
                           friction_cone_edges_m)
