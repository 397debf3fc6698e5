"""URDF-subset robot hand model, forward kinematics and posed geometry."""

from __future__ import annotations

import math
import warnings
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import (
    CyclicKinematics,
    DimensionMismatch,
    MalformedXml,
    MissingGeometry,
    MissingLink,
    NonUnitAxis,
)
from .geom import (
    PointCloud,
    RigidTransform,
    TriMesh,
    box_mesh,
    cylinder_mesh,
    load_obj,
    sample_surface,
    sphere_mesh,
)

JOINT_TYPES = ("revolute", "continuous", "prismatic", "fixed")
LIMIT_TOL = 1e-9
_IGNORED_TAGS = {"transmission", "gazebo", "material"}


class JointLimitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Geometry:
    kind: str  # box | sphere | cylinder | mesh
    origin: RigidTransform
    size: tuple = ()
    radius: float = 0.0
    length: float = 0.0
    filename: str = ""
    scale: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class Link:
    name: str
    geometries: tuple = ()


@dataclass(frozen=True)
class Joint:
    name: str
    type: str
    parent: str
    child: str
    origin: RigidTransform
    axis: np.ndarray
    lower: float = -math.inf
    upper: float = math.inf

    @property
    def movable(self) -> bool:
        return self.type != "fixed"


@dataclass(frozen=True)
class RobotConfig:
    """Wrist pose plus one value per movable joint (document order)."""

    wrist: RigidTransform
    joint_angles: np.ndarray

    def __post_init__(self):
        a = np.array(self.joint_angles, dtype=float).reshape(-1)
        a.setflags(write=False)
        object.__setattr__(self, "joint_angles", a)

    @property
    def dof(self) -> int:
        return 6 + len(self.joint_angles)

    def with_wrist(self, wrist: RigidTransform) -> "RobotConfig":
        return RobotConfig(wrist, self.joint_angles)

    def with_joints(self, joints) -> "RobotConfig":
        return RobotConfig(self.wrist, joints)

    def as_vector(self) -> np.ndarray:
        """``[tx, ty, tz, rx, ry, rz, joints...]`` with the wrist rotation as a rotation vector."""
        return np.concatenate([self.wrist.translation, self.wrist.rotvec(), self.joint_angles])

    @classmethod
    def from_vector(cls, v) -> "RobotConfig":
        v = np.asarray(v, dtype=float)
        return cls(RigidTransform.from_rotvec(v[3:6], v[:3]), v[6:])

    def retract(self, delta) -> "RobotConfig":
        """Apply a local increment ``[dt, dω, dθ]``: translation added, rotation left-multiplied."""
        delta = np.asarray(delta, dtype=float)
        rot = RigidTransform.from_rotvec(delta[3:6])
        q = rot.compose(RigidTransform(self.wrist.rotation))
        wrist = RigidTransform(q.rotation, self.wrist.translation + delta[:3])
        return RobotConfig(wrist, self.joint_angles + delta[6:])

    def to_dict(self) -> dict:
        return {"wrist": self.wrist.to_dict(), "joints": [float(v) for v in self.joint_angles]}

    @classmethod
    def from_dict(cls, d: dict) -> "RobotConfig":
        return cls(RigidTransform.from_dict(d["wrist"]), d["joints"])


def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


class RobotModel:
    """Parsed kinematic tree. Immutable after construction."""

    def __init__(self, links: Sequence[Link], joints: Sequence[Joint], root: str,
                 base_dir: Optional[Path] = None, warnings_list: Optional[List[str]] = None,
                 name: str = "robot"):
        self.name = name
        self.links = tuple(links)
        self.joints = tuple(joints)
        self.root = root
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self.warnings = list(warnings_list or [])
        self.link_index = {l.name: i for i, l in enumerate(self.links)}
        self.active_joints = [j for j in self.joints if j.movable]
        self.joint_names = [j.name for j in self.active_joints]
        self._active_index = {j.name: i for i, j in enumerate(self.active_joints)}
        self._child_joint = {j.child: j for j in self.joints}
        self._order = self._topological_order()
        # active-joint indices between each link and the root
        self._chain = {}
        for lname in self._order:
            j = self._child_joint.get(lname)
            if j is None:
                self._chain[lname] = []
            else:
                up = list(self._chain[j.parent])
                if j.movable:
                    up.append(self._active_index[j.name])
                self._chain[lname] = up
        self._mesh_cache = None
        self._sample_cache: Dict[tuple, tuple] = {}

    @property
    def n_joints(self) -> int:
        return len(self.active_joints)

    @property
    def dof(self) -> int:
        return 6 + self.n_joints

    def _topological_order(self) -> List[str]:
        children: Dict[str, List[Joint]] = {}
        for j in self.joints:
            children.setdefault(j.parent, []).append(j)
        order, stack = [], [self.root]
        while stack:
            name = stack.pop()
            order.append(name)
            for j in reversed(children.get(name, [])):
                stack.append(j.child)
        return order

    def zero_config(self, wrist: Optional[RigidTransform] = None) -> RobotConfig:
        return RobotConfig(wrist or RigidTransform.identity(), np.zeros(self.n_joints))

    def lower_limits(self) -> np.ndarray:
        return np.array([j.lower for j in self.active_joints], dtype=float)

    def upper_limits(self) -> np.ndarray:
        return np.array([j.upper for j in self.active_joints], dtype=float)

    def clamp(self, joints) -> np.ndarray:
        return np.clip(np.asarray(joints, dtype=float), self.lower_limits(), self.upper_limits())

    def leaf_links(self) -> List[str]:
        parents = {j.parent for j in self.joints}
        return [l.name for l in self.links if l.name not in parents]

    def chain(self, link: str) -> List[int]:
        """Indices of the movable joints between ``link`` and the root."""
        return self._chain[link]

    # --- kinematics -------------------------------------------------------

    def check_config(self, q: RobotConfig) -> None:
        if len(q.joint_angles) != self.n_joints:
            raise DimensionMismatch(f"expected {self.n_joints} joint values, got {len(q.joint_angles)}")

    def fk_matrices(self, q: RobotConfig) -> Dict[str, np.ndarray]:
        """Link name -> 4x4 world pose."""
        self.check_config(q)
        out = {self.root: q.wrist.as_matrix()}
        for lname in self._order[1:]:
            j = self._child_joint[lname]
            m = out[j.parent] @ j.origin.as_matrix()
            if j.movable:
                v = q.joint_angles[self._active_index[j.name]]
                motion = np.eye(4)
                if j.type == "prismatic":
                    motion[:3, 3] = j.axis * v
                else:
                    motion[:3, :3] = _axis_rotation(j.axis, v)
                m = m @ motion
            out[lname] = m
        return out

    def joint_frames(self, q: RobotConfig, fk: Optional[Dict[str, np.ndarray]] = None):
        """World axis and origin of every movable joint, in active-joint order."""
        fk = fk if fk is not None else self.fk_matrices(q)
        axes = np.zeros((self.n_joints, 3))
        origins = np.zeros((self.n_joints, 3))
        for i, j in enumerate(self.active_joints):
            m = fk[j.parent] @ j.origin.as_matrix()
            axes[i] = m[:3, :3] @ j.axis
            origins[i] = m[:3, 3]
        return axes, origins

    # --- geometry ---------------------------------------------------------

    def _geometry_mesh(self, g: Geometry) -> TriMesh:
        if g.kind == "box":
            m = box_mesh(g.size)
        elif g.kind == "sphere":
            m = sphere_mesh(g.radius, 20, 20)
        elif g.kind == "cylinder":
            m = cylinder_mesh(g.radius, g.length, 24)
        elif g.kind == "mesh":
            path = Path(g.filename.replace("package://", ""))
            if not path.is_absolute() and self.base_dir is not None:
                path = self.base_dir / path
            if not path.exists():
                raise MissingGeometry(f"mesh file not found: {path}")
            if path.suffix.lower() != ".obj":
                raise MissingGeometry(f"only OBJ meshes are supported: {path}")
            base = load_obj(path)
            m = TriMesh(base.vertices * np.asarray(g.scale, dtype=float), base.faces, validate=False)
        else:
            raise MissingGeometry(f"unsupported geometry {g.kind}")
        return m.transformed(g.origin)

    def link_meshes(self) -> List[TriMesh]:
        """Per-link meshes in the link frame, declaration order."""
        if self._mesh_cache is None:
            meshes = []
            for l in self.links:
                meshes.append(TriMesh.concatenate([self._geometry_mesh(g) for g in l.geometries]))
            self._mesh_cache = meshes
        return self._mesh_cache

    def vertex_links(self) -> np.ndarray:
        """Link index for every vertex of :func:`robot_mesh_at` output."""
        return np.concatenate([np.full(len(m.vertices), i) for i, m in enumerate(self.link_meshes())]).astype(np.int64)

    def canonical_samples(self, n: int, seed: int):
        """Link-frame surface samples, drawn once per ``(n, seed)``."""
        key = (int(n), int(seed))
        if key not in self._sample_cache:
            meshes = self.link_meshes()
            union = TriMesh.concatenate(meshes)
            if len(union.faces) == 0:
                raise MissingGeometry("robot has no geometry to sample")
            face_link = np.concatenate([np.full(len(m.faces), i) for i, m in enumerate(meshes)]).astype(np.int64)
            pc = sample_surface(union, n, seed)
            links = face_link[pc.faces]
            local = pc.points.copy()
            local.setflags(write=False)
            links.setflags(write=False)
            self._sample_cache[key] = (local, links, pc.faces)
        return self._sample_cache[key]


# --- parsing --------------------------------------------------------------


def _floats(text: Optional[str], n: int, default) -> tuple:
    if text is None:
        return tuple(default)
    vals = [float(x) for x in text.split()]
    if len(vals) != n:
        raise MalformedXml(f"expected {n} numbers, got {text!r}")
    return tuple(vals)


def _origin(el) -> RigidTransform:
    o = el.find("origin") if el is not None else None
    if o is None:
        return RigidTransform.identity()
    xyz = _floats(o.get("xyz"), 3, (0, 0, 0))
    rpy = _floats(o.get("rpy"), 3, (0, 0, 0))
    if rpy == (0.0, 0.0, 0.0):
        return RigidTransform.from_translation(xyz)
    return RigidTransform.from_rpy(rpy, xyz)


def _parse_geometry(el) -> Optional[Geometry]:
    geo = el.find("geometry")
    if geo is None:
        return None
    origin = _origin(el)
    for child in geo:
        if child.tag == "box":
            return Geometry("box", origin, size=_floats(child.get("size"), 3, (1, 1, 1)))
        if child.tag == "sphere":
            return Geometry("sphere", origin, radius=float(child.get("radius")))
        if child.tag == "cylinder":
            return Geometry("cylinder", origin, radius=float(child.get("radius")), length=float(child.get("length")))
        if child.tag == "mesh":
            return Geometry("mesh", origin, filename=child.get("filename", ""),
                            scale=_floats(child.get("scale"), 3, (1, 1, 1)))
    return None


def parse_urdf(text: str, base_dir=None) -> RobotModel:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from exc
    if root.tag != "robot":
        raise MalformedXml(f"root element is <{root.tag}>, expected <robot>")
    notes: List[str] = []
    links: List[Link] = []
    joints: List[Joint] = []
    for el in root:
        if el.tag == "link":
            name = el.get("name")
            if not name:
                raise MalformedXml("link without name")
            # collision preferred, visual as fallback
            geoms = [g for g in (_parse_geometry(c) for c in el.findall("collision")) if g is not None]
            if not geoms:
                geoms = [g for g in (_parse_geometry(c) for c in el.findall("visual")) if g is not None]
            links.append(Link(name, tuple(geoms)))
        elif el.tag == "joint":
            name = el.get("name")
            jtype = el.get("type")
            if jtype not in JOINT_TYPES:
                if jtype == "floating" or jtype == "planar":
                    notes.append(f"joint {name}: type {jtype} treated as fixed")
                    jtype = "fixed"
                else:
                    raise MalformedXml(f"joint {name}: unknown type {jtype!r}")
            parent = el.find("parent")
            child = el.find("child")
            if parent is None or child is None:
                raise MalformedXml(f"joint {name}: missing parent or child")
            axis = np.array(_floats(el.find("axis").get("xyz") if el.find("axis") is not None else None,
                                    3, (1, 0, 0)), dtype=float)
            norm = np.linalg.norm(axis)
            if norm < 1e-12:
                raise NonUnitAxis(f"joint {name}: zero-length axis")
            if abs(norm - 1.0) > 1e-9:
                notes.append(f"joint {name}: axis normalized from norm {norm:.6g}")
                axis = axis / norm
            lower, upper = -math.inf, math.inf
            lim = el.find("limit")
            if jtype in ("revolute", "prismatic") and lim is not None:
                lower = float(lim.get("lower", "0"))
                upper = float(lim.get("upper", "0"))
                if lower > upper:
                    raise MalformedXml(f"joint {name}: lower limit {lower} > upper {upper}")
            if el.find("mimic") is not None:
                notes.append(f"joint {name}: <mimic> ignored")
            if el.find("dynamics") is not None:
                notes.append(f"joint {name}: <dynamics> ignored")
            axis.setflags(write=False)
            joints.append(Joint(name, jtype, parent.get("link"), child.get("link"), _origin(el), axis, lower, upper))
        elif el.tag in _IGNORED_TAGS:
            notes.append(f"<{el.tag}> ignored")
        else:
            notes.append(f"unsupported element <{el.tag}> ignored")

    names = {l.name for l in links}
    if len(names) != len(links):
        raise MalformedXml("duplicate link names")
    seen_children = set()
    for j in joints:
        for ref in (j.parent, j.child):
            if ref not in names:
                raise MissingLink(f"joint {j.name} references unknown link {ref!r}")
        if j.child in seen_children:
            raise CyclicKinematics(f"link {j.child} has more than one parent joint")
        seen_children.add(j.child)
    roots = [l.name for l in links if l.name not in seen_children]
    if not roots:
        raise CyclicKinematics("no root link: the joint graph contains a cycle")
    parent_of = {j.child: j.parent for j in joints}
    for start in names:
        cur, steps = start, 0
        while cur in parent_of:
            cur = parent_of[cur]
            steps += 1
            if steps > len(names):
                raise CyclicKinematics(f"cycle through link {start}")
    if len(roots) > 1:
        raise MalformedXml(f"disconnected kinematic tree, roots: {roots}")
    return RobotModel(links, joints, roots[0], base_dir=base_dir, warnings_list=notes,
                      name=root.get("name", "robot"))


def load_urdf(path) -> RobotModel:
    path = Path(path)
    return parse_urdf(path.read_text(), base_dir=path.parent)


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in v)


def _origin_xml(t: RigidTransform) -> str:
    return f'<origin xyz="{_fmt(t.translation)}" rpy="{_fmt(t.rpy())}"/>'


def format_urdf(model: RobotModel) -> str:
    """Serialize the supported subset back to URDF text."""
    out = [f'<robot name="{model.name}">']
    for l in model.links:
        out.append(f'  <link name="{l.name}">')
        for g in l.geometries:
            if g.kind == "box":
                shape = f'<box size="{_fmt(g.size)}"/>'
            elif g.kind == "sphere":
                shape = f'<sphere radius="{float(g.radius)!r}"/>'
            elif g.kind == "cylinder":
                shape = f'<cylinder radius="{float(g.radius)!r}" length="{float(g.length)!r}"/>'
            else:
                shape = f'<mesh filename="{g.filename}" scale="{_fmt(g.scale)}"/>'
            out.append(f"    <collision>{_origin_xml(g.origin)}<geometry>{shape}</geometry></collision>")
        out.append("  </link>")
    for j in model.joints:
        out.append(f'  <joint name="{j.name}" type="{j.type}">')
        out.append(f'    <parent link="{j.parent}"/><child link="{j.child}"/>')
        out.append(f"    {_origin_xml(j.origin)}")
        out.append(f'    <axis xyz="{_fmt(j.axis)}"/>')
        if j.type in ("revolute", "prismatic") and np.isfinite(j.lower):
            out.append(f'    <limit lower="{float(j.lower)!r}" upper="{float(j.upper)!r}" effort="1" velocity="1"/>')
        out.append("  </joint>")
    out.append("</robot>")
    return "\n".join(out) + "\n"


# --- public operations ----------------------------------------------------


def forward_kinematics(model: RobotModel, q: RobotConfig) -> Dict[str, RigidTransform]:
    """World pose of every link. Out-of-limit joint values only raise a warning."""
    model.check_config(q)
    lo, hi = model.lower_limits(), model.upper_limits()
    bad = (q.joint_angles < lo - LIMIT_TOL) | (q.joint_angles > hi + LIMIT_TOL)
    if np.any(bad):
        names = [model.joint_names[i] for i in np.flatnonzero(bad)]
        warnings.warn(f"joint limits exceeded: {names}", JointLimitWarning, stacklevel=2)
    return {name: RigidTransform.from_matrix(m) for name, m in model.fk_matrices(q).items()}


def _posed_vertices(model: RobotModel, fk: Dict[str, np.ndarray]) -> np.ndarray:
    parts = []
    for l, mesh in zip(model.links, model.link_meshes()):
        if len(mesh.vertices):
            m = fk[l.name]
            parts.append(mesh.vertices @ m[:3, :3].T + m[:3, 3])
    return np.vstack(parts) if parts else np.zeros((0, 3))


def robot_mesh_at(model: RobotModel, q: RobotConfig) -> TriMesh:
    """Union of all link meshes posed by forward kinematics, links in declaration order."""
    meshes = model.link_meshes()
    if not any(len(m.faces) for m in meshes):
        raise MissingGeometry("robot has no link geometry")
    faces = TriMesh.concatenate(meshes).faces
    return TriMesh(_posed_vertices(model, model.fk_matrices(q)), faces, validate=False)


def robot_points_at(model: RobotModel, q: RobotConfig, n: int, seed: int) -> PointCloud:
    """Surface samples drawn once in link frames and carried by forward kinematics.

    Point ``i`` always belongs to the same link and sits at the same link-local
    coordinates, whatever ``q`` is.
    """
    local, links, faces = model.canonical_samples(n, seed)
    fk = model.fk_matrices(q)
    pts = np.empty_like(local)
    for li, l in enumerate(model.links):
        sel = links == li
        if np.any(sel):
            m = fk[l.name]
            pts[sel] = local[sel] @ m[:3, :3].T + m[:3, 3]
    return PointCloud(pts, faces=faces, links=links)


def link_points_world(model: RobotModel, fk: Dict[str, np.ndarray], links: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Transport link-local points (with per-point link index) to the world frame."""
    out = np.empty_like(local)
    for li in np.unique(links):
        sel = links == li
        m = fk[model.links[li].name]
        out[sel] = local[sel] @ m[:3, :3].T + m[:3, 3]
    return out


def point_jacobian(model: RobotModel, q: RobotConfig, links: np.ndarray, world: np.ndarray,
                   fk: Optional[Dict[str, np.ndarray]] = None) -> np.ndarray:
    """Jacobian ``(N, 3, 6 + n)`` of world points w.r.t. the local increment used by
    :meth:`RobotConfig.retract`."""
    fk = fk if fk is not None else model.fk_matrices(q)
    axes, origins = model.joint_frames(q, fk)
    n = len(world)
    J = np.zeros((n, 3, model.dof))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    r = world - q.wrist.translation
    # d(ω x r)/dω = -[r]x
    J[:, 0, 4], J[:, 0, 5] = r[:, 2], -r[:, 1]
    J[:, 1, 3], J[:, 1, 5] = -r[:, 2], r[:, 0]
    J[:, 2, 3], J[:, 2, 4] = r[:, 1], -r[:, 0]
    for li in np.unique(links):
        sel = np.flatnonzero(links == li)
        for ji in model.chain(model.links[li].name):
            jt = model.active_joints[ji]
            if jt.type == "prismatic":
                J[sel, :, 6 + ji] = axes[ji]
            else:
                J[sel, :, 6 + ji] = np.cross(axes[ji], world[sel] - origins[ji])
    return J
