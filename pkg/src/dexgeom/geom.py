"""Core geometry: rigid transforms, triangle meshes, point clouds and proximity queries.

Quaternions are stored w-first, ``(w, x, y, z)``. Arrays of points are ``(N, 3)``
float64 arrays throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, EmptyTarget, FormatError, InvalidMesh

# Quaternions farther than this from unit norm are renormalized after composition.
_RENORM_TOL = 1e-12
# Below this many target points, nearest-neighbour queries are brute force.
_BRUTE_FORCE_LIMIT = 64


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n2 = float(q @ q)
    if abs(n2 - 1.0) > _RENORM_TOL:
        q = q / np.sqrt(n2)
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; result has w >= 0."""
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotvec_to_quat(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle < 1e-8:
        # second-order expansion keeps the map smooth through zero
        q = np.array([1.0 - angle * angle / 8.0, *(0.5 * v)])
        return q / np.linalg.norm(q)
    half = 0.5 * angle
    return np.array([np.cos(half), *(np.sin(half) / angle * v)])


def quat_to_rotvec(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(s, q[0])
    return angle / s * q[1:]


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class RigidTransform:
    """An element of SE(3): ``p -> R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: _frozen([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: _frozen([0.0, 0.0, 0.0]))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite transform")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "rotation", _frozen(quat_normalize(q)))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(matrix_to_quat(m[:3, :3]), m[:3, 3])

    @classmethod
    def from_rotation_matrix(cls, r: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(matrix_to_quat(r), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotvec_to_quat(rotvec), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls(np.array([np.cos(half), *(np.sin(half) * axis)]), translation)

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(translation=t)

    @classmethod
    def from_rpy(cls, rpy, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """URDF convention: fixed-axis roll about x, then pitch about y, then yaw about z."""
        r, p, y = rpy
        qx = np.array([np.cos(r / 2), np.sin(r / 2), 0.0, 0.0])
        qy = np.array([np.cos(p / 2), 0.0, np.sin(p / 2), 0.0])
        qz = np.array([np.cos(y / 2), 0.0, 0.0, np.sin(y / 2)])
        return cls(quat_mul(qz, quat_mul(qy, qx)), translation)

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def rotvec(self) -> np.ndarray:
        return quat_to_rotvec(self.rotation)

    def rpy(self) -> np.ndarray:
        r = self.rotation_matrix()
        pitch = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
        roll = np.arctan2(r[2, 1], r[2, 2])
        yaw = np.arctan2(r[1, 0], r[0, 0])
        return np.array([roll, pitch, yaw])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation_matrix().T + self.translation

    def apply_vector(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=float) @ self.rotation_matrix().T

    def inverse(self) -> "RigidTransform":
        qi = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return compose(self, other)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        dq = min(np.abs(self.rotation - other.rotation).max(), np.abs(self.rotation + other.rotation).max())
        return bool(dq <= atol and np.abs(self.translation - other.translation).max() <= atol)

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(d["q"], d["t"])


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b`` so that ``compose(a, b).apply(p) == a.apply(b.apply(p))``."""
    q = quat_normalize(quat_mul(a.rotation, b.rotation))
    t = a.rotation_matrix() @ b.translation + a.translation
    return RigidTransform(q, t)


def inverse(t: RigidTransform) -> RigidTransform:
    return t.inverse()


class TriMesh:
    """Triangle mesh with immutable vertex and face arrays."""

    def __init__(self, vertices, faces, *, validate: bool = True):
        v = np.array(vertices, dtype=float).reshape(-1, 3)
        f = np.array(faces, dtype=np.int64).reshape(-1, 3)
        if validate:
            if not np.all(np.isfinite(v)):
                raise InvalidMesh("non-finite vertex coordinates")
            if f.size:
                if f.min() < 0 or f.max() >= len(v):
                    raise InvalidMesh("face index out of range")
                if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                    raise InvalidMesh("degenerate face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        self.vertices = v
        self.faces = f

    def __len__(self):
        return len(self.vertices)

    def __repr__(self):
        return f"TriMesh(vertices={len(self.vertices)}, faces={len(self.faces)})"

    def transformed(self, t: RigidTransform) -> "TriMesh":
        return TriMesh(t.apply(self.vertices), self.faces, validate=False)

    def scaled(self, s: float, center=None) -> "TriMesh":
        c = self.centroid() if center is None else np.asarray(center, dtype=float)
        return TriMesh((self.vertices - c) * s + c, self.faces, validate=False)

    def centroid(self) -> np.ndarray:
        """Mean of the vertices."""
        return self.vertices.mean(axis=0)

    def face_cross(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def face_normals(self) -> np.ndarray:
        c = self.face_cross()
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def vertex_normals(self, outward: bool = True) -> np.ndarray:
        """Area-weighted vertex normals.

        With ``outward`` the winding is checked by majority vote of face normals
        against the vertex centroid and flipped as a whole if most faces point inward.
        """
        cross = self.face_cross()  # |cross| = 2 * area, so summing it is area weighting
        if outward and len(self.faces):
            centers = self.vertices[self.faces].mean(axis=1)
            votes = np.einsum("ij,ij->i", centers - self.centroid(), cross)
            if np.count_nonzero(votes < 0) > np.count_nonzero(votes > 0):
                cross = -cross
        acc = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(acc, self.faces[:, k], cross)
        n = np.linalg.norm(acc, axis=1, keepdims=True)
        return acc / np.where(n > 0, n, 1.0)

    @staticmethod
    def concatenate(meshes: Sequence["TriMesh"]) -> "TriMesh":
        verts, faces, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            offset += len(m.vertices)
        if not verts:
            return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriMesh(np.vstack(verts), np.vstack(faces), validate=False)


@dataclass(frozen=True)
class PointCloud:
    """Points with optional provenance: source face and source link per point."""

    points: np.ndarray
    faces: Optional[np.ndarray] = None
    links: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        p.setflags(write=False)
        object.__setattr__(self, "points", p)
        for name in ("faces", "links"):
            val = getattr(self, name)
            if val is not None:
                arr = np.array(val, dtype=np.int64).reshape(-1)
                if len(arr) != len(p):
                    raise ValueError(f"{name} length {len(arr)} != point count {len(p)}")
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    def __len__(self):
        return len(self.points)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(t.apply(self.points), self.faces, self.links)


def as_points(x: Union[PointCloud, TriMesh, np.ndarray]) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, TriMesh):
        return x.vertices
    return np.asarray(x, dtype=float).reshape(-1, 3)


def sample_surface(mesh: TriMesh, n: int, seed: int) -> PointCloud:
    """Area-weighted uniform surface sampling.

    Faces are drawn by inverting the cumulative area distribution; points inside a
    face are drawn with the square-root barycentric warp.
    """
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise EmptyMesh("mesh has zero surface area")
    cdf = np.cumsum(areas)
    u = rng.random(n) * cdf[-1]
    face_idx = np.searchsorted(cdf, u, side="right")
    face_idx = np.minimum(face_idx, len(areas) - 1)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    b0 = 1.0 - r1
    b1 = r1 * (1.0 - r2)
    b2 = r1 * r2
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = b0[:, None] * tri[:, 0] + b1[:, None] * tri[:, 1] + b2[:, None] * tri[:, 2]
    return PointCloud(pts, faces=face_idx)


def pairwise_distances(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = query[:, None, :] - target[None, :, :]
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def _rowwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


class NearestIndex:
    """Exact nearest-neighbour index over a fixed target set.

    Results match an exhaustive search: distances are recomputed with the same
    arithmetic as :func:`pairwise_distances` and ties go to the lowest index.
    """

    def __init__(self, target):
        self.target = np.ascontiguousarray(as_points(target))
        if len(self.target) == 0:
            raise EmptyTarget("target point set is empty")
        self._tree = None if len(self.target) < _BRUTE_FORCE_LIMIT else cKDTree(self.target)

    def query(self, query, max_distance: float = np.inf):
        """Return ``(distances, indices)``.

        Points with no target within ``max_distance`` get ``inf`` and index ``-1``.
        """
        q = np.ascontiguousarray(as_points(query))
        if self._tree is None:
            if len(q) == 0:
                return np.zeros(0), np.zeros(0, dtype=np.int64)
            d = pairwise_distances(q, self.target)
            idx = np.argmin(d, axis=1)
            dist = d[np.arange(len(q)), idx]
        else:
            ub = max_distance * (1 + 1e-9) + 1e-15 if np.isfinite(max_distance) else np.inf
            k = min(2, len(self.target))
            td, cand = self._tree.query(q, k=k, distance_upper_bound=ub)
            td, cand = td.reshape(len(q), k), cand.reshape(len(q), k)
            idx = np.where(cand[:, 0] < len(self.target), cand[:, 0], -1)
            # rows whose runner-up is within rounding of the winner are re-ranked exactly
            with np.errstate(invalid="ignore"):
                close = np.isfinite(td[:, 0]) & (td[:, 1] - td[:, 0] <= 1e-9 * (td[:, 0] + 1e-12))
            if np.any(close):
                rows = np.flatnonzero(close)
                idx[rows] = self._rerank(q[rows], td[rows, 1] * (1 + 1e-9) + 1e-15)
            dist = np.full(len(q), np.inf)
            ok = idx >= 0
            dist[ok] = _rowwise_distance(q[ok], self.target[idx[ok]])
        far = dist > max_distance
        if np.any(far):
            dist = np.where(far, np.inf, dist)
            idx = np.where(far, -1, idx)
        return dist, idx.astype(np.int64)

    def _rerank(self, q: np.ndarray, radius: np.ndarray) -> np.ndarray:
        """Lowest-index exact minimum among all targets within ``radius`` of each query."""
        idx = np.empty(len(q), dtype=np.int64)
        for r, cands in enumerate(self._tree.query_ball_point(q, radius)):
            cands = np.sort(np.asarray(cands, dtype=np.int64))
            d = _rowwise_distance(q[r], self.target[cands])
            idx[r] = cands[np.argmin(d)]  # argmin keeps the first, i.e. lowest, index
        return idx


def nearest_distances(query, target, max_distance: float = np.inf):
    """Exact nearest target point for every query point.

    Returns ``(distances, indices)`` arrays; ties are broken by lowest target index.
    """
    return NearestIndex(target).query(query, max_distance)


# --- primitives -----------------------------------------------------------


def box_mesh(size=(1.0, 1.0, 1.0), divisions: int = 1) -> TriMesh:
    """Axis-aligned box centred at the origin; each face split into a divisions² grid."""
    sx, sy, sz = (0.5 * np.asarray(size, dtype=float))
    n = int(divisions)
    verts: list = []
    index: dict = {}
    faces = []

    def vid(p):
        key = tuple(np.round(p, 12))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    g = np.linspace(-1.0, 1.0, n + 1)
    # (axis, sign): fixed axis and its side; u, v chosen so that u x v points outward
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [(1, 2), (2, 0), (0, 1)][axis]
            if sign < 0:
                u_ax, v_ax = v_ax, u_ax
            for i in range(n):
                for j in range(n):
                    corner = []
                    for di, dj in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        p = np.zeros(3)
                        p[axis] = sign
                        p[u_ax] = g[i + di]
                        p[v_ax] = g[j + dj]
                        corner.append(vid(p * (sx, sy, sz)))
                    faces.append((corner[0], corner[1], corner[2]))
                    faces.append((corner[0], corner[2], corner[3]))
    return TriMesh(np.array(verts), np.array(faces))


def sphere_mesh(radius: float = 0.5, slices: int = 20, stacks: int = 20, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """UV sphere: two poles plus ``stacks - 1`` rings of ``slices`` vertices."""
    verts = [(0.0, 0.0, radius)]
    for i in range(1, stacks):
        phi = np.pi * i / stacks
        for j in range(slices):
            th = 2 * np.pi * j / slices
            verts.append((radius * np.sin(phi) * np.cos(th), radius * np.sin(phi) * np.sin(th), radius * np.cos(phi)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1
    faces = []
    for j in range(slices):
        faces.append((0, 1 + j, 1 + (j + 1) % slices))
    for i in range(stacks - 2):
        a0 = 1 + i * slices
        b0 = a0 + slices
        for j in range(slices):
            j1 = (j + 1) % slices
            faces.append((a0 + j, b0 + j, b0 + j1))
            faces.append((a0 + j, b0 + j1, a0 + j1))
    last = 1 + (stacks - 2) * slices
    for j in range(slices):
        faces.append((last + j, south, last + (j + 1) % slices))
    return TriMesh(np.array(verts) + np.asarray(center, dtype=float), np.array(faces))


def cylinder_mesh(radius: float = 0.5, length: float = 1.0, segments: int = 24, rings: int = 1) -> TriMesh:
    """Closed cylinder along z centred at the origin, ``rings`` bands along its length."""
    verts = []
    zs = np.linspace(-0.5 * length, 0.5 * length, rings + 1)
    for z in zs:
        for j in range(segments):
            th = 2 * np.pi * j / segments
            verts.append((radius * np.cos(th), radius * np.sin(th), z))
    bottom = len(verts)
    verts.append((0.0, 0.0, zs[0]))
    top = len(verts)
    verts.append((0.0, 0.0, zs[-1]))
    faces = []
    for i in range(rings):
        a0 = i * segments
        b0 = a0 + segments
        for j in range(segments):
            j1 = (j + 1) % segments
            faces.append((a0 + j, a0 + j1, b0 + j1))
            faces.append((a0 + j, b0 + j1, b0 + j))
    for j in range(segments):
        j1 = (j + 1) % segments
        faces.append((bottom, j1, j))
        faces.append((top, rings * segments + j, rings * segments + j1))
    return TriMesh(np.array(verts), np.array(faces))


# --- OBJ ------------------------------------------------------------------


def parse_obj(text: str) -> TriMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                if len(idx) < 3:
                    raise FormatError(f"line {lineno}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {lineno}: {exc}") from exc
    return TriMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def format_obj(mesh: TriMesh) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(lines) + "\n"


def load_obj(path) -> TriMesh:
    return parse_obj(Path(path).read_text())


def save_obj(mesh: TriMesh, path) -> None:
    Path(path).write_text(format_obj(mesh))
