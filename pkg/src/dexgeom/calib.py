"""World-frame alignment: gravity, hand depth and object scale."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_dilation

from .errors import DimensionMismatch, EmptyCandidates, FormatError, NoValidSamples, NoVisiblePoints, ZeroVector
from .geom import RigidTransform, TriMesh, sample_surface

GRID_MAGIC = b"VMGRID1\n"
DOWN = np.array([0.0, 0.0, -1.0])
DEFAULT_SAMPLES = 50_000
DEFAULT_SAMPLE_SEED = 0


def gravity_rotation(g_cam) -> RigidTransform:
    """Smallest rotation taking the direction ``g_cam`` onto ``(0, 0, -1)``.

    When ``g_cam`` already points up the axis is ambiguous; the x-axis is used.
    """
    g = np.asarray(g_cam, dtype=float).reshape(3)
    n = np.linalg.norm(g)
    if not n > 1e-9:
        raise ZeroVector("gravity vector has (near) zero length")
    g = g / n
    axis = np.cross(g, DOWN)
    s = np.linalg.norm(axis)
    c = float(g @ DOWN)
    if s < 1e-15:
        if c > 0:
            return RigidTransform.identity()
        return RigidTransform.from_axis_angle([1.0, 0.0, 0.0], np.pi)
    return RigidTransform.from_axis_angle(axis / s, float(np.arctan2(s, c)))


def align_trajectory(traj, R: RigidTransform):
    """Left-multiply every wrist and object pose by the rotation ``R``."""
    from .demo import Trajectory

    if np.linalg.norm(R.translation) > 0:
        raise ValueError("alignment must be a pure rotation")
    rot = RigidTransform(R.rotation)
    configs = [q.with_wrist(rot.compose(q.wrist)) for q in traj.configs]
    objects = [{k: rot.compose(v) for k, v in o.items()} for o in traj.objects]
    return Trajectory(traj.times, configs, objects, traj.joint_names, traj.t1, traj.t2)


def align_mesh(mesh: TriMesh, R: RigidTransform) -> TriMesh:
    return mesh.transformed(RigidTransform(R.rotation))


# --- depth ----------------------------------------------------------------


@dataclass
class DepthGrid:
    """Metric depth per pixel; values <= 0 mark invalid pixels."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] == 0 or v.shape[1] == 0:
            raise DimensionMismatch(f"depth grid must be a non-empty 2-D array, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("depth values must be finite")
        self.values = v

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def to_bytes(self) -> bytes:
        return GRID_MAGIC + f"{self.rows} {self.cols}\n".encode() + self.values.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DepthGrid":
        if not data.startswith(GRID_MAGIC):
            raise FormatError("missing VMGRID1 magic")
        rest = data[len(GRID_MAGIC):]
        nl = rest.find(b"\n")
        try:
            rows, cols = (int(x) for x in rest[:nl].split())
        except ValueError as exc:
            raise FormatError("bad VMGRID1 header") from exc
        body = rest[nl + 1:]
        if len(body) != 4 * rows * cols:
            raise FormatError(f"expected {4 * rows * cols} payload bytes, got {len(body)}")
        return cls(np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(float))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DepthGrid":
        return cls.from_bytes(Path(path).read_bytes())


def _nearest_pixel(x) -> np.ndarray:
    # round half up, so 0.5 maps to pixel 1 regardless of numpy's banker's rounding
    return np.floor(np.asarray(x, dtype=float) + 0.5).astype(np.int64)


def hand_depth_correction(keypoints_2d, depth: DepthGrid) -> float:
    """Mean valid depth under the keypoints ``(u, v)``; out-of-grid and invalid samples are skipped."""
    kp = np.asarray(keypoints_2d, dtype=float).reshape(-1, 2)
    col, row = _nearest_pixel(kp[:, 0]), _nearest_pixel(kp[:, 1])
    inside = (col >= 0) & (col < depth.cols) & (row >= 0) & (row < depth.rows)
    vals = depth.values[row[inside], col[inside]]
    vals = vals[vals > 0]
    if len(vals) == 0:
        raise NoValidSamples("no keypoint falls on a valid depth pixel")
    return float(vals.mean())


# --- camera and masks -----------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (-0.5 * self.width <= self.cx <= 1.5 * self.width and -0.5 * self.height <= self.cy <= 1.5 * self.height):
            raise ValueError("principal point too far outside the image")

    def project(self, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pinhole projection of camera-frame points: ``(u, v, in_front)``."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        z = p[:, 2]
        front = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        return u, v, front

    def to_json(self) -> str:
        return json.dumps({"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                           "width": self.width, "height": self.height})

    @classmethod
    def from_json(cls, text: str) -> "CameraIntrinsics":
        d = json.loads(text)
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       int(d["width"]), int(d["height"]))
        except KeyError as exc:
            raise FormatError(f"intrinsics missing field {exc}") from exc


@dataclass
class MaskImage:
    data: np.ndarray  # bool, (rows, cols)

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(bool)
        if self.data.ndim != 2:
            raise DimensionMismatch("mask must be 2-D")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def to_pgm(self) -> bytes:
        rows, cols = self.data.shape
        return f"P5\n{cols} {rows}\n255\n".encode() + (self.data.astype(np.uint8) * 255).tobytes()

    @classmethod
    def from_pgm(cls, data: bytes) -> "MaskImage":
        # header: magic, width, height, maxval, separated by whitespace and comments
        tokens, pos = [], 0
        token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
        for _ in range(4):
            m = token_re.match(data, pos)
            if m is None:
                raise FormatError("truncated PGM header")
            tokens.append(m.group(1))
            pos = m.end()
        if tokens[0] != b"P5":
            raise FormatError("only binary PGM (P5) is supported")
        try:
            cols, rows, maxval = (int(t) for t in tokens[1:])
        except ValueError as exc:
            raise FormatError("bad PGM header") from exc
        pos += 1  # single whitespace before the raster
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        size = rows * cols * np.dtype(dtype).itemsize
        raster = data[pos:pos + size]
        if len(raster) != size:
            raise FormatError("truncated PGM raster")
        return cls(np.frombuffer(raster, dtype=dtype).reshape(rows, cols) != 0)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_pgm())

    @classmethod
    def load(cls, path) -> "MaskImage":
        return cls.from_pgm(Path(path).read_bytes())


def render_silhouette(points_cam, intrinsics: CameraIntrinsics, dilation: int = 1) -> np.ndarray:
    """Mark the nearest pixel of every projected point, then dilate by ``dilation`` pixels."""
    u, v, front = intrinsics.project(points_cam)
    col, row = _nearest_pixel(np.where(front, u, -1.0)), _nearest_pixel(np.where(front, v, -1.0))
    ok = front & (col >= 0) & (col < intrinsics.width) & (row >= 0) & (row < intrinsics.height)
    img = np.zeros((intrinsics.height, intrinsics.width), dtype=bool)
    img[row[ok], col[ok]] = True
    if dilation > 0 and img.any():
        img = binary_dilation(img, structure=np.ones((3, 3), bool), iterations=dilation)
    return img


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty images count as identical."""
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def scale_points(points: np.ndarray, s: float, center: np.ndarray) -> np.ndarray:
    return center + s * (points - center)


def candidate_grid(lo: float = 0.5, hi: float = 2.0, step: float = 0.1) -> List[float]:
    """Evenly spaced candidates, rounded so grid members equal their decimal literals."""
    n = int(round((hi - lo) / step))
    return [round(lo + k * step, 10) for k in range(n + 1)]


def scale_search(mesh: TriMesh, poses: Sequence[RigidTransform], intrinsics: CameraIntrinsics,
                 masks: Sequence[MaskImage], candidates: Sequence[float],
                 n_samples: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SAMPLE_SEED, dilation: int = 1):
    """Pick the mesh scale whose silhouettes best match the masks.

    ``poses[k]`` places the object in the camera frame of frame ``k``. Each
    candidate scales the mesh about its vertex centroid; the error is the mean
    over frames of ``1 - IoU``. Ties go to the candidate closest to 1.0.
    Returns ``(best_scale, errors)`` with errors in candidate order.
    """
    candidates = [float(c) for c in candidates]
    if not candidates:
        raise EmptyCandidates("no candidate scales given")
    if len(poses) != len(masks) or not masks:
        raise DimensionMismatch(f"{len(poses)} poses vs {len(masks)} masks")
    for m in masks:
        if m.shape != (intrinsics.height, intrinsics.width):
            raise DimensionMismatch(f"mask {m.shape} does not match image {(intrinsics.height, intrinsics.width)}")
    base = sample_surface(mesh, n_samples, seed).points
    center = mesh.centroid()
    errors, any_visible = [], False
    for s in candidates:
        pts = scale_points(base, s, center)
        err = 0.0
        for pose, mask in zip(poses, masks):
            sil = render_silhouette(pose.apply(pts), intrinsics, dilation)
            any_visible |= bool(sil.any())
            err += 1.0 - iou(sil, mask.data)
        errors.append(err / len(masks))
    if not any_visible:
        raise NoVisiblePoints("object projects outside the image for every candidate and frame")
    order = sorted(range(len(candidates)), key=lambda i: (errors[i], abs(candidates[i] - 1.0), i))
    return candidates[order[0]], errors


def render_masks(mesh: TriMesh, poses: Sequence[RigidTransform], intrinsics: CameraIntrinsics, scale: float = 1.0,
                 n_samples: int = DEFAULT_SAMPLES, seed: int = DEFAULT_SAMPLE_SEED, dilation: int = 1) -> List[MaskImage]:
    """Silhouettes of ``mesh`` scaled by ``scale``; used to build synthetic fixtures."""
    pts = scale_points(sample_surface(mesh, n_samples, seed).points, float(scale), mesh.centroid())
    return [MaskImage(render_silhouette(p.apply(pts), intrinsics, dilation)) for p in poses]
