"""Human hand keypoints to robot hand configurations via damped least squares."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import DimensionMismatch, FormatError
from .geom import RigidTransform, skew
from .robot import RobotConfig, RobotModel, link_points_world, point_jacobian

log = logging.getLogger(__name__)

N_KEYPOINTS = 21
MAX_ITERS = 200
STEP_TOL = 1e-8
REL_DECREASE_TOL = 1e-10
STALL_ITERS = 5


@dataclass(frozen=True)
class KeypointMapping:
    """Robot link points paired with human keypoints: ``(link, offset, keypoint, weight)``."""

    entries: Tuple[Tuple[str, Tuple[float, float, float], int, float], ...]

    def __post_init__(self):
        ents = tuple((str(l), tuple(float(v) for v in off), int(k), float(w)) for l, off, k, w in self.entries)
        if len(ents) < 4:
            raise ValueError("mapping needs at least 4 entries (wrist + 3 fingertips)")
        for l, off, k, w in ents:
            if w < 0:
                raise ValueError(f"negative weight for {l}")
            if not 0 <= k < N_KEYPOINTS:
                raise ValueError(f"keypoint index {k} out of range")
        object.__setattr__(self, "entries", ents)

    def resolve(self, model: RobotModel):
        """Arrays ``(link_indices, offsets, keypoints, weights)`` for ``model``."""
        try:
            links = np.array([model.link_index[e[0]] for e in self.entries], dtype=np.int64)
        except KeyError as exc:
            raise DimensionMismatch(f"mapping names unknown link {exc}") from exc
        offsets = np.array([e[1] for e in self.entries], dtype=float)
        kp = np.array([e[2] for e in self.entries], dtype=np.int64)
        w = np.array([e[3] for e in self.entries], dtype=float)
        return links, offsets, kp, w

    def to_json(self) -> str:
        return json.dumps({"entries": [{"link": l, "offset": list(o), "keypoint": k, "weight": w}
                                       for l, o, k, w in self.entries]}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "KeypointMapping":
        d = json.loads(text)
        return cls(tuple((e["link"], tuple(e.get("offset", (0, 0, 0))), e["keypoint"], e.get("weight", 1.0))
                         for e in d["entries"]))


@dataclass
class HandKeypoints:
    times: np.ndarray  # (T,)
    joints: np.ndarray  # (T, 21, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.joints = np.asarray(self.joints, dtype=float).reshape(len(self.times), N_KEYPOINTS, 3)
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"t": float(t), "joints": j.tolist()}) + "\n" for t, j in zip(self.times, self.joints))

    @classmethod
    def from_jsonl(cls, text: str) -> "HandKeypoints":
        times, joints = [], []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            j = rec["joints"]
            if len(j) != N_KEYPOINTS:
                raise FormatError(f"line {n}: expected {N_KEYPOINTS} joints, got {len(j)}")
            times.append(rec["t"])
            joints.append(j)
        return cls(np.array(times), np.array(joints))

    @classmethod
    def load(cls, path) -> "HandKeypoints":
        return cls.from_jsonl(Path(path).read_text())


@dataclass
class SolveResult:
    config: RobotConfig
    residual: float  # weighted sum of squared keypoint errors
    iterations: int
    converged: bool
    initial_residual: float = float("nan")


def _inverse_left_jacobian(phi: np.ndarray) -> np.ndarray:
    """Derivative of ``rotvec(exp(d) R)`` with respect to ``d`` at ``d = 0``, where ``phi = rotvec(R)``."""
    th = float(np.linalg.norm(phi))
    K = skew(phi)
    if th < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    coef = 1.0 / th ** 2 - (1.0 + np.cos(th)) / (2.0 * th * np.sin(th))
    return np.eye(3) - 0.5 * K + coef * K @ K


def config_difference(a: RobotConfig, b: RobotConfig) -> np.ndarray:
    """Local increment taking ``b`` to ``a`` (translation, left rotation vector, joints)."""
    drot = a.wrist.compose(RigidTransform(b.wrist.rotation).inverse())
    return np.concatenate([a.wrist.translation - b.wrist.translation,
                           RigidTransform(drot.rotation).rotvec(), a.joint_angles - b.joint_angles])


class PointProblem:
    """Weighted point-matching least squares over a robot configuration."""

    def __init__(self, model: RobotModel, links, offsets, targets, weights,
                 prior: Optional[RobotConfig] = None, smoothness: float = 0.0):
        self.model = model
        self.links = np.asarray(links, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=float).reshape(-1, 3)
        self.targets = np.asarray(targets, dtype=float).reshape(-1, 3)
        self.sqrt_w = np.sqrt(np.asarray(weights, dtype=float))
        self.prior = prior
        self.smoothness = float(smoothness)

    def points(self, q: RobotConfig, fk=None) -> np.ndarray:
        fk = fk if fk is not None else self.model.fk_matrices(q)
        return link_points_world(self.model, fk, self.links, self.offsets)

    def residuals(self, q: RobotConfig, fk=None) -> np.ndarray:
        r = ((self.points(q, fk) - self.targets) * self.sqrt_w[:, None]).ravel()
        if self.prior is not None and self.smoothness > 0:
            r = np.concatenate([r, np.sqrt(self.smoothness) * config_difference(q, self.prior)])
        return r

    def cost(self, q: RobotConfig) -> float:
        r = self.residuals(q)
        return float(r @ r)

    def jacobian(self, q: RobotConfig, fk=None) -> np.ndarray:
        fk = fk if fk is not None else self.model.fk_matrices(q)
        world = self.points(q, fk)
        J = point_jacobian(self.model, q, self.links, world, fk) * self.sqrt_w[:, None, None]
        J = J.reshape(-1, self.model.dof)
        if self.prior is not None and self.smoothness > 0:
            P = np.eye(self.model.dof)
            P[3:6, 3:6] = _inverse_left_jacobian(config_difference(q, self.prior)[3:6])
            J = np.vstack([J, np.sqrt(self.smoothness) * P])
        return J


def solve_points(problem: PointProblem, q_init: RobotConfig, max_iters: int = MAX_ITERS) -> SolveResult:
    """Levenberg-Marquardt with joint clamping. Only cost-decreasing steps are taken.

    Joints sitting on a limit whose gradient pushes them outward are held fixed
    for that iteration, so the step is spent on the free coordinates.
    """
    model = problem.model
    model.check_config(q_init)
    q = q_init.with_joints(model.clamp(q_init.joint_angles))
    lower, upper = model.lower_limits(), model.upper_limits()
    r = problem.residuals(q)
    cost = float(r @ r)
    initial = cost
    mu = 1e-3
    stall = 0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        if cost < 1e-30:
            converged = True
            break
        J = problem.jacobian(q)
        g = J.T @ r
        ang = q.joint_angles
        blocked = ((ang <= lower) & (g[6:] > 0)) | ((ang >= upper) & (g[6:] < 0))
        free = np.concatenate([np.ones(6, bool), ~blocked])
        Jf = J[:, free]
        H = Jf.T @ Jf
        gf = g[free]
        diag = np.maximum(np.diag(H), 1e-12)
        accepted = False
        while mu < 1e12:
            step = np.zeros(model.dof)
            try:
                step[free] = -np.linalg.solve(H + mu * np.diag(diag), gf)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            cand = q.retract(step)
            cand = cand.with_joints(model.clamp(cand.joint_angles))
            rc = problem.residuals(cand)
            cc = float(rc @ rc)
            if cc < cost:
                accepted = True
                break
            mu *= 10
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        rel = (cost - cc) / max(cost, 1e-300)
        q, r, cost = cand, rc, cc
        mu = max(mu / 10, 1e-12)
        if np.linalg.norm(step) < STEP_TOL:
            converged = True
            break
        stall = stall + 1 if rel < REL_DECREASE_TOL else 0
        if stall >= STALL_ITERS:
            converged = True
            break
    else:
        log.warning("point fit hit max iterations with residual %.3g", cost)
    if problem.prior is not None and problem.smoothness > 0:
        pr = problem.residuals(q)[: 3 * len(problem.links)]
        fit = float(pr @ pr)
    else:
        fit = cost
    return SolveResult(q, fit, it, converged, initial)


def retarget_frame(model: RobotModel, mapping: KeypointMapping, human, q_init: RobotConfig,
                   prior: Optional[RobotConfig] = None, smoothness: float = 0.0,
                   max_iters: int = MAX_ITERS) -> SolveResult:
    """Fit ``q`` so the mapped robot link points land on the human keypoints."""
    human = np.asarray(human, dtype=float).reshape(N_KEYPOINTS, 3)
    links, offsets, kp, w = mapping.resolve(model)
    problem = PointProblem(model, links, offsets, human[kp], w, prior, smoothness)
    return solve_points(problem, q_init, max_iters)


def mapped_keypoints(model: RobotModel, mapping: KeypointMapping, q: RobotConfig) -> np.ndarray:
    """Place mapped robot points at their keypoint slots; unmapped slots are NaN."""
    links, offsets, kp, _ = mapping.resolve(model)
    pts = link_points_world(model, model.fk_matrices(q), links, offsets)
    out = np.full((N_KEYPOINTS, 3), np.nan)
    out[kp] = pts
    return out


def retarget_trajectory(model: RobotModel, mapping: KeypointMapping, human: HandKeypoints,
                        smoothness: float = 0.0, max_iters: int = MAX_ITERS):
    """Retarget every frame, warm-starting from the previous solution.

    Returns ``(trajectory, per_frame_results)``.
    """
    from .demo import Trajectory

    if len(human) < 1:
        raise ValueError("need at least one frame")
    wrist_kp = next((e[2] for e in mapping.entries if e[0] == model.root), 0)
    q = model.zero_config(RigidTransform.from_translation(human.joints[0, wrist_kp]))
    configs: List[RobotConfig] = []
    report: List[SolveResult] = []
    prev = None
    for t in range(len(human)):
        res = retarget_frame(model, mapping, human.joints[t], q,
                             prior=prev if smoothness > 0 else None, smoothness=smoothness,
                             max_iters=max_iters)
        if not res.converged:
            log.warning("frame %d did not converge (residual %.3g)", t, res.residual)
        configs.append(res.config)
        report.append(res)
        q = prev = res.config
    traj = Trajectory(human.times, configs, [{} for _ in configs], list(model.joint_names))
    return traj, report
