"""The full demonstration pipeline on the synthetic pick-and-move fixture."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from .contact import refine_window
from .demo import SynthesisSpec, export_training_set, integrate_actions, segment_stages, synthesize
from .fixtures import fingertip_links, hand_model, pick_and_move
from .geom import PointCloud, compose, sample_surface
from .grasp import DistanceMatrix, extract_contacts, grasp_from_distances, stability_check
from .robot import RobotConfig, robot_mesh_at, robot_points_at

OBJECT_ID = "cyl"


def run_end_to_end(out_dir, n_synth: int = 100, seed: int = 0, n_points: int = 512,
                   contact_iters: int = 10, object_mass: float = 0.1, mu: float = 0.5) -> dict:
    """segment -> contact refinement -> grasp from distances -> stability -> synthesis -> export.

    Returns a summary with per-stage timings and the checks the acceptance suite uses.
    """
    timings = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    model = hand_model()
    tips = fingertip_links()
    traj, mesh = pick_and_move(model, OBJECT_ID)
    lap("fixture")

    t1, t2 = segment_stages(traj, mesh, model, OBJECT_ID, fingertips=tips)
    traj = traj.with_marks(t1, t2)
    lap("segment")

    traj, traces = refine_window(model, traj, mesh, OBJECT_ID, max_iters=contact_iters, fingertips=tips)
    lap("contact_opt")

    # grasp relative to the object at t2, encoded as an exact distance matrix
    obj_pose = traj.object_pose(t2, OBJECT_ID)
    q_rel = RobotConfig(compose(obj_pose.inverse(), traj.configs[t2].wrist), traj.configs[t2].joint_angles)
    canonical = robot_points_at(model, model.zero_config(), n_points, seed)
    placed = robot_points_at(model, q_rel, n_points, seed)
    anchors = sample_surface(mesh, n_points, seed).points
    D = DistanceMatrix.between(placed, anchors)
    grasp = grasp_from_distances(model, D, anchors, PointCloud(canonical.points, links=canonical.links))
    wrist_err = float(np.linalg.norm(grasp.config.wrist.translation - q_rel.wrist.translation))
    joint_err = float(np.abs(grasp.config.joint_angles - q_rel.joint_angles).max())
    lap("grasp_solve")

    contacts = extract_contacts(robot_mesh_at(model, grasp.config), mesh, merge=False)
    report = stability_check(contacts, object_mass, mu, center=mesh.centroid())
    lap("stability")

    spec = SynthesisSpec(OBJECT_ID, count=n_synth, seed=seed)
    synth = synthesize(traj, spec, {OBJECT_ID: mesh}, model)
    lap("synth")

    out_dir = Path(out_dir)
    dirs = export_training_set(synth, model, {OBJECT_ID: mesh}, out_dir, n_points=n_points, seed=seed)
    lap("export")

    recon = 0.0
    for d, tr in zip(dirs, synth):
        obs = json.loads((d / "obs.json").read_text())
        acts = json.loads((d / "actions.json").read_text())["actions"]
        rebuilt = integrate_actions(RobotConfig.from_dict(obs["q_grasp"]), acts)
        for k, q in enumerate(rebuilt):
            ref = tr.configs[tr.t2 + k]
            recon = max(recon, float(np.abs(q.wrist.translation - ref.wrist.translation).max()),
                        float(np.abs(q.wrist.rotation_matrix() - ref.wrist.rotation_matrix()).max()),
                        float(np.abs(q.joint_angles - ref.joint_angles).max()))
    lap("verify")

    return {"t1": t1, "t2": t2, "contact_traces": traces, "grasp_wrist_error": wrist_err,
            "grasp_joint_error": joint_err, "grasp_fit_rms": grasp.fit_rms,
            "multilateration_residual": float(grasp.residuals.max()), "stability": report,
            "n_synth": len(synth), "n_exported": len(dirs), "reconstruction_error": recon,
            "timings": timings, "total_seconds": sum(timings.values())}
