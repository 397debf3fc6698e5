"""Command-line entry points.

Every subcommand reads inputs from files, writes results to files (or stdout),
and reports failures as one JSON object on stderr: ``{"error": CODE, "message": ...}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DexGeomError

log = logging.getLogger("dexgeom")

FORMATS_HELP = """\
file formats:
  URDF            XML subset: <link>, <joint> (revolute, continuous, prismatic, fixed),
                  <origin xyz rpy>, <axis>, <limit>; box/sphere/cylinder/mesh(.obj) geometry
  mesh            Wavefront OBJ text ("v x y z", "f i j k ..."; polygons are fan-split)
  trajectory      JSON lines; line 1 is the header
                  {"format": "dexgeom-trajectory", "version": 1, "joint_names": [...],
                   "t1": int|null, "t2": int|null, "rotation": "quaternion w,x,y,z"},
                  then one frame per line {"t", "wrist": {"q": [w,x,y,z], "t": [x,y,z]},
                  "joints": [...], "objects": {id: {"q", "t"}}}
  keypoints       JSON lines {"t": seconds, "joints": [[x,y,z] x 21]}
  mapping         JSON {"entries": [{"link", "offset": [x,y,z], "keypoint", "weight"}]}
  robot config    JSON {"wrist": {"q", "t"}, "joints": [...]}
  contact map     JSON {"c_rad": r, "values": [...]} (one value per mesh vertex)
  distance matrix binary: magic b"VMDM1\\n", ascii "N_R N_O\\n", then N_R*N_O
                  little-endian float32, row-major (rows = robot points)
  depth grid      binary: magic b"VMGRID1\\n", ascii "rows cols\\n", then little-endian
                  float32 row-major, meters (<= 0 means invalid)
  mask            binary PGM: "P5\\n<cols> <rows>\\n<maxval>\\n" + raster; nonzero = occupied
  intrinsics      JSON {"fx", "fy", "cx", "cy", "width", "height"}
  poses           JSON list of {"q": [w,x,y,z], "t": [x,y,z]} (object in camera frame)
  points          JSON {"points": [[x,y,z], ...]} or an OBJ file (vertices used)
  config          JSON object whose keys are long option names (dashes or underscores);
                  explicit flags override it
"""


class UsageError(DexGeomError):
    code = "E_USAGE"


class UnknownSubcommand(DexGeomError):
    code = "E_UNKNOWN_SUBCOMMAND"


class MissingInput(DexGeomError):
    code = "E_IO_MISSING"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if "invalid choice" in message:
            raise UnknownSubcommand(message)
        raise UsageError(message)


# --- helpers ----------------------------------------------------------------


def _path(p) -> Path:
    path = Path(p)
    if not path.exists():
        raise MissingInput(f"no such file: {p}")
    return path


def _floats(text, n: Optional[int] = None) -> List[float]:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",") if v.strip()]
    if n is not None and len(vals) != n:
        raise UsageError(f"expected {n} comma-separated numbers, got {text!r}")
    return vals


def _write(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _meshes(specs: Sequence[str]) -> Dict:
    from .geom import load_obj

    out = {}
    for s in specs or []:
        if "=" not in s:
            raise UsageError(f"mesh must be given as id=path, got {s!r}")
        oid, p = s.split("=", 1)
        out[oid] = load_obj(_path(p))
    return out


def _model(path):
    from .robot import load_urdf

    return load_urdf(_path(path))


def _points(path) -> np.ndarray:
    from .geom import load_obj

    p = _path(path)
    if p.suffix.lower() == ".obj":
        return load_obj(p).vertices
    d = json.loads(p.read_text())
    return np.asarray(d["points"] if isinstance(d, dict) else d, dtype=float).reshape(-1, 3)


def _require(args, *names) -> None:
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


# --- subcommands ------------------------------------------------------------


def cmd_fk(args) -> int:
    from .robot import RobotConfig, forward_kinematics

    _require(args, "urdf")
    model = _model(args.urdf)
    if args.q:
        q = RobotConfig.from_dict(json.loads(_path(args.q).read_text()))
    else:
        q = model.zero_config()
        if args.joints is not None:
            q = q.with_joints(_floats(args.joints, model.n_joints))
    poses = forward_kinematics(model, q)
    _write(_dump({name: poses[name].to_dict() for name in sorted(poses)}), args.out)
    return 0


def cmd_retarget(args) -> int:
    from .retarget import HandKeypoints, KeypointMapping, retarget_trajectory

    _require(args, "urdf", "keypoints", "mapping")
    model = _model(args.urdf)
    mapping = KeypointMapping.from_json(_path(args.mapping).read_text())
    human = HandKeypoints.load(_path(args.keypoints))
    traj, report = retarget_trajectory(model, mapping, human, smoothness=args.smoothness or 0.0)
    _write(traj.to_jsonl(), args.out)
    if args.report:
        Path(args.report).write_text(_dump([{"frame": k, "residual": r.residual, "iterations": r.iterations,
                                             "converged": r.converged} for k, r in enumerate(report)]))
    return 0


def cmd_segment(args) -> int:
    from .demo import DEFAULT_CONTACT_EPS, DEFAULT_D_APPROACH, DEFAULT_MOTION_EPS, Trajectory, segment_stages
    from .geom import load_obj

    _require(args, "urdf", "traj", "mesh", "object_id")
    model = _model(args.urdf)
    traj = Trajectory.load(_path(args.traj))
    obj = load_obj(_path(args.mesh))
    tips = args.fingertips.split(",") if args.fingertips else None
    t1, t2 = segment_stages(traj, obj, model, args.object_id,
                            d_approach=args.d_approach or DEFAULT_D_APPROACH,
                            motion_eps=args.motion_eps or DEFAULT_MOTION_EPS,
                            contact_eps=args.contact_eps or DEFAULT_CONTACT_EPS, fingertips=tips)
    if args.out:
        traj.with_marks(t1, t2).save(args.out)
    sys.stdout.write(json.dumps({"t1": t1, "t2": t2}) + "\n")
    return 0


def cmd_contact_opt(args) -> int:
    from .contact import DEFAULT_C_RAD, DEFAULT_PENETRATION_WEIGHT, ContactMap, refine_window
    from .demo import Trajectory
    from .geom import load_obj

    _require(args, "urdf", "traj", "mesh", "object_id")
    model = _model(args.urdf)
    traj = Trajectory.load(_path(args.traj))
    obj = load_obj(_path(args.mesh))
    c_rad = args.c_rad or DEFAULT_C_RAD
    targets = None
    if args.targets_hand or args.targets_object:
        _require(args, "targets_hand", "targets_object")
        targets = (ContactMap.from_json(_path(args.targets_hand).read_text()),
                   ContactMap.from_json(_path(args.targets_object).read_text(), obj))
    lam = DEFAULT_PENETRATION_WEIGHT if args.lambda_pen is None else args.lambda_pen
    tips = args.fingertips.split(",") if args.fingertips else None
    refined, traces = refine_window(model, traj, obj, args.object_id, targets, c_rad, lam,
                                    args.max_iters or 100, tips)
    _write(refined.to_jsonl(), args.out)
    if args.report:
        Path(args.report).write_text(_dump({str(k): v for k, v in traces.items()}))
    return 0


def cmd_grasp_solve(args) -> int:
    from .grasp import DistanceMatrix, grasp_from_distances
    from .geom import PointCloud
    from .robot import robot_points_at

    _require(args, "urdf", "distances", "object_points", "seed")
    model = _model(args.urdf)
    D = DistanceMatrix.load(_path(args.distances))
    anchors = _points(args.object_points)
    canonical = robot_points_at(model, model.zero_config(), D.shape[0], args.seed)
    res = grasp_from_distances(model, D, anchors, PointCloud(canonical.points, links=canonical.links))
    _write(res.to_json(), args.out)
    return 0


def cmd_stability(args) -> int:
    from .geom import load_obj
    from .grasp import (DEFAULT_CONE_EDGES, DEFAULT_CONTACT_EPS, DEFAULT_DISTURBANCE_SCALE, DEFAULT_MU,
                        extract_contacts, stability_check)
    from .robot import RobotConfig, robot_mesh_at

    _require(args, "urdf", "grasp", "mesh", "mass")
    model = _model(args.urdf)
    d = json.loads(_path(args.grasp).read_text())
    q = RobotConfig.from_dict(d.get("config", d))
    obj = load_obj(_path(args.mesh))
    contacts = extract_contacts(robot_mesh_at(model, q), obj, args.eps or DEFAULT_CONTACT_EPS, merge=not args.patch)
    mu = DEFAULT_MU if args.mu is None else args.mu
    scale = DEFAULT_DISTURBANCE_SCALE if args.disturbance_scale is None else args.disturbance_scale
    report = stability_check(contacts, args.mass, mu, scale, args.cone_edges or DEFAULT_CONE_EDGES,
                             center=obj.centroid())
    _write(report.to_json(), args.out)
    return 0 if report.success or not args.strict else 3


def cmd_synth(args) -> int:
    from .demo import SynthesisSpec, Trajectory, synthesize

    _require(args, "traj", "urdf", "target")
    if args.seed is None and not args.identity:
        raise UsageError("--seed is required unless --identity is given")
    model = _model(args.urdf)
    source_path = _path(args.traj)
    source = Trajectory.load(source_path)
    scene = _meshes(args.mesh)
    common = dict(count=args.count or 1, seed=args.seed or 0)
    if args.identity:
        spec = SynthesisSpec.identity(args.target, **common)
    else:
        spec = SynthesisSpec(args.target, tuple(_floats(args.x_bounds or "-0.2,0.2", 2)),
                             tuple(_floats(args.y_bounds or "-0.2,0.2", 2)),
                             tuple(_floats(args.yaw_bounds or "0,0", 2)), **common)
    trajs = synthesize(source, spec, scene, model)
    if args.out and len(trajs) == 1:
        Path(args.out).write_text(trajs[0].to_jsonl())
    else:
        _require(args, "out_dir")
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, t in enumerate(trajs):
            (out / f"traj_{i:04d}.jsonl").write_text(t.to_jsonl())
    return 0


def cmd_export(args) -> int:
    from .demo import Trajectory, export_training_set

    _require(args, "urdf", "out_dir", "seed")
    if not args.trajs:
        raise UsageError("--trajs needs at least one trajectory file or directory")
    files = []
    for p in args.trajs:
        path = _path(p)
        files += sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    model = _model(args.urdf)
    trajs = [Trajectory.load(f) for f in files]
    written = export_training_set(trajs, model, _meshes(args.mesh), args.out_dir,
                                  n_points=args.n_points or 512, seed=args.seed)
    sys.stdout.write(json.dumps({"written": [str(w) for w in written]}) + "\n")
    return 0


def cmd_calib_gravity(args) -> int:
    from .calib import align_trajectory, gravity_rotation
    from .demo import Trajectory

    _require(args, "gravity")
    R = gravity_rotation(_floats(args.gravity, 3))
    if args.traj:
        traj = align_trajectory(Trajectory.load(_path(args.traj)), R)
        _write(traj.to_jsonl(), args.out)
    if args.rotation_out or not args.traj:
        _write(_dump(R.to_dict()), args.rotation_out)
    return 0


def cmd_scale_search(args) -> int:
    from .calib import DEFAULT_SAMPLES, CameraIntrinsics, MaskImage, candidate_grid, scale_search
    from .geom import RigidTransform, load_obj

    _require(args, "mesh", "intrinsics", "poses", "seed")
    if not args.masks:
        raise UsageError("--masks needs at least one PGM file")
    mesh = load_obj(_path(args.mesh))
    K = CameraIntrinsics.from_json(_path(args.intrinsics).read_text())
    masks = [MaskImage.load(_path(m)) for m in args.masks]
    poses = [RigidTransform.from_dict(p) for p in json.loads(_path(args.poses).read_text())]
    if args.candidates:
        cands = _floats(args.candidates)
    else:
        lo, hi, step = _floats(args.grid or "0.5,2.0,0.1", 3)
        cands = candidate_grid(lo, hi, step)
    best, errors = scale_search(mesh, poses, K, masks, cands, n_samples=args.samples or DEFAULT_SAMPLES,
                                seed=args.seed)
    _write(_dump({"best": best, "candidates": cands, "errors": errors}), args.out)
    return 0


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values; flags override it")
    common.add_argument("--out", help="output file (stdout when omitted)")

    p = _Parser(prog="dexgeom", description="Geometry tools for dexterous hand demonstrations.",
                epilog=FORMATS_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_, epilog=FORMATS_HELP,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=func)
        return sp

    sp = add("fk", cmd_fk, "link poses for a configuration")
    sp.add_argument("--urdf")
    sp.add_argument("--q", help="robot config JSON (default: zero joints, identity wrist)")
    sp.add_argument("--joints", help="comma-separated joint values, identity wrist")

    sp = add("retarget", cmd_retarget, "human keypoints to a robot trajectory")
    sp.add_argument("--urdf")
    sp.add_argument("--keypoints")
    sp.add_argument("--mapping")
    sp.add_argument("--smoothness", type=float)
    sp.add_argument("--report", help="per-frame solver report JSON")

    sp = add("segment", cmd_segment, "find the approach (t1) and grasp (t2) frames")
    sp.add_argument("--urdf")
    sp.add_argument("--traj")
    sp.add_argument("--mesh", help="object mesh (object frame)")
    sp.add_argument("--object-id")
    sp.add_argument("--d-approach", type=float)
    sp.add_argument("--motion-eps", type=float)
    sp.add_argument("--contact-eps", type=float)
    sp.add_argument("--fingertips", help="comma-separated link names (default: leaf links)")

    sp = add("contact-opt", cmd_contact_opt, "refine the grasp window [t1, t2] against contact targets")
    sp.add_argument("--urdf")
    sp.add_argument("--traj")
    sp.add_argument("--mesh")
    sp.add_argument("--object-id")
    sp.add_argument("--targets-hand")
    sp.add_argument("--targets-object")
    sp.add_argument("--c-rad", type=float)
    sp.add_argument("--lambda-pen", type=float)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--fingertips")
    sp.add_argument("--report", help="energy traces JSON")

    sp = add("grasp-solve", cmd_grasp_solve, "grasp configuration from a distance matrix")
    sp.add_argument("--urdf")
    sp.add_argument("--distances")
    sp.add_argument("--object-points")
    sp.add_argument("--seed", type=int, help="seed of the canonical robot point sampling")

    sp = add("stability", cmd_stability, "six-direction disturbance check")
    sp.add_argument("--urdf")
    sp.add_argument("--grasp", help="GraspResult or robot config JSON, object frame")
    sp.add_argument("--mesh", help="object mesh (object frame)")
    sp.add_argument("--mass", type=float)
    sp.add_argument("--mu", type=float)
    sp.add_argument("--disturbance-scale", type=float)
    sp.add_argument("--cone-edges", type=int)
    sp.add_argument("--eps", type=float)
    sp.add_argument("--patch", action="store_true", default=None, help="use every contact vertex")
    sp.add_argument("--strict", action="store_true", default=None, help="exit 3 when not stable")

    sp = add("synth", cmd_synth, "spatially randomized copies of a marked trajectory")
    sp.add_argument("--urdf")
    sp.add_argument("--traj")
    sp.add_argument("--mesh", action="append", help="id=path, repeatable")
    sp.add_argument("--target")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--identity", action="store_true", default=None)
    sp.add_argument("--x-bounds")
    sp.add_argument("--y-bounds")
    sp.add_argument("--yaw-bounds")
    sp.add_argument("--out-dir")

    sp = add("export", cmd_export, "training observations and delta actions")
    sp.add_argument("--urdf")
    sp.add_argument("--trajs", nargs="+")
    sp.add_argument("--mesh", action="append", help="id=path, repeatable")
    sp.add_argument("--n-points", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir")

    sp = add("calib-gravity", cmd_calib_gravity, "rotate a trajectory so gravity points along -z")
    sp.add_argument("--gravity", help="x,y,z in the camera frame")
    sp.add_argument("--traj")
    sp.add_argument("--rotation-out")

    sp = add("scale-search", cmd_scale_search, "object scale from silhouettes")
    sp.add_argument("--mesh")
    sp.add_argument("--intrinsics")
    sp.add_argument("--masks", nargs="+")
    sp.add_argument("--poses")
    sp.add_argument("--candidates", help="comma-separated scales")
    sp.add_argument("--grid", help="lo,hi,step (default 0.5,2.0,0.1)")
    sp.add_argument("--samples", type=int)
    sp.add_argument("--seed", type=int)
    return p


def _apply_config(args) -> None:
    if not getattr(args, "config", None):
        return
    try:
        cfg = json.loads(_path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in ("func", "command", "config"):
            continue
        if not hasattr(args, dest):
            raise ConfigError(f"unknown option {key!r} for {args.command}")
        if getattr(args, dest) is None:
            setattr(args, dest, value)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _apply_config(args)
        return args.func(args)
    except (MissingInput, FileNotFoundError) as exc:
        _report("E_IO_MISSING", str(exc))
        return 2
    except (UsageError, UnknownSubcommand) as exc:
        _report(exc.code, str(exc))
        return 2
    except DexGeomError as exc:
        _report(exc.code, str(exc))
        return 1
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        _report("E_INVALID_INPUT", f"{type(exc).__name__}: {exc}")
        return 1


def _report(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
