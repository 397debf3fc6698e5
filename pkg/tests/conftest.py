import numpy as np
import pytest

from dexgeom import fixtures


@pytest.fixture(scope="session")
def hand():
    return fixtures.hand_model()


@pytest.fixture(scope="session")
def two_link():
    return fixtures.two_link_model()


@pytest.fixture(scope="session")
def pinch():
    """(model, q, object mesh in world frame, object pose)."""
    model, q, mesh, pose = fixtures.pinch_scene()
    return model, q, mesh.transformed(pose), pose


@pytest.fixture(scope="session")
def pick_and_move(hand):
    return fixtures.pick_and_move(hand)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_transform(rng, scale=1.0):
    from dexgeom.geom import RigidTransform

    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.normal(size=3) * scale)


def scale_scene(n_frames=5):
    """(mesh, per-frame camera poses, intrinsics) for silhouette scale recovery."""
    from dexgeom.calib import CameraIntrinsics
    from dexgeom.geom import RigidTransform, box_mesh

    mesh = box_mesh((0.06, 0.04, 0.1), divisions=4)
    intr = CameraIntrinsics(300.0, 300.0, 80.0, 60.0, 160, 120)
    poses = [RigidTransform.from_rpy([0.3 * k, 0.5 + 0.2 * k, 0.1 * k], [0.01 * (k - 2), 0.005 * k, 0.6])
             for k in range(n_frames)]
    return mesh, poses, intr
