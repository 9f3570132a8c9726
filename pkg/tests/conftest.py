"""Shared fixtures: small camera, simple scenes, a fused volume, a tiny dataset.

Session-scoped fixtures are treated as read-only by tests.
"""

import numpy as np
import pytest

from densedesc import recon
from densedesc import scene as sc
from densedesc.dataset import GenConfig, GenObject, generate_dataset
from densedesc.geometry import Intrinsics, Pose


@pytest.fixture(scope="session")
def k64():
    return Intrinsics(fx=50.0, fy=50.0, cx=32.0, cy=24.0, width=64, height=48)


@pytest.fixture(scope="session")
def k96():
    return Intrinsics.from_fov(96, 72, 60.0)


def make_box_object(obj_id=1, extents=(0.10, 0.07, 0.12), seed=7, scale=0.05):
    return sc.SceneObject(
        id=obj_id, name=f"box{obj_id}",
        parts=[sc.Part(shape=sc.Box(tuple(extents)),
                       rest_pose=Pose(np.eye(3), [0.0, 0.0, extents[2] / 2.0]))],
        texture=sc.NoiseTexture(seed=seed, scale=scale))


@pytest.fixture(scope="session")
def box_scene():
    return sc.Scene(objects=[make_box_object()])


@pytest.fixture(scope="session")
def box_views(box_scene, k96):
    """20 random views of the box scene: (poses, [(frame, gt), ...])."""
    rng = np.random.default_rng(42)
    poses = sc.sample_camera_trajectory(rng, 20, radius_range=(0.5, 0.7))
    return poses, [sc.render(box_scene, p, k96) for p in poses]


@pytest.fixture(scope="session")
def box_volume(box_views, k96):
    poses, rendered = box_views
    vol = recon.TsdfVolume.create((-0.35, -0.35, -0.04), (0.35, 0.35, 0.32),
                                  voxel_size=0.01)
    for frame, _ in rendered:
        recon.tsdf_integrate(vol, frame)
    return vol


@pytest.fixture(scope="session")
def box_object_volume(box_volume):
    return recon.change_detect(box_volume, table_height=0.0)


def two_object_gen_config(seed=5, views=12, scenes=2, eval_scenes=2, multi=1):
    objects = [
        GenObject(make_box_object(1, (0.10, 0.07, 0.12), seed=7)),
        GenObject(sc.SceneObject(
            id=2, name="ball",
            parts=[sc.Part(shape=sc.Sphere(0.05),
                           rest_pose=Pose(np.eye(3), [0.0, 0.0, 0.05]))],
            texture=sc.NoiseTexture(seed=21, scale=0.04))),
    ]
    return GenConfig(objects=objects, scenes_per_object=scenes,
                     eval_scenes_per_object=eval_scenes,
                     multi_object_scenes=multi, views_per_scene=views, seed=seed)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Two objects, 2 train + 2 eval scenes each, 1 multi-object scene."""
    out = tmp_path_factory.mktemp("tiny_ds")
    return generate_dataset(two_object_gen_config(), out)
