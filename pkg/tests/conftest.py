import numpy as np
import pytest

from regal.geometry import OrientedBox
from regal.scenegen import Actor, FeatureRaster, GenConfig, Scene, generate_pool


def make_actor(actor_id, cx, cy, length=4.5, width=2.0, heading=0.0,
               behavior="parked", speed=0.0, turn_rate=0.0, point_count=20, horizon=10, dt=0.5):
    actor = Actor(actor_id, OrientedBox(cx, cy, length, width, heading),
                  np.empty((0, 2)), behavior, speed, point_count, turn_rate)
    actor.trajectory = np.array([actor.position_at(k * dt)[:2] for k in range(1, horizon + 1)])
    return actor


def make_scene(actors, scene_id=0, extent=(100.0, 100.0), raster_shape=(3, 40, 40), cell_size=2.5):
    return Scene(scene_id=scene_id, extent=extent, actors=list(actors),
                 features=FeatureRaster(cell_size, np.zeros(raster_shape)),
                 sdv_position=(extent[0] / 2.0, extent[1] / 2.0))


@pytest.fixture(scope="session")
def small_gen_cfg():
    return GenConfig(n_scenes=40, seed=123)


@pytest.fixture(scope="session")
def small_pool(small_gen_cfg):
    return generate_pool(small_gen_cfg)


def random_box(rng, extent=100.0):
    return OrientedBox(
        cx=float(rng.uniform(5, extent - 5)),
        cy=float(rng.uniform(5, extent - 5)),
        length=float(rng.uniform(2.0, 8.0)),
        width=float(rng.uniform(1.0, 4.0)),
        heading=float(rng.uniform(0, 2 * np.pi)),
    )
