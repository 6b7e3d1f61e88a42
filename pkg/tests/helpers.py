"""Shared builders for tests."""

import numpy as np

from neural_descent.bodymodel import PRISM_TRIANGLES, Mesh, random_rotation
from neural_descent.camera import Intrinsics

CROP_C = Intrinsics(400.0, 400.0, 240.0, 240.0)


def random_prism(rng, num_parts=15):
    """One box prism with random extent, orientation and placement in front of CROP_C."""
    half = rng.uniform([0.05, 0.05, 0.1], [0.2, 0.2, 0.4])
    signs = np.array([[-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
                      [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)
    R = random_rotation(rng)
    center = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(2.0, 3.5)])
    verts = (signs * half) @ R.T + center
    sem = np.zeros((8, num_parts + 1))
    sem[:, int(rng.integers(num_parts))] = 1.0
    sem[:, -1] = 1.0
    return Mesh(verts, PRISM_TRIANGLES.copy(), sem)
