import numpy as np
import pytest

from viewseg.decompose import View, Viewpoint
from viewseg.mesh import Mesh
from viewseg.synth import _icosphere


@pytest.fixture
def triangle_mesh():
    return Mesh(
        vertices=[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)],
        faces=[(0, 1, 2)],
    )


@pytest.fixture
def square_mesh():
    # unit square in the z=0 plane, CCW seen from +z
    return Mesh(
        vertices=[(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)],
        faces=[(0, 1, 2), (0, 2, 3)],
    )


@pytest.fixture
def cube_mesh():
    vertices = [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ]
    faces = [
        (0, 2, 1), (0, 3, 2),  # bottom, -z
        (4, 5, 6), (4, 6, 7),  # top, +z
        (0, 1, 5), (0, 5, 4),  # -y
        (2, 3, 7), (2, 7, 6),  # +y
        (0, 4, 7), (0, 7, 3),  # -x
        (1, 2, 6), (1, 6, 5),  # +x
    ]
    return Mesh(vertices=vertices, faces=faces)


@pytest.fixture
def octahedron_mesh():
    vertices = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    faces = [
        (0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4),
        (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5),
    ]
    return Mesh(vertices=vertices, faces=faces)


@pytest.fixture
def grid3x3_mesh():
    # 3x3 planar grid with unit spacing, cells split along the (r,c)-(r+1,c+1)
    # diagonal; vertex index = 3*row + col
    vertices = [(c, r, 0.0) for r in range(3) for c in range(3)]
    faces = []
    for r in range(2):
        for c in range(2):
            a = 3 * r + c
            b = a + 1
            d = a + 4
            e = a + 3
            faces += [(a, b, d), (a, d, e)]
    return Mesh(vertices=vertices, faces=faces)


@pytest.fixture
def icosphere_mesh():
    v, f = _icosphere((0.0, 0.0, 0.0), 1.0, 2)
    return Mesh(vertices=v, faces=f)


@pytest.fixture
def icosahedron_mesh():
    v, f = _icosphere((0.0, 0.0, 0.0), 1.0, 0)
    return Mesh(vertices=v, faces=f)


def make_grid_view(grid_mask, seed=0, num_sources=None, correspondence=None):
    """Synthetic view from a boolean occupancy grid, for classifier tests.

    Vertices are enumerated in row-major grid order with random positions and
    unit normals; faces are irrelevant to the classifier and left empty.
    """
    grid_mask = np.asarray(grid_mask, dtype=bool)
    rows, cols = np.nonzero(grid_mask)
    n = rows.size
    rng = np.random.default_rng(seed)
    positions = rng.normal(size=(n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if correspondence is None:
        num_sources = num_sources or n
        correspondence = np.arange(n) % num_sources
    else:
        correspondence = np.asarray(correspondence, dtype=np.int64)
        num_sources = num_sources or int(correspondence.max()) + 1
    vp = Viewpoint(position=(0.0, 0.0, 5.0), look_at=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0))
    return View(
        mesh=Mesh(vertices=positions, faces=np.zeros((0, 3), dtype=np.int64)),
        signal=np.hstack([positions, normals]),
        correspondence=correspondence,
        grid_pos=np.stack([rows, cols], axis=1),
        viewpoint=vp,
        source_vertex_count=num_sources,
    )
