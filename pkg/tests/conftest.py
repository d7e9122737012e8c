import numpy as np
import pytest

from exposim.geometry import TetMesh, bind_material_point, gen_wedge_phantom
from exposim.exposure import DissectionSegment, init_observation
from exposim.xpbd import SimConfig, default_constraints, init_sim


@pytest.fixture(scope="session")
def slab():
    """Flat slab, 80 x 60 x 10 mm."""
    return gen_wedge_phantom(180.0, size=(0.08, 0.06, 0.01), resolution=(8, 2, 2))


@pytest.fixture(scope="session")
def wedge90():
    """90-degree analytic wedge, groove depth 8 mm in a 20 mm block."""
    return gen_wedge_phantom(90.0, size=(0.08, 0.08, 0.02), resolution=(8, 3, 3), groove_depth=0.008)


@pytest.fixture(scope="session")
def wedge45():
    """45-degree wedge phantom at the scenario scale."""
    return gen_wedge_phantom(45.0, size=(0.06, 0.05, 0.024), resolution=(9, 3, 3), groove_depth=0.014)


@pytest.fixture(scope="session")
def small_free_mesh():
    """Small block with no fixed vertices (free floating)."""
    m = gen_wedge_phantom(45.0, size=(0.03, 0.03, 0.01), resolution=(4, 2, 2))
    return TetMesh.build(m.vertices, m.tets)


def make_wedge_features(mesh, apex_z, ks=(0.0, 0.25, 0.5, 0.75, 1.0),
                        radii=(0.003, 0.006), wedge_target=0.0,
                        x_a=0.0205, x_b=0.0615):
    state = mesh.rest_state()
    surf = mesh.surface
    q1 = bind_material_point(surf, [x_a, 0.0, apex_z], state)
    q2 = bind_material_point(surf, [x_b, 0.0, apex_z], state)
    segment = DissectionSegment(q1, q2)
    features = init_observation(surf, state, segment, ks=ks, radii=radii,
                                wedge_target=wedge_target)
    return segment, features, state


@pytest.fixture(scope="session")
def wedge90_features(wedge90):
    segment, features, state = make_wedge_features(wedge90, apex_z=0.012)
    return wedge90, segment, features, state


@pytest.fixture()
def coupled_sim(wedge45):
    """Wedge sim with a top face coupled, ready for small displacements."""
    sim = init_sim(wedge45, default_constraints(wedge45, distance_compliance=1.5,
                                                shape_compliance=30.0),
                   SimConfig(track_energy=True))
    surf = wedge45.surface
    normals, _ = surf.normals_areas(sim.positions)
    cents = surf.centroids(sim.positions)
    top = np.nonzero((normals[:, 2] > 0.9) & (cents[:, 1] > 0.008))[0]
    coupling = sim.couple_face(int(top[len(top) // 2]))
    return sim, coupling
