"""Shared fixtures: compact problems small enough for dense oracles."""
import numpy as np
import pytest

from eddy2d.assembly import MaterialTable, SourceSpec
from eddy2d.integrate import discretize
from eddy2d.materials import MaterialModel, NU0
from eddy2d.mesh import RegionTag, generate_rect_mesh

STEEL_LINEAR = MaterialModel.linear(5e7, 570.0)
STEEL_BRAUER = MaterialModel.brauer(5e7, 520.6, 49.4, 1.46)
AIR = MaterialModel.linear(0.0, NU0)


def mini_region_fn(x, y):
    """0.1 x 0.1 domain, 10x10 cells: coil low, one conductor block above,
    probe strip on top of the conductor."""
    if 0.02 <= x < 0.08 and 0.01 <= y < 0.03:
        return RegionTag("coil", 0)
    if 0.02 <= x < 0.08 and 0.05 <= y < 0.08:
        return RegionTag("conductor", 0)
    if 0.02 <= x < 0.08 and 0.08 <= y < 0.09:
        return RegionTag("air", 0, probe=0)
    return RegionTag("air")


def make_mini_mesh():
    return generate_rect_mesh(0.1, 0.1, 10, 10, mini_region_fn)


def make_mini_problem(nonlinear=False):
    mesh = make_mini_mesh()
    steel = STEEL_BRAUER if nonlinear else STEEL_LINEAR
    materials = MaterialTable({0: steel}, AIR)
    return discretize(mesh, materials, probe_id=0)


def make_mini_source(i_max=400.0, tau=0.05, turns=100.0):
    return SourceSpec(0, i_max=i_max, tau=tau, turns=turns)


@pytest.fixture
def mini_problem():
    return make_mini_problem(nonlinear=False)


@pytest.fixture
def mini_problem_nonlinear():
    return make_mini_problem(nonlinear=True)


@pytest.fixture
def mini_source():
    return make_mini_source()


def dense_kS(blocks) -> np.ndarray:
    """Dense oracle K_S = K_cn K_nn^-1 K_cn^T (regular K_nn)."""
    K_cn = blocks.K_cn.toarray()
    K_nn = blocks.K_nn.toarray()
    return K_cn @ np.linalg.solve(K_nn, K_cn.T)
