import numpy as np
import pytest

from qscontact.dispersal import Gaussian
from qscontact.marks import MarkKernel, MarkSpace, leading_eigen


@pytest.fixture
def two_mark():
    """Symmetric 2-mark kernel Q = ((2,1),(1,2)) with nu = (1/2, 1/2)."""
    space = MarkSpace(np.array([0.5, 0.5]))
    return MarkKernel(space, np.array([[2.0, 1.0], [1.0, 2.0]]))


@pytest.fixture
def two_mark_mortality():
    space = MarkSpace(np.array([0.5, 0.5]))
    return MarkKernel(space, np.array([[2.0, 1.0], [1.0, 2.0]]), np.array([2.0, 1.0]))


@pytest.fixture
def asymmetric():
    space = MarkSpace(np.array([0.5, 0.5]))
    return MarkKernel(space, np.array([[2.0, 1.0], [3.0, 4.0]]))


@pytest.fixture
def markless():
    return MarkKernel(MarkSpace.single(), np.ones((1, 1)))


@pytest.fixture
def gauss3():
    return Gaussian(3, 1.0)


def dense_perron(mat):
    """Dense-eigensolver oracle: Perron root and positive right eigenvector."""
    vals, vecs = np.linalg.eig(mat)
    i = int(np.argmax(vals.real))
    v = np.abs(vecs[:, i].real)
    return float(vals[i].real), v, vals


@pytest.fixture
def eig_two(two_mark):
    return leading_eigen(two_mark)
