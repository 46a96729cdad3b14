import numpy as np
import pytest

from prelu_extract.network import PReluNetwork


@pytest.fixture
def tiny_net():
    """1-1-1 network with f(1) = 7, f(0) = 1, f(-1) = -2."""
    return PReluNetwork([np.array([[2.0]]), np.array([[3.0]])],
                        [np.array([0.0]), np.array([1.0])],
                        [np.array([0.5])])


@pytest.fixture
def kink_net():
    """2-1-1 network whose only kink is the line x1 = x2."""
    return PReluNetwork([np.array([[1.0, -1.0]]), np.array([[2.0]])],
                        [np.array([0.0]), np.array([0.0])],
                        [np.array([0.5])])
