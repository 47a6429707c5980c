import pytest

from det3d.geom import Box3D


@pytest.fixture
def unit_box():
    return Box3D(0, 0, 0, 1, 1, 1, 0)
