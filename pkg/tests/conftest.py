import numpy as np
import pytest

from ctbench.phantom import default_spec, make_phantom
from ctbench.volume import Grid3, Mask3


@pytest.fixture(scope="session")
def default_phantom():
    """The shipped 64^3 labeled phantom; rasterized once per test session."""
    return make_phantom(default_spec())


@pytest.fixture(scope="session")
def label_of_name(default_phantom):
    _, lv = default_phantom

    def lookup(name: str) -> int:
        for lab, (n, _cat) in lv.table.items():
            if n == name:
                return lab
        raise KeyError(name)

    return lookup


def digital_sphere(radius_mm: float, spacing: float = 1.0, margin_mm: float = 6.0) -> Mask3:
    """Voxelized ball centered on a symmetric grid."""
    n = int(2 * (radius_mm + margin_mm) / spacing) + 1
    grid = Grid3.centered((n, n, n), (spacing,) * 3)
    c = np.arange(n) * spacing + grid.origin_mm[0]
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return Mask3(grid, x * x + y * y + z * z <= radius_mm * radius_mm)
