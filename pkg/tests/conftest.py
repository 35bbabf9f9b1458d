import numpy as np
import pytest

from irnct.core import circular_geometry

# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_geom():
    """16^3 unit voxels, 8 views, detector comfortably covering the volume."""
    return circular_geometry(8, 60.0, 100.0, (28, 24), (1.5, 1.5))


def slab_lengths(src, end, dims, spacing, bmin):
    """Exhaustive oracle: clip the ray against every voxel box independently.

    Returns a flat x-fastest array of intersection lengths in mm.
    """
    src = np.asarray(src, float)
    d = np.asarray(end, float) - src
    L = np.linalg.norm(d)
    nx, ny, nz = dims
    out = np.zeros(nx * ny * nz)
    for iz in range(nz):
        for iy in range(ny):
            for ix in range(nx):
                lo = np.asarray(bmin) + np.array([ix, iy, iz]) * np.asarray(spacing)
                hi = lo + np.asarray(spacing)
                t0, t1 = 0.0, 1.0
                miss = False
                for a in range(3):
                    if d[a] == 0.0:
                        if not lo[a] <= src[a] < hi[a]:
                            miss = True
                            break
                        continue
                    ta, tb = sorted(((lo[a] - src[a]) / d[a], (hi[a] - src[a]) / d[a]))
                    t0, t1 = max(t0, ta), min(t1, tb)
                if not miss and t1 > t0:
                    out[ix + nx * (iy + ny * iz)] = (t1 - t0) * L
    return out
