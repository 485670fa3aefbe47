import pytest

from gridforge import Geometry, Topology, cell_bounding_box, cell_center, children_of


def test_unit_cell_center():
    topo = Topology(1, 1, 1, 0)
    geom = Geometry()
    assert cell_center(topo, geom, 1) == (0.5, 0.5, 0.5)


def test_gol_grid_center():
    topo = Topology(10, 10, 1, 0)
    geom = Geometry(level0_size=(1.0, 1.0, 1.0))
    assert cell_center(topo, geom, 1) == (0.5, 0.5, 0.5)


def test_first_child_center():
    topo = Topology(1, 1, 1, 1)
    geom = Geometry()
    assert cell_center(topo, geom, 2) == (0.25, 0.25, 0.25)
    lo, hi = cell_bounding_box(topo, geom, 2)
    assert lo == (0.0, 0.0, 0.0) and hi == (0.5, 0.5, 0.5)


def test_unit_bounding_box():
    topo = Topology(1, 1, 1, 0)
    geom = Geometry()
    assert cell_bounding_box(topo, geom, 1) == ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


def test_children_tile_parent_exactly():
    topo = Topology(2, 1, 1, 2)
    geom = Geometry(origin=(-1.0, 0.5, 2.0), level0_size=(2.0, 4.0, 8.0))
    for parent in (1, 2, 3):
        plo, phi = cell_bounding_box(topo, geom, parent)
        kids = children_of(topo, parent)
        los = sorted(cell_bounding_box(topo, geom, k)[0] for k in kids)
        his = sorted(cell_bounding_box(topo, geom, k)[1] for k in kids)
        assert los[0] == plo and his[-1] == phi
        mid = tuple((plo[d] + phi[d]) / 2 for d in range(3))
        # each child box is exactly one octant of the parent box
        for kid in kids:
            klo, khi = cell_bounding_box(topo, geom, kid)
            for d in range(3):
                assert (klo[d], khi[d]) in ((plo[d], mid[d]), (mid[d], phi[d]))


def test_halving_rule():
    topo = Topology(1, 1, 1, 3)
    geom = Geometry(level0_size=(8.0, 8.0, 8.0))
    cell = 1
    for level in range(topo.max_level):
        child = children_of(topo, cell)[0]
        lo, hi = cell_bounding_box(topo, geom, child)
        assert hi[0] - lo[0] == 8.0 / 2 ** (level + 1)
        cell = child


def test_center_inside_box():
    topo = Topology(3, 2, 1, 2)
    geom = Geometry(origin=(0.1, -0.2, 0.3), level0_size=(0.7, 1.3, 2.1))
    for cell in (1, 4, 7, 20, 50):
        lo, hi = cell_bounding_box(topo, geom, cell)
        center = cell_center(topo, geom, cell)
        for d in range(3):
            assert lo[d] < center[d] < hi[d]


def test_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        Geometry(level0_size=(1.0, 0.0, 1.0))
