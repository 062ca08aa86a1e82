import numpy as np
import pytest

from mpm.geometry import (
    CellRegion,
    block_regions,
    build_mesh,
    connected_components,
    outer_support,
    rasterize_shapes,
    region_intersect,
    region_subset,
    region_union,
)
from mpm.mpm_utils import GeometryError


def ring(n=8, inset=1, thickness=1):
    """Square ring on an n x n grid, its outer edge ``inset`` pixels from the rim."""
    outer = CellRegion.block(n, n, inset, inset, n - 2 * inset, n - 2 * inset)
    inner = CellRegion.block(n, n, inset + thickness, inset + thickness,
                             n - 2 * (inset + thickness), n - 2 * (inset + thickness))
    return outer - inner


@pytest.mark.parametrize("nx, ny, triangles, vertices, loop", [
    (1, 1, 2, 4, 4),
    (4, 4, 32, 25, 16),
    (3, 2, 12, 12, 10),
])
def test_mesh_counts(nx, ny, triangles, vertices, loop):
    mesh = build_mesh(nx, ny)
    assert mesh.n_triangles == triangles
    assert mesh.n_vertices == vertices
    assert mesh.boundary_vertices.size == loop
    assert len(set(mesh.boundary_vertices.tolist())) == loop


def test_mesh_area_and_orientation():
    mesh = build_mesh(2, 3, (2.0, 3.0))
    assert abs(mesh.areas.sum() - 6.0) < 1e-12
    assert np.all(mesh.areas > 0)
    assert np.allclose(mesh.vertices[0], [0.0, 0.0])
    assert abs(mesh.perimeter - 10.0) < 1e-12


def test_boundary_loop_is_counter_clockwise():
    mesh = build_mesh(3, 3)
    xy = mesh.boundary_coordinates()
    x, y = xy[:, 0], xy[:, 1]
    signed_area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    assert signed_area == pytest.approx(1.0)


def test_boundary_weights_sum_to_perimeter():
    mesh = build_mesh(5, 2, (1.0, 0.5))
    assert mesh.boundary_weights.sum() == pytest.approx(mesh.perimeter)


@pytest.mark.parametrize("nx, ny", [(0, 1), (1, -2), (2.5, 2)])
def test_mesh_rejects_bad_dimensions(nx, ny):
    with pytest.raises(GeometryError):
        build_mesh(nx, ny)


def test_subset_union_intersect():
    a = CellRegion.from_pixels(2, 1, [0])
    b = CellRegion.from_pixels(2, 1, [1])
    empty = CellRegion.empty(2, 1)
    assert region_subset(empty, a)
    assert region_subset(a, a)
    assert region_union(a, a) == a
    assert region_intersect(a, a) == a
    assert not region_subset(a, b)
    assert region_union(a, b) == CellRegion.full(2, 1)
    assert region_intersect(a, b).is_empty()


def test_set_operations_reject_mismatched_grids():
    with pytest.raises(GeometryError):
        region_union(CellRegion.empty(2, 2), CellRegion.empty(3, 2))


def test_diagonal_pixels_are_separate_components():
    region = CellRegion.from_pixels(2, 2, [0, 3])
    assert connected_components(region).count == 2


def test_full_grid_is_one_rim_component():
    components = connected_components(CellRegion.full(5, 4))
    assert components.count == 1
    assert components.touches_domain_boundary == (True,)


def test_inset_ring_is_one_interior_component():
    components = connected_components(ring(8, inset=1))
    assert components.count == 1
    assert components.touches_domain_boundary == (False,)


def test_outer_support_fills_cavity():
    annulus = ring(8, inset=1, thickness=2)
    filled = outer_support(annulus)
    assert filled == CellRegion.block(8, 8, 1, 1, 6, 6)
    assert (filled - annulus).count == 4


def test_outer_support_keeps_cavity_free_regions():
    blobs = CellRegion.block(8, 8, 1, 1, 2, 2) | CellRegion.block(8, 8, 5, 4, 2, 3)
    assert outer_support(blobs) == blobs


def test_outer_support_is_extensive_idempotent_and_monotone(rng):
    for _ in range(30):
        a = CellRegion(7, 6, rng.random(42) < 0.35)
        b = a | CellRegion(7, 6, rng.random(42) < 0.2)
        star = outer_support(a)
        assert a <= star
        assert outer_support(star) == star
        assert star <= outer_support(b)


def _union_find_count(region):
    parent = {p: p for p in region.pixels.tolist()}

    def find(p):
        while parent[p] != p:
            parent[p] = parent[parent[p]]
            p = parent[p]
        return p

    for p in parent:
        j, i = divmod(p, region.nx)
        for q in ((p + 1) if i + 1 < region.nx else None, (p + region.nx) if j + 1 < region.ny else None):
            if q is not None and q in parent:
                parent[find(p)] = find(q)
    return len({find(p) for p in parent})


def test_component_count_matches_union_find(rng):
    for _ in range(40):
        nx, ny = rng.integers(1, 7, size=2)
        region = CellRegion(int(nx), int(ny), rng.random(int(nx * ny)) < 0.45)
        assert connected_components(region).count == _union_find_count(region)


def test_rasterize_rect_disc_and_subtract():
    square = rasterize_shapes(16, 16, [{"shape": "rect", "i0": 6, "j0": 6, "i1": 10, "j1": 10}])
    assert square == CellRegion.block(16, 16, 6, 6, 4, 4)
    annulus = rasterize_shapes(16, 16, [
        {"shape": "rect", "i0": 4, "j0": 4, "i1": 12, "j1": 12},
        {"shape": "rect", "i0": 6, "j0": 6, "i1": 10, "j1": 10, "mode": "subtract"},
    ])
    assert annulus.count == 64 - 16
    disc = rasterize_shapes(8, 8, [{"shape": "disc", "cx": 4, "cy": 4, "r": 1}])
    assert disc.count == 4
    with pytest.raises(GeometryError):
        rasterize_shapes(4, 4, [{"shape": "hexagon"}])


def test_bounding_box_is_half_open():
    region = CellRegion.block(10, 8, 2, 3, 4, 2)
    assert region.bounding_box() == (2, 3, 6, 5)


def test_block_regions_cover_grid():
    blocks = block_regions(6, 4, 2)
    assert len(blocks) == 5 * 3
    assert all(b.count == 4 for b in blocks)
    with pytest.raises(GeometryError):
        block_regions(3, 3, 4)


def test_triangle_mask_selects_two_triangles_per_pixel():
    mesh = build_mesh(3, 3)
    region = CellRegion.from_pixels(3, 3, [4])
    assert region.triangle_indices(mesh).tolist() == [8, 9]
