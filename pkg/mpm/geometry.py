"""
Structured triangle meshes on a rectangle, pixel regions, 4-adjacency components
and the outer support of a region.

Pixels are indexed row-major, ``p = j * nx + i`` with ``i`` along x and ``j``
along y. Every pixel is split along the diagonal from its lower-left to its
upper-right corner, giving triangles ``2p`` and ``2p + 1``.
"""
from dataclasses import dataclass
from typing import Any, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
import structlog
from scipy import ndimage

from mpm.mpm_utils import GeometryError

logger = structlog.get_logger(__name__)

FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class StructuredTriMesh:
    """Triangulated rectangle with an ordered counter-clockwise boundary loop."""

    nx: int
    ny: int
    extent: Tuple[float, float]
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_vertices: np.ndarray
    boundary_edges: np.ndarray
    boundary_edge_lengths: np.ndarray
    pixel_to_triangles: np.ndarray
    areas: np.ndarray
    gradient_operators: np.ndarray
    boundary_weights: np.ndarray
    boundary_arclength: np.ndarray
    interior_vertices: np.ndarray

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    @property
    def spacing(self) -> Tuple[float, float]:
        return self.extent[0] / self.nx, self.extent[1] / self.ny

    @property
    def perimeter(self) -> float:
        return float(self.boundary_edge_lengths.sum())

    @property
    def triangle_pixels(self) -> np.ndarray:
        return np.arange(self.n_triangles) // 2

    def pixel_centers(self) -> np.ndarray:
        hx, hy = self.spacing
        jj, ii = np.divmod(np.arange(self.n_pixels), self.nx)
        return np.column_stack([(ii + 0.5) * hx, (jj + 0.5) * hy])

    def rim_pixels(self) -> np.ndarray:
        return rim_mask(self.nx, self.ny).ravel()

    def boundary_coordinates(self) -> np.ndarray:
        return self.vertices[self.boundary_vertices]


def build_mesh(nx: int, ny: int, extent: Sequence[float] = (1.0, 1.0)) -> StructuredTriMesh:
    """Build the structured mesh of the rectangle ``[0, W] x [0, H]``."""
    for name, value in (("nx", nx), ("ny", ny)):
        if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
            raise GeometryError(f"{name} must be a positive integer, got {value!r}")
    if len(extent) != 2 or not all(np.isfinite(e) and e > 0 for e in extent):
        raise GeometryError(f"extent must be a positive pair, got {extent!r}")
    nx, ny = int(nx), int(ny)
    width, height = float(extent[0]), float(extent[1])

    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(i, j):
        return j * (nx + 1) + i

    jj, ii = np.divmod(np.arange(nx * ny), nx)
    v00, v10 = vid(ii, jj), vid(ii + 1, jj)
    v11, v01 = vid(ii + 1, jj + 1), vid(ii, jj + 1)
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = np.column_stack([v00, v10, v11])
    triangles[1::2] = np.column_stack([v00, v11, v01])
    pixel_to_triangles = np.column_stack([2 * np.arange(nx * ny), 2 * np.arange(nx * ny) + 1])

    loop = np.concatenate([
        vid(np.arange(nx), 0),
        vid(nx, np.arange(ny)),
        vid(np.arange(nx, 0, -1), ny),
        vid(0, np.arange(ny, 0, -1)),
    ]).astype(np.int64)
    edges = np.column_stack([loop, np.roll(loop, -1)])
    lengths = np.linalg.norm(vertices[edges[:, 1]] - vertices[edges[:, 0]], axis=1)
    weights = 0.5 * (lengths + np.roll(lengths, 1))
    arclength = np.concatenate([[0.0], np.cumsum(lengths)[:-1]])

    p0, p1, p2 = (vertices[triangles[:, k]] for k in range(3))
    double_area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    # grad(phi_k) = (y_{k+1} - y_{k+2}, x_{k+2} - x_{k+1}) / (2 * area)
    b = np.column_stack([p1[:, 1] - p2[:, 1], p2[:, 1] - p0[:, 1], p0[:, 1] - p1[:, 1]])
    c = np.column_stack([p2[:, 0] - p1[:, 0], p0[:, 0] - p2[:, 0], p1[:, 0] - p0[:, 0]])
    gradient_operators = np.stack([b, c], axis=1) / double_area[:, None, None]

    interior = np.setdiff1d(np.arange(len(vertices)), loop)

    mesh = StructuredTriMesh(
        nx=nx,
        ny=ny,
        extent=(width, height),
        vertices=_frozen(vertices),
        triangles=_frozen(triangles),
        boundary_vertices=_frozen(loop),
        boundary_edges=_frozen(edges),
        boundary_edge_lengths=_frozen(lengths),
        pixel_to_triangles=_frozen(pixel_to_triangles),
        areas=_frozen(0.5 * double_area),
        gradient_operators=_frozen(gradient_operators),
        boundary_weights=_frozen(weights),
        boundary_arclength=_frozen(arclength),
        interior_vertices=_frozen(interior),
    )
    logger.debug("🧱 Built structured mesh", nx=nx, ny=ny, vertices=mesh.n_vertices, triangles=mesh.n_triangles)
    return mesh


def rim_mask(nx: int, ny: int) -> np.ndarray:
    """Boolean (ny, nx) grid of pixels touching the rectangle boundary."""
    rim = np.zeros((ny, nx), dtype=bool)
    rim[0, :] = rim[-1, :] = True
    rim[:, 0] = rim[:, -1] = True
    return rim


@dataclass(frozen=True, eq=False)
class CellRegion:
    """Set of pixels on an ``nx`` by ``ny`` grid, stored as a flat bitmask."""

    nx: int
    ny: int
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool).ravel()
        if self.nx < 1 or self.ny < 1:
            raise GeometryError(f"region grid must be positive, got {self.nx}x{self.ny}")
        if mask.size != self.nx * self.ny:
            raise GeometryError(f"bitmask length {mask.size} does not match grid {self.nx}x{self.ny}")
        object.__setattr__(self, "mask", _frozen(mask.copy()))

    @classmethod
    def empty(cls, nx: int, ny: int) -> "CellRegion":
        return cls(nx, ny, np.zeros(nx * ny, dtype=bool))

    @classmethod
    def full(cls, nx: int, ny: int) -> "CellRegion":
        return cls(nx, ny, np.ones(nx * ny, dtype=bool))

    @classmethod
    def from_pixels(cls, nx: int, ny: int, pixels: Iterable[int]) -> "CellRegion":
        mask = np.zeros(nx * ny, dtype=bool)
        pixels = np.fromiter(pixels, dtype=np.int64)
        if pixels.size and (pixels.min() < 0 or pixels.max() >= nx * ny):
            raise GeometryError("pixel index out of range")
        mask[pixels] = True
        return cls(nx, ny, mask)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "CellRegion":
        grid = np.asarray(grid, dtype=bool)
        ny, nx = grid.shape
        return cls(nx, ny, grid.ravel())

    @classmethod
    def block(cls, nx: int, ny: int, i0: int, j0: int, width: int, height: int) -> "CellRegion":
        grid = np.zeros((ny, nx), dtype=bool)
        grid[max(j0, 0):min(j0 + height, ny), max(i0, 0):min(i0 + width, nx)] = True
        return cls.from_grid(grid)

    @property
    def grid(self) -> np.ndarray:
        return self.mask.reshape(self.ny, self.nx)

    @property
    def pixels(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def is_empty(self) -> bool:
        return not self.mask.any()

    def touches_rim(self) -> bool:
        return bool((self.grid & rim_mask(self.nx, self.ny)).any())

    def matches(self, mesh: StructuredTriMesh) -> bool:
        return (self.nx, self.ny) == (mesh.nx, mesh.ny)

    def triangle_indices(self, mesh: StructuredTriMesh) -> np.ndarray:
        if not self.matches(mesh):
            raise GeometryError(f"region grid {self.nx}x{self.ny} does not match mesh {mesh.nx}x{mesh.ny}")
        return np.sort(mesh.pixel_to_triangles[self.pixels].ravel())

    def triangle_mask(self, mesh: StructuredTriMesh) -> np.ndarray:
        mask = np.zeros(mesh.n_triangles, dtype=bool)
        mask[self.triangle_indices(mesh)] = True
        return mask

    def bounding_box(self) -> Tuple[int, int, int, int]:
        """Half-open pixel box ``(i0, j0, i1, j1)`` of a non-empty region."""
        if self.is_empty():
            raise GeometryError("empty region has no bounding box")
        jj, ii = np.nonzero(self.grid)
        return int(ii.min()), int(jj.min()), int(ii.max()) + 1, int(jj.max()) + 1

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CellRegion):
            return NotImplemented
        return (self.nx, self.ny) == (other.nx, other.ny) and bool(np.array_equal(self.mask, other.mask))

    __hash__ = None

    def __le__(self, other: "CellRegion") -> bool:
        return region_subset(self, other)

    def __or__(self, other: "CellRegion") -> "CellRegion":
        return region_union(self, other)

    def __and__(self, other: "CellRegion") -> "CellRegion":
        return region_intersect(self, other)

    def __sub__(self, other: "CellRegion") -> "CellRegion":
        return region_difference(self, other)

    def __repr__(self) -> str:
        return f"CellRegion({self.nx}x{self.ny}, {self.count} pixels)"


def _check_dims(a: CellRegion, b: CellRegion) -> None:
    if (a.nx, a.ny) != (b.nx, b.ny):
        raise GeometryError(f"grid mismatch: {a.nx}x{a.ny} vs {b.nx}x{b.ny}")


def region_subset(a: CellRegion, b: CellRegion) -> bool:
    _check_dims(a, b)
    return not bool((a.mask & ~b.mask).any())


def region_union(a: CellRegion, b: CellRegion) -> CellRegion:
    _check_dims(a, b)
    return CellRegion(a.nx, a.ny, a.mask | b.mask)


def region_intersect(a: CellRegion, b: CellRegion) -> CellRegion:
    _check_dims(a, b)
    return CellRegion(a.nx, a.ny, a.mask & b.mask)


def region_difference(a: CellRegion, b: CellRegion) -> CellRegion:
    _check_dims(a, b)
    return CellRegion(a.nx, a.ny, a.mask & ~b.mask)


def union_all(regions: Sequence[CellRegion], nx: int, ny: int) -> CellRegion:
    mask = np.zeros(nx * ny, dtype=bool)
    for region in regions:
        if (region.nx, region.ny) != (nx, ny):
            raise GeometryError(f"grid mismatch: {region.nx}x{region.ny} vs {nx}x{ny}")
        mask |= region.mask
    return CellRegion(nx, ny, mask)


@dataclass(frozen=True, eq=False)
class RegionComponents:
    """4-adjacency components. ``labels`` is 0 outside the region, 1..count inside."""

    count: int
    labels: np.ndarray
    touches_domain_boundary: Tuple[bool, ...]

    def component(self, label: int, nx: int, ny: int) -> CellRegion:
        return CellRegion(nx, ny, self.labels == label)


def connected_components(region: CellRegion) -> RegionComponents:
    labels, count = ndimage.label(region.grid, structure=FOUR_NEIGHBOURS)
    on_rim = set(np.unique(labels[rim_mask(region.nx, region.ny)]).tolist()) - {0}
    touches = tuple(label in on_rim for label in range(1, count + 1))
    return RegionComponents(count=int(count), labels=_frozen(labels.ravel().astype(np.int64)), touches_domain_boundary=touches)


def component_regions(region: CellRegion) -> List[CellRegion]:
    components = connected_components(region)
    return [components.component(k, region.nx, region.ny) for k in range(1, components.count + 1)]


def outer_support(region: CellRegion) -> CellRegion:
    """The region plus every complement pocket not connected to the grid rim."""
    complement = ~region.grid
    labels, _ = ndimage.label(complement, structure=FOUR_NEIGHBOURS)
    reached = np.unique(labels[rim_mask(region.nx, region.ny) & complement])
    reached = reached[reached > 0]
    return CellRegion.from_grid(~np.isin(labels, reached))


def rasterize_shapes(nx: int, ny: int, shapes: Iterable[Mapping[str, Any]]) -> CellRegion:
    """
    Rasterize rectangle and disc literals given in pixel coordinates.

    A pixel belongs to a shape when its center ``(i + 0.5, j + 0.5)`` does.
    Shapes apply in order; ``mode: "subtract"`` removes pixels (e.g. an annulus
    is a rectangle followed by a subtracted inner rectangle).
    """
    jj, ii = np.mgrid[0:ny, 0:nx]
    cx, cy = ii + 0.5, jj + 0.5
    grid = np.zeros((ny, nx), dtype=bool)
    for shape in shapes:
        kind = shape.get("shape")
        if kind == "rect":
            inside = (cx >= shape["i0"]) & (cx <= shape["i1"]) & (cy >= shape["j0"]) & (cy <= shape["j1"])
        elif kind == "disc":
            inside = (cx - shape["cx"]) ** 2 + (cy - shape["cy"]) ** 2 <= shape["r"] ** 2
        else:
            raise GeometryError(f"unknown region shape {kind!r}")
        if shape.get("mode", "add") == "subtract":
            grid &= ~inside
        else:
            grid |= inside
    return CellRegion.from_grid(grid)


def block_regions(nx: int, ny: int, k: int, stride: int = 1) -> List[CellRegion]:
    """All ``k`` by ``k`` pixel blocks sweeping the grid with the given stride."""
    if k < 1 or stride < 1:
        raise GeometryError(f"block size and stride must be positive, got k={k}, stride={stride}")
    if k > nx or k > ny:
        raise GeometryError(f"block size {k} exceeds grid {nx}x{ny}")
    return [
        CellRegion.block(nx, ny, i0, j0, k, k)
        for j0 in range(0, ny - k + 1, stride)
        for i0 in range(0, nx - k + 1, stride)
    ]
