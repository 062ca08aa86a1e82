"""
Zero-mean Dirichlet boundary data: Fourier harmonics along the rim,
coordinate profiles, and explicit depleting potentials that drive a target
region towards zero energy.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, Field

from config import settings
from mpm.forward import gradient_energy_density, linear_power_products, linear_solutions
from mpm.geometry import CellRegion, StructuredTriMesh
from mpm.materials import as_background
from mpm.mpm_utils import DegenerateExcitationError, ExcitationError

logger = structlog.get_logger(__name__)


@dataclass(frozen=True, eq=False)
class BoundaryExcitation:
    """Per-boundary-vertex values in the mesh's counter-clockwise loop order."""

    values: np.ndarray
    label: str
    note: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel().copy()
        if not np.all(np.isfinite(values)):
            raise ExcitationError(f"excitation {self.label!r} has non-finite values")
        if not np.any(values):
            raise DegenerateExcitationError(f"excitation {self.label!r} is identically zero")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


class DepletingParams(BaseModel):
    """Anchor, direction and per-index scales of a depleting sequence."""
    side: str = Field(description="Rim side holding the anchor: bottom, right, top or left")
    anchor: Tuple[float, float] = Field(description="Anchor point x0 at the middle of the side")
    normal: Tuple[float, float] = Field(description="Inward unit normal nu")
    delta: float = Field(gt=0, description="Standoff between the side and the target's bounding box")
    attenuations: List[float] = Field(description="delta_n = delta / 2**n")
    wavenumbers: List[float] = Field(description="beta_n = 1 / delta_n")
    amplitudes: List[float] = Field(description="a_n normalizing the background power to one")


@dataclass(frozen=True, eq=False)
class ExcitationFamily:
    """Ordered, label-unique family standing in for the set of all zero-mean data."""

    members: Tuple[BoundaryExcitation, ...]
    recipe: Dict[str, Any] = field(default_factory=dict)
    depleting: Optional[DepletingParams] = None

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ExcitationError("excitation family is empty")
        labels = [m.label for m in members]
        duplicates = sorted({label for label in labels if labels.count(label) > 1})
        if duplicates:
            raise ExcitationError(f"duplicate excitation labels: {duplicates}")
        if len({m.values.size for m in members}) != 1:
            raise ExcitationError("family members have different boundary lengths")
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def labels(self) -> List[str]:
        return [m.label for m in self.members]

    def boundary_matrix(self) -> np.ndarray:
        """Stacked boundary data, shape (n_members, n_boundary_vertices)."""
        return np.vstack([m.values for m in self.members])


def zero_mean_project(values, weights=None) -> np.ndarray:
    """
    Subtract the (edge-length weighted) mean; idempotent.

    Raises DegenerateExcitationError when nothing is left, i.e. the input was constant.
    """
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ExcitationError("cannot project an empty boundary vector")
    w = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != values.shape:
        raise ExcitationError(f"weights have shape {w.shape}, values {values.shape}")
    projected = values - (w @ values) / w.sum()
    if np.max(np.abs(projected)) <= 1e-12 * max(1.0, float(np.max(np.abs(values)))):
        raise DegenerateExcitationError("boundary data is constant; nothing remains after removing the mean")
    return projected


def fourier_family(mesh: StructuredTriMesh, K: int) -> ExcitationFamily:
    """2K harmonics cos/sin(2 pi k l / perimeter), k = 1..K, projected and max-normalized."""
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or K < 1:
        raise ExcitationError(f"Fourier order must be a positive integer, got {K!r}")
    phase = 2.0 * np.pi * mesh.boundary_arclength / mesh.perimeter
    members = []
    for k in range(1, K + 1):
        for name, wave in (("cos", np.cos), ("sin", np.sin)):
            values = zero_mean_project(wave(k * phase), mesh.boundary_weights)
            members.append(BoundaryExcitation(values / np.max(np.abs(values)), label=f"{name}{k}",
                                              note="zero-mean, max-normalized"))
    logger.debug("🌊 Built Fourier family", K=K, members=len(members))
    return ExcitationFamily(members=tuple(members), recipe={"type": "fourier", "K": int(K)})


def coordinate_excitation(mesh: StructuredTriMesh, axis: str = "x") -> BoundaryExcitation:
    """The coordinate profile x (or y) on the rim, minus its weighted mean."""
    column = {"x": 0, "y": 1}.get(axis)
    if column is None:
        raise ExcitationError(f"axis must be 'x' or 'y', got {axis!r}")
    values = zero_mean_project(mesh.boundary_coordinates()[:, column], mesh.boundary_weights)
    return BoundaryExcitation(values, label=axis, note="coordinate profile")


def _side_gaps(mesh: StructuredTriMesh, region: CellRegion) -> Dict[str, float]:
    i0, j0, i1, j1 = region.bounding_box()
    hx, hy = mesh.spacing
    return {
        "bottom": j0 * hy,
        "right": (mesh.nx - i1) * hx,
        "top": (mesh.ny - j1) * hy,
        "left": i0 * hx,
    }


def _side_frame(mesh: StructuredTriMesh, side: str):
    width, height = mesh.extent
    xy = mesh.boundary_coordinates()
    x, y = xy[:, 0], xy[:, 1]
    if side == "bottom":
        return (0.5 * width, 0.0), (0.0, 1.0), y, x - 0.5 * width
    if side == "top":
        return (0.5 * width, height), (0.0, -1.0), height - y, x - 0.5 * width
    if side == "left":
        return (0.0, 0.5 * height), (1.0, 0.0), x, y - 0.5 * height
    return (width, 0.5 * height), (-1.0, 0.0), width - x, y - 0.5 * height


def depleting_sequence(mesh: StructuredTriMesh, background, region: CellRegion, n_max: int,
                       start: int = 1) -> ExcitationFamily:
    """
    Explicit depleting potentials f_n = a_n exp(-xi_N / delta_n) sin(xi_1 / delta_n)
    on the rim, with delta_n = delta / 2**n for n = start .. start + n_max - 1.

    The anchor sits on the side farthest from the target's bounding box, so the
    target lies in {xi_N >= delta}. The amplitudes a_n come from one linear
    background solve and make the background power product exactly one.
    """
    if n_max < 1:
        raise ExcitationError(f"n_max must be >= 1, got {n_max}")
    bg = as_background(background, mesh.nx, mesh.ny)
    if not np.allclose(bg, bg[0], rtol=0, atol=0):
        raise ExcitationError("depleting potentials need a constant background")
    if region.is_empty():
        raise ExcitationError("depleting target region is empty")

    gaps = _side_gaps(mesh, region)
    touching = sorted(name for name, gap in gaps.items() if gap <= 0)
    if touching:
        raise ExcitationError(f"depleting target must stay off the rim; it touches the {', '.join(touching)} side(s)")
    side = max(gaps, key=gaps.get)
    delta = gaps[side]
    anchor, normal, xi_normal, xi_tangent = _side_frame(mesh, side)

    indices = list(range(start, start + n_max))
    attenuations = [delta / 2.0 ** n for n in indices]
    raw = np.vstack([
        zero_mean_project(np.exp(-xi_normal / d) * np.sin(xi_tangent / d), mesh.boundary_weights)
        for d in attenuations
    ])
    powers = linear_power_products(mesh, bg, raw)
    amplitudes = 1.0 / np.sqrt(powers)

    members = tuple(
        BoundaryExcitation(a * f, label=f"dep{n}", note=f"depleting, delta_n={d:.4g}")
        for n, a, d, f in zip(indices, amplitudes, attenuations, raw)
    )
    params = DepletingParams(
        side=side,
        anchor=anchor,
        normal=normal,
        delta=delta,
        attenuations=attenuations,
        wavenumbers=[1.0 / d for d in attenuations],
        amplitudes=[float(a) for a in amplitudes],
    )
    logger.debug("📉 Built depleting sequence", side=side, delta=delta, n_max=n_max)
    return ExcitationFamily(members=members, depleting=params,
                            recipe={"type": "depleting", "n_max": int(n_max), "start": int(start)})


def combine_families(*families: ExcitationFamily) -> ExcitationFamily:
    """Concatenate families in order; labels must stay unique."""
    if not families:
        raise ExcitationError("nothing to combine")
    members = tuple(m for family in families for m in family.members)
    depleting = next((f.depleting for f in families if f.depleting is not None), None)
    return ExcitationFamily(members=members, depleting=depleting,
                            recipe={"type": "combined", "parts": [f.recipe for f in families]})


def localization_ratios(mesh: StructuredTriMesh, background, family: ExcitationFamily,
                        region: CellRegion) -> np.ndarray:
    """G_D(f) / G_Omega(f) for every member: the share of background energy inside ``region``."""
    bg = as_background(background, mesh.nx, mesh.ny)
    U = linear_solutions(mesh, bg, family.boundary_matrix())
    everything = CellRegion.full(mesh.nx, mesh.ny)
    return np.array([
        gradient_energy_density(mesh, bg, U[:, k], region) / gradient_energy_density(mesh, bg, U[:, k], everything)
        for k in range(len(family))
    ])


def family_from_spec(mesh: StructuredTriMesh, spec: Dict[str, Any], background=None,
                     target: CellRegion = None) -> ExcitationFamily:
    """Config mapping -> family: fourier, depleting, or fourier augmented with depleting members."""
    kind = spec.get("type", "fourier")
    if kind == "coordinate":
        members = tuple(coordinate_excitation(mesh, axis) for axis in spec.get("axes", ["x"]))
        return ExcitationFamily(members=members, recipe={"type": "coordinate", "axes": list(spec.get("axes", ["x"]))})
    if kind == "fourier":
        return fourier_family(mesh, int(spec.get("K", settings.DEFAULT_FOURIER_ORDER)))
    if kind in ("depleting", "fourier+depleting"):
        if target is None or background is None:
            raise ExcitationError(f"{kind} family needs a background and a target region")
        depleting = depleting_sequence(mesh, background, target, int(spec.get("n_max", 5)))
        if kind == "depleting":
            return depleting
        return combine_families(fourier_family(mesh, int(spec.get("K", settings.DEFAULT_FOURIER_ORDER))), depleting)
    raise ExcitationError(f"unknown excitation family type {kind!r}")


def check_family(mesh: StructuredTriMesh, family: ExcitationFamily, tol: float = 1e-12) -> List[str]:
    """Members violating the zero-mean or length invariants on ``mesh``."""
    problems = []
    w = mesh.boundary_weights
    for member in family.members:
        if member.values.size != w.size:
            problems.append(f"{member.label}: {member.values.size} values for a rim of {w.size}")
        elif abs(w @ member.values) > tol * w.sum() * np.max(np.abs(member.values)):
            problems.append(f"{member.label}: not mean zero")
    return problems
