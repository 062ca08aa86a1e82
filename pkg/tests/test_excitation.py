import numpy as np
import pytest

from mpm.excitation import (
    BoundaryExcitation,
    ExcitationFamily,
    check_family,
    combine_families,
    coordinate_excitation,
    depleting_sequence,
    family_from_spec,
    fourier_family,
    localization_ratios,
    zero_mean_project,
)
from mpm.forward import linear_power_products
from mpm.geometry import CellRegion, build_mesh
from mpm.mpm_utils import DegenerateExcitationError, ExcitationError


def test_zero_mean_projection_is_idempotent(rng):
    weights = rng.uniform(0.5, 2.0, 12)
    once = zero_mean_project(rng.normal(size=12), weights)
    assert abs(weights @ once) < 1e-12
    assert np.allclose(zero_mean_project(once, weights), once)


def test_constant_data_is_degenerate():
    with pytest.raises(DegenerateExcitationError):
        zero_mean_project(np.full(8, 3.0))
    with pytest.raises(DegenerateExcitationError):
        BoundaryExcitation(np.zeros(4), label="zero")


def test_fourier_family_members(unit_mesh):
    family = fourier_family(unit_mesh, 3)
    assert family.labels == ["cos1", "sin1", "cos2", "sin2", "cos3", "sin3"]
    assert check_family(unit_mesh, family) == []
    assert all(np.max(np.abs(m.values)) == pytest.approx(1.0) for m in family)
    with pytest.raises(ExcitationError):
        fourier_family(unit_mesh, 0)


def test_fourier_members_are_orthogonal_on_the_rim():
    mesh = build_mesh(32, 32)
    F = fourier_family(mesh, 8).boundary_matrix()
    gram = (F * mesh.boundary_weights) @ F.T
    norms = np.sqrt(np.diag(gram))
    cosines = gram / np.outer(norms, norms)
    off_diagonal = cosines[~np.eye(len(F), dtype=bool)]
    assert np.max(np.abs(off_diagonal)) <= 1e-2


def test_coordinate_excitation(unit_mesh):
    x = coordinate_excitation(unit_mesh, "x")
    assert np.allclose(x.values, unit_mesh.boundary_coordinates()[:, 0] - 0.5)
    with pytest.raises(ExcitationError):
        coordinate_excitation(unit_mesh, "z")


def test_family_labels_must_be_unique(unit_mesh):
    family = fourier_family(unit_mesh, 1)
    with pytest.raises(ExcitationError):
        combine_families(family, family)
    with pytest.raises(ExcitationError):
        ExcitationFamily(members=())


def test_depleting_sequence_normalization_and_localization():
    mesh = build_mesh(32, 32)
    target = CellRegion.block(32, 32, 13, 13, 6, 6)
    family = depleting_sequence(mesh, 1.0, target, 5)
    assert family.labels == [f"dep{n}" for n in range(1, 6)]
    assert np.allclose(linear_power_products(mesh, 1.0, family.boundary_matrix()), 1.0, atol=1e-8)
    assert check_family(mesh, family) == []

    params = family.depleting
    assert params.delta == pytest.approx(13 / 32)
    assert params.attenuations == pytest.approx([params.delta / 2 ** n for n in range(1, 6)])

    ratios = localization_ratios(mesh, 1.0, family, target)
    assert np.all(np.diff(ratios) < 0)
    assert np.all(ratios[1:] / ratios[:-1] <= 0.9)


def test_depleting_anchor_faces_the_farthest_side():
    mesh = build_mesh(16, 16)
    target = CellRegion.block(16, 16, 2, 10, 3, 3)
    params = depleting_sequence(mesh, 1.0, target, 2).depleting
    assert params.side == "right"
    assert params.normal == (-1.0, 0.0)


def test_depleting_preconditions():
    mesh = build_mesh(8, 8)
    target = CellRegion.block(8, 8, 3, 3, 2, 2)
    with pytest.raises(ExcitationError):
        depleting_sequence(mesh, 1.0, target, 0)
    with pytest.raises(ExcitationError):
        depleting_sequence(mesh, 1.0, CellRegion.empty(8, 8), 2)
    with pytest.raises(ExcitationError):
        depleting_sequence(mesh, np.linspace(1.0, 2.0, 64), target, 2)


@pytest.mark.parametrize("i0, j0", [(0, 3), (6, 3), (3, 0), (3, 6)])
def test_depleting_target_touching_one_side_is_rejected(i0, j0):
    mesh = build_mesh(8, 8)
    with pytest.raises(ExcitationError, match="off the rim"):
        depleting_sequence(mesh, 1.0, CellRegion.block(8, 8, i0, j0, 2, 2), 2)


def test_family_from_spec(phantom_mesh, blob):
    assert len(family_from_spec(phantom_mesh, {"type": "fourier", "K": 2})) == 4
    assert family_from_spec(phantom_mesh, {"type": "coordinate", "axes": ["x", "y"]}).labels == ["x", "y"]
    combined = family_from_spec(phantom_mesh, {"type": "fourier+depleting", "K": 1, "n_max": 2},
                                background=1.0, target=blob)
    assert combined.labels == ["cos1", "sin1", "dep1", "dep2"]
    assert combined.depleting is not None
    with pytest.raises(ExcitationError):
        family_from_spec(phantom_mesh, {"type": "depleting"})
    with pytest.raises(ExcitationError):
        family_from_spec(phantom_mesh, {"type": "wavelet"})
