import numpy as np
import pytest
from scipy import integrate

from mpm.geometry import CellRegion
from mpm.materials import (
    ContrastCase,
    LawKind,
    MaterialLimit,
    affine_law,
    build_assignment,
    build_limit_material,
    build_test_material,
    check_admissibility,
    constant_law,
    custom_law,
    law_from_spec,
    pec_law,
    piecewise_law,
    power_law,
    q_primitive,
    saturating_law,
    scaled_law,
    sigmoid_law,
)
from mpm.mpm_utils import MaterialError


def quad_primitive(law, s):
    return integrate.quad(lambda t: float(law.evaluate(t)) * t, 0.0, s, epsabs=1e-13, epsrel=1e-13, limit=200)[0]


def test_q_primitive_examples():
    assert q_primitive(constant_law(1.0), 1.0) == pytest.approx(0.5, abs=1e-12)
    assert q_primitive(affine_law(1.0, 1.0), 1.0) == pytest.approx(5.0 / 6.0, abs=1e-12)
    assert q_primitive(power_law(1.0, 1.0, 4.0), 2.0) == pytest.approx(4.0, abs=1e-12)
    assert q_primitive(sigmoid_law(1.0, 1.0, 1.0), 0.0) == 0.0


@pytest.mark.parametrize("law", [
    sigmoid_law(2.0, 1.0, 1.0),
    sigmoid_law(1.0, 0.5, 0.3),
    saturating_law(0.5, 1.0, 1.0, q=4.0),
    saturating_law(0.5, 1.0, 0.7, q=2.0),
    piecewise_law(1.0, 2.0, 0.5),
    power_law(1.5, 2.0, 3.0, a=0.2),
])
def test_closed_form_primitives_match_quadrature(law):
    for s in (1e-3, 0.3, 1.0, 2.5, 7.0):
        assert float(q_primitive(law, s)) == pytest.approx(quad_primitive(law, s), abs=1e-10)


def test_quadrature_fallback_for_general_saturating_exponent():
    law = saturating_law(0.5, 1.0, 1.0, q=3.0)
    assert law.primitive is None
    values = q_primitive(law, np.array([0.0, 0.5, 0.5, 2.0]))
    assert values[0] == 0.0
    assert values[1] == values[2]
    assert values[3] == pytest.approx(quad_primitive(law, 2.0), abs=1e-10)


def test_q_primitive_rejects_limits_and_negative_arguments():
    with pytest.raises(MaterialError):
        q_primitive(pec_law(), 1.0)
    with pytest.raises(MaterialError):
        q_primitive(constant_law(1.0), -0.1)


@pytest.mark.parametrize("law", [
    constant_law(1.5),
    affine_law(1.0, 0.5),
    power_law(1.0, 1.0, 4.0),
    sigmoid_law(1.0, 2.0, 1.0),
    saturating_law(0.1, 0.9, 1.0, q=4.0),
    saturating_law(0.5, 1.0, 1.0, q=3.0),
    piecewise_law(1.0, 2.0, 0.5),
])
def test_q_primitive_is_convex(law):
    values = q_primitive(law, np.linspace(0.0, 5.0, 201))
    assert np.all(np.diff(values, 2) >= -1e-9)


def test_bounded_sigmoid_is_admissible():
    law = sigmoid_law(1.0, 1.0, 1.0, gamma_lo=1.0, gamma_hi=2.0)
    report = check_admissibility(law, 10.0, 200)
    assert report.passed, report.violations


def test_decreasing_flux_reports_a2():
    law = custom_law(lambda s: 1.0 / s ** 2, LawKind.BOUNDED, gamma_lo=1e-6, gamma_hi=1e6)
    report = check_admissibility(law, 5.0, 50)
    assert "A2" in report.clauses()


def test_growth_equality_case_passes():
    law = custom_law(lambda s: s ** 2, LawKind.GROWTH, gamma_hi=1.0, q=4.0, s0=1.0)
    report = check_admissibility(law, 10.0, 100)
    assert report.passed
    assert any("gamma_lo not declared" in note for note in report.notes)


def test_bound_violation_names_witness():
    law = sigmoid_law(1.0, 1.0, 1.0, gamma_lo=1.0, gamma_hi=1.5)
    report = check_admissibility(law, 5.0, 100)
    violation = next(v for v in report.violations if v.clause == "B1 upper")
    assert law.evaluate(violation.s) > 1.5


def test_strong_monotonicity_check():
    assert check_admissibility(affine_law(1.0, 1.0, kappa=0.5), 3.0, 60).passed
    failing = check_admissibility(sigmoid_law(1.0, 1.0, 1.0, kappa=5.0), 3.0, 60)
    assert "C1" in failing.clauses()


def test_check_admissibility_needs_two_samples():
    with pytest.raises(MaterialError):
        check_admissibility(constant_law(1.0), 1.0, 1)


def test_slope_secant_for_kinked_law():
    law = piecewise_law(1.0, 2.0, 1.0)
    assert law.slope(np.array([0.5]))[0] == pytest.approx(0.0, abs=1e-9)
    assert law.slope(np.array([2.0]))[0] == pytest.approx(2.0, rel=1e-6)


def test_scaled_law_scales_bounds_and_energy():
    law = sigmoid_law(2.0, 1.0, 1.0)
    doubled = scaled_law(law, 2.0)
    assert doubled.gamma_lo == 2 * law.gamma_lo
    assert float(doubled.energy_density(1.3)) == pytest.approx(2 * float(law.energy_density(1.3)))


def test_law_from_spec():
    law = law_from_spec({"name": "sigmoid", "params": {"a": 2.0, "b": 1.0, "s0": 1.0},
                         "kind": "bounded-nl", "gamma_lo": 2.0, "gamma_hi": 3.0})
    assert law.kind == LawKind.BOUNDED
    assert (law.gamma_lo, law.gamma_hi) == (2.0, 3.0)
    with pytest.raises(MaterialError):
        law_from_spec({"name": "cubic"})
    with pytest.raises(MaterialError):
        law_from_spec({"name": "affine", "params": {"a": 1.0}})


def test_build_test_material_values():
    bg = np.ones(9)
    law = sigmoid_law(2.0, 1.0, 1.0)
    empty = build_test_material(bg, CellRegion.empty(3, 3), ContrastCase.HIGH, law)
    assert np.array_equal(empty.pixel_values(), bg)
    single = build_test_material(bg, CellRegion.from_pixels(3, 3, [4]), ContrastCase.HIGH, law)
    assert single.pixel_values().tolist() == [1, 1, 1, 1, 2, 1, 1, 1, 1]
    low = sigmoid_law(0.25, 0.25, 1.0)
    pair = build_test_material(bg, CellRegion.from_pixels(3, 3, [0, 1]), ContrastCase.LOW, low)
    assert pair.pixel_values()[:3].tolist() == [0.5, 0.5, 1.0]


def test_contrast_condition_is_enforced():
    law = sigmoid_law(1.0, 1.0, 1.0)
    with pytest.raises(MaterialError):
        build_test_material(np.ones(4), CellRegion.from_pixels(2, 2, [0]), ContrastCase.HIGH, law)
    with pytest.raises(MaterialError):
        build_assignment(np.ones(4), CellRegion.from_pixels(2, 2, [0]), law, ContrastCase.LOW)


def test_contrast_ignores_background_under_the_anomaly():
    bg = np.ones(9)
    bg[4] = 5.0
    region = CellRegion.from_pixels(3, 3, [4])
    assignment = build_assignment(bg, region, sigmoid_law(2.0, 1.0, 1.0), ContrastCase.HIGH)
    assert assignment.contrast == ContrastCase.HIGH


def test_background_must_be_positive():
    with pytest.raises(MaterialError):
        build_test_material(np.zeros(4), CellRegion.empty(2, 2), ContrastCase.HIGH, sigmoid_law(2, 1, 1))


def test_limit_materials():
    bg = np.ones(36)
    assert build_limit_material(bg, CellRegion.empty(6, 6), MaterialLimit.INFINITE).limit == MaterialLimit.NONE
    pec = build_limit_material(bg, CellRegion.block(6, 6, 2, 2, 2, 1), MaterialLimit.INFINITE)
    assert pec.limit == MaterialLimit.INFINITE and pec.law.is_limit
    with pytest.raises(MaterialError):
        build_limit_material(bg, CellRegion.block(6, 6, 0, 2, 2, 2), MaterialLimit.ZERO)
