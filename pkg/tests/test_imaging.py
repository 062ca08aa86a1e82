from dataclasses import replace

import numpy as np
import pytest

from mpm.excitation import BoundaryExcitation, ExcitationFamily, fourier_family
from mpm.geometry import CellRegion, outer_support
from mpm.imaging import (
    MeasurementSet,
    NoiseModel,
    ReconstructionRule,
    apply_noise,
    block_test_family,
    collect_measurements,
    converse_report,
    limit_ordering_checks,
    metrics,
    mis_estimation_check,
    monotonicity_margin,
    noise_sweep,
    perturb,
    reconstruct,
    reconstruct_all,
    validate_noise_sequence,
    with_noise,
)
from mpm.materials import ContrastCase, build_assignment, sigmoid_law
from mpm.mpm_utils import ImagingError


def single_measurement(noisy, test_product, L=10.0, exact=None):
    family = ExcitationFamily(members=(BoundaryExcitation(np.array([1.0, -1.0]), label="f"),))
    return MeasurementSet(
        family=family,
        case=ContrastCase.HIGH,
        tests=(CellRegion.from_pixels(2, 1, [0]),),
        exact=np.array([noisy if exact is None else exact]),
        noisy=np.array([noisy]),
        background=np.array([1.0]),
        test_products=np.array([[test_product]]),
        noise=NoiseModel(eta1=0.1, eta2=0.05, L=L),
        L=L,
    )


@pytest.fixture
def phantom_data(phantom_mesh, blob, small_family):
    assignment = build_assignment(1.0, blob, sigmoid_law(2.0, 1.0, 1.0), ContrastCase.HIGH)
    tests = block_test_family(phantom_mesh, 2)
    return collect_measurements(phantom_mesh, assignment, small_family, tests, NoiseModel(), threads=1)


def test_perturb_examples():
    assert perturb(2.0, 0.1, 0.05, 1.0, -1.0, 10.0) == pytest.approx(1.7)
    assert perturb(0.0, 0.1, 0.05, 0.3, 1.0, 10.0) == pytest.approx(0.5)
    assert apply_noise(2.0, NoiseModel(), 3) == 2.0


def test_noise_is_seeded_per_index():
    model = NoiseModel(eta1=0.2, eta2=0.1, L=4.0, seed=7)
    first = [apply_noise(1.0, model, k) for k in range(5)]
    assert first == [apply_noise(1.0, model, k) for k in range(5)]
    assert apply_noise(1.0, model, 3) == first[3]
    assert all(abs(p - 1.0) <= 0.2 + 0.1 * 4.0 for p in first)
    assert first != [apply_noise(1.0, model.model_copy(update={"seed": 8}), k) for k in range(5)]


def test_range_noise_needs_a_range():
    with pytest.raises(ImagingError):
        apply_noise(1.0, NoiseModel(eta2=0.1), 0)


def test_regularized_margin_example():
    data = single_measurement(noisy=1.7, test_product=2.0)
    margin = monotonicity_margin(0, data, ReconstructionRule.regularized(0.1, 0.05))
    assert margin == pytest.approx((1.7 + 0.5) / 0.9 - 2.0)
    with pytest.raises(ImagingError):
        monotonicity_margin(1, data, ReconstructionRule.ideal())


def test_regularized_reduces_to_ideal_without_noise():
    data = single_measurement(noisy=1.3, test_product=1.1)
    ideal = monotonicity_margin(0, data, ReconstructionRule.ideal())
    assert monotonicity_margin(0, data, ReconstructionRule.regularized(0.0, 0.0)) == ideal


def test_low_contrast_rules_mirror_high_contrast():
    data = replace(single_measurement(noisy=1.7, test_product=1.0), case=ContrastCase.LOW)
    assert monotonicity_margin(0, data, ReconstructionRule.ideal()) == pytest.approx(1.0 - 1.7)
    margin = monotonicity_margin(0, data, ReconstructionRule.regularized(0.1, 0.05))
    assert margin == pytest.approx(1.0 - (1.7 - 0.5) / 1.1)


def test_noise_free_reconstruction_contains_anomaly(phantom_data, blob):
    result = reconstruct(phantom_data, ReconstructionRule.ideal())
    assert metrics(result, blob).contains_A
    inside = [k for k, t in enumerate(phantom_data.tests) if t <= blob]
    assert all(result.passed[k] for k in inside)
    assert converse_report(result, blob).n_tests == len(phantom_data.tests)


def test_empty_test_always_passes_ideal_rule(phantom_mesh, blob, small_family):
    assignment = build_assignment(1.0, blob, sigmoid_law(2.0, 1.0, 1.0), ContrastCase.HIGH)
    data = collect_measurements(phantom_mesh, assignment, small_family, [CellRegion.empty(8, 8)], threads=1)
    np.testing.assert_array_equal(data.test_products[0], data.background)
    assert monotonicity_margin(0, data, ReconstructionRule.ideal()) >= 0.0


def test_more_excitations_never_grow_the_mask(phantom_mesh, blob):
    assignment = build_assignment(1.0, blob, sigmoid_law(2.0, 1.0, 1.0), ContrastCase.HIGH)
    tests = block_test_family(phantom_mesh, 2)
    noise = NoiseModel(eta1=0.05, eta2=0.01, seed=3, L=2.0)
    few = collect_measurements(phantom_mesh, assignment, fourier_family(phantom_mesh, 1), tests, noise, threads=1)
    many = collect_measurements(phantom_mesh, assignment, fourier_family(phantom_mesh, 3), tests, noise, threads=1)
    for rule in (ReconstructionRule.ideal(), ReconstructionRule.regularized(0.05, 0.01),
                 ReconstructionRule.deterministic(0.05, 0.01)):
        assert reconstruct(many, rule).mask <= reconstruct(few, rule).mask


def test_deterministic_mask_grows_with_the_noise_level(phantom_data):
    levels = [(0.0, 0.0), (0.01, 0.001), (0.01, 0.01), (0.05, 0.01), (0.2, 0.05)]
    masks = [reconstruct(phantom_data, ReconstructionRule.deterministic(a, b)).mask for a, b in levels]
    for smaller, larger in zip(masks, masks[1:]):
        assert smaller <= larger
    assert masks[0] == reconstruct(phantom_data, ReconstructionRule.ideal()).mask


def test_regularized_masks_are_nested(phantom_data):
    for seed in range(5):
        noisy = with_noise(phantom_data, NoiseModel(eta1=0.05, eta2=0.01, seed=seed))
        bundle = reconstruct_all(noisy)
        assert bundle.nested


def test_flipped_regularization_shrinks_below_ideal(phantom_data):
    noisy = with_noise(phantom_data, NoiseModel(eta1=0.05, eta2=0.01, seed=0))
    ideal = reconstruct(noisy, ReconstructionRule.ideal()).mask
    flipped = reconstruct(noisy, ReconstructionRule.regularized(0.05, 0.01, noise_sign=-1.0)).mask
    assert flipped <= reconstruct(noisy, ReconstructionRule.regularized(0.05, 0.01)).mask
    assert flipped.count <= ideal.count


def test_noise_sweep_is_nested_and_converges(phantom_data):
    etas = [(0.2 / 2 ** k, 0.02 / 2 ** k) for k in range(7)]
    study = noise_sweep(phantom_data, etas)
    assert study.all_nested
    assert study.sizes == sorted(study.sizes, reverse=True)
    if study.equality_index is not None:
        assert all(study.equals_ideal[study.equality_index:])
    if study.threshold_index is not None and study.equality_index is not None:
        assert study.equality_index <= study.threshold_index


@pytest.mark.parametrize("etas", [[], [(0.0, 0.0), (0.0, 0.0)], [(0.1, 0.01), (0.2, 0.005)], [(1.0, 0.1)]])
def test_noise_sequence_validation(etas):
    with pytest.raises(ImagingError):
        validate_noise_sequence(etas)


def test_mis_estimation(phantom_data):
    eta = (0.05, 0.01)
    for seed in range(3):
        noisy = with_noise(phantom_data, NoiseModel(eta1=eta[0], eta2=eta[1], seed=seed))
        over = mis_estimation_check(noisy, eta, (0.1, 0.02))
        under = mis_estimation_check(noisy, eta, (0.025, 0.005))
        assert over.relation == "over" and over.passed
        assert under.relation == "under" and under.passed
    assert not mis_estimation_check(phantom_data, eta, (0.1, 0.005)).applicable


def test_huge_regularization_accepts_every_test(phantom_data):
    noisy = with_noise(phantom_data, NoiseModel(eta1=0.05, eta2=0.01, seed=0))
    result = reconstruct(noisy, ReconstructionRule.regularized(0.999, 100.0))
    assert result.n_passed == len(phantom_data.tests)


def test_metrics_examples():
    a = CellRegion.block(8, 8, 2, 2, 3, 3)
    exact = metrics(a, a)
    assert exact.contains_A and exact.within_A_star and exact.jaccard_A == 1.0
    assert not metrics(CellRegion.empty(8, 8), a).contains_A
    annulus = CellRegion.block(8, 8, 1, 1, 6, 6) - CellRegion.block(8, 8, 3, 3, 2, 2)
    filled = outer_support(annulus)
    m = metrics(filled, annulus)
    assert m.within_A_star and m.contains_A
    assert m.excess_cells == 4


def test_collect_measurements_requires_tests(phantom_mesh, blob, small_family):
    assignment = build_assignment(1.0, blob, sigmoid_law(2.0, 1.0, 1.0), ContrastCase.HIGH)
    with pytest.raises(ImagingError):
        collect_measurements(phantom_mesh, assignment, small_family, [])


def test_limit_products_bracket_the_anomaly(phantom_mesh, blob, small_family):
    assignment = build_assignment(1.0, blob, sigmoid_law(2.0, 1.0, 1.0), ContrastCase.HIGH)
    checks = limit_ordering_checks(phantom_mesh, assignment, small_family, threads=1)
    assert len(checks) == len(small_family)
    assert all(check.passed for check in checks)
    assert all(check.infinite_ratio >= 0 and check.zero_ratio >= 0 for check in checks)
