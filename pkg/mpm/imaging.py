"""
Monotonicity-based imaging: noise model, measurement assembly, the
ideal / regularized / deterministic / unregularized test rules, reconstructions,
noise sweeps, mis-estimation checks and reconstruction metrics.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, Field

from config import settings
from mpm.excitation import ExcitationFamily
from mpm.forward import (
    DirichletProblem,
    gradient_energy_density,
    linear_power_products,
    linear_solutions,
    solve,
)
from mpm.geometry import CellRegion, StructuredTriMesh, block_regions, outer_support, union_all
from mpm.materials import (
    ContrastCase,
    MaterialAssignment,
    MaterialLaw,
    MaterialLimit,
    build_limit_material,
    build_test_material,
)
from mpm.mpm_utils import ImagingError

logger = structlog.get_logger(__name__)


# ---------------------------------------------------------------------------
# Noise
# ---------------------------------------------------------------------------

class NoiseModel(BaseModel):
    """P_eta = P (1 + eta1 xi1) + eta2 xi2 L with xi uniform on [-1, 1] per excitation."""
    eta1: float = Field(default=0.0, ge=0.0, lt=1.0, description="Proportional noise level")
    eta2: float = Field(default=0.0, ge=0.0, description="Range noise level")
    L: Optional[float] = Field(default=None, gt=0.0, description="Instrument range; derived from the background when unset")
    seed: int = Field(default=0, ge=0, description="RNG seed")

    @property
    def is_noise_free(self) -> bool:
        return self.eta1 == 0.0 and self.eta2 == 0.0

    def draws(self, index: int) -> Tuple[float, float]:
        """(xi1, xi2) for one excitation index, independent of evaluation order."""
        xi = np.random.default_rng([self.seed, index]).uniform(-1.0, 1.0, 2)
        return float(xi[0]), float(xi[1])


def perturb(p: float, eta1: float, eta2: float, xi1: float, xi2: float, L: float) -> float:
    return p * (1.0 + eta1 * xi1) + eta2 * xi2 * L


def apply_noise(p: float, model: NoiseModel, index: int, L: float = None) -> float:
    """Noisy power product for excitation ``index``; |result - p| <= eta1 |p| + eta2 L."""
    rng_range = model.L if L is None else L
    if rng_range is None:
        if model.eta2 != 0.0:
            raise ImagingError("range noise needs an instrument range L")
        rng_range = 0.0
    xi1, xi2 = model.draws(index)
    return perturb(p, model.eta1, model.eta2, xi1, xi2, rng_range)


# ---------------------------------------------------------------------------
# Rules
# ---------------------------------------------------------------------------

class RuleKind(str, Enum):
    IDEAL = "ideal"
    REGULARIZED = "regularized"
    DETERMINISTIC = "deterministic"
    UNREGULARIZED = "unregularized_noisy"


class ReconstructionRule(BaseModel):
    """A test rule with its regularization (eta*) and, for the deterministic bound, the true eta."""
    kind: RuleKind
    eta1_star: float = Field(default=0.0, ge=0.0, lt=1.0)
    eta2_star: float = Field(default=0.0, ge=0.0)
    eta1: float = Field(default=0.0, ge=0.0, lt=1.0)
    eta2: float = Field(default=0.0, ge=0.0)
    noise_sign: float = Field(default=1.0, description="-1 injects a sign fault into the regularization shift")

    @classmethod
    def ideal(cls) -> "ReconstructionRule":
        return cls(kind=RuleKind.IDEAL)

    @classmethod
    def regularized(cls, eta1_star: float, eta2_star: float, noise_sign: float = 1.0) -> "ReconstructionRule":
        return cls(kind=RuleKind.REGULARIZED, eta1_star=eta1_star, eta2_star=eta2_star, noise_sign=noise_sign)

    @classmethod
    def deterministic(cls, eta1: float, eta2: float, eta1_star: float = None, eta2_star: float = None) -> "ReconstructionRule":
        return cls(kind=RuleKind.DETERMINISTIC, eta1=eta1, eta2=eta2,
                   eta1_star=eta1 if eta1_star is None else eta1_star,
                   eta2_star=eta2 if eta2_star is None else eta2_star)

    @classmethod
    def unregularized(cls) -> "ReconstructionRule":
        return cls(kind=RuleKind.UNREGULARIZED)


# ---------------------------------------------------------------------------
# Measurements
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """
    Exact and noisy anomaly products per excitation, background products, and
    test-material products per (test, excitation).
    """

    family: ExcitationFamily
    case: ContrastCase
    tests: Tuple[CellRegion, ...]
    exact: np.ndarray
    noisy: np.ndarray
    background: np.ndarray
    test_products: np.ndarray
    noise: NoiseModel
    L: float

    @property
    def n_tests(self) -> int:
        return len(self.tests)

    @property
    def n_excitations(self) -> int:
        return len(self.family)


def block_test_family(mesh: StructuredTriMesh, k: int = None, stride: int = 1) -> List[CellRegion]:
    """All k x k pixel blocks of the grid (k defaults to settings.DEFAULT_TEST_BLOCK)."""
    return block_regions(mesh.nx, mesh.ny, settings.DEFAULT_TEST_BLOCK if k is None else k, stride)


def ordered_map(fn, items, threads: int = None) -> list:
    workers = settings.resolve_threads(threads)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, items))


def _noisy_values(exact: np.ndarray, noise: NoiseModel, L: float) -> np.ndarray:
    return np.array([apply_noise(p, noise, k, L) for k, p in enumerate(exact)])


def anomaly_products(mesh: StructuredTriMesh, assignment: MaterialAssignment, family: ExcitationFamily,
                     threads: int = None, tol: float = None) -> np.ndarray:
    """Exact P_A(f) for every member, one forward solve each."""
    F = family.boundary_matrix()
    if assignment.is_linear:
        return linear_power_products(mesh, assignment.pixel_values(), F)

    def product(f):
        return solve(DirichletProblem(mesh, assignment, f), tol=tol).power_avg

    return np.array(ordered_map(product, list(F), threads))


def candidate_products(mesh: StructuredTriMesh, background: np.ndarray, tests: Sequence[CellRegion],
                  case: ContrastCase, law: MaterialLaw, family: ExcitationFamily, threads: int = None) -> np.ndarray:
    """P_T(f) per (test, excitation); each test is one factorization shared by all excitations."""
    F = family.boundary_matrix()

    def products(test):
        coefficients = build_test_material(background, test, case, law).pixel_values()
        return linear_power_products(mesh, coefficients, F)

    return np.vstack(ordered_map(products, list(tests), threads))


def collect_measurements(mesh: StructuredTriMesh, assignment: MaterialAssignment, family: ExcitationFamily,
                         tests: Sequence[CellRegion], noise: NoiseModel = None, test_law: MaterialLaw = None,
                         threads: int = None, tol: float = None) -> MeasurementSet:
    """
    Forward-solve the anomaly for every excitation, compute background and
    test products, and add seeded noise.

    ``test_law`` supplies gamma_lo / gamma_hi for the test materials; it
    defaults to the anomaly law and is required for pec/pei anomalies.
    """
    tests = tuple(tests)
    if not tests:
        raise ImagingError("test family is empty")
    noise = noise or NoiseModel()
    law = test_law or assignment.law
    if law.is_limit:
        raise ImagingError("pec/pei anomalies need an explicit test_law")
    case = assignment.contrast
    if case is None:
        raise ImagingError("anomaly assignment carries no contrast case")

    logger.info("📡 Collecting measurements", excitations=len(family), tests=len(tests), case=case.value)
    F = family.boundary_matrix()
    background = linear_power_products(mesh, assignment.background, F)
    exact = anomaly_products(mesh, assignment, family, threads=threads, tol=tol)
    products = candidate_products(mesh, assignment.background, tests, case, law, family, threads=threads)
    L = noise.L if noise.L is not None else settings.RANGE_FACTOR * float(background.max())
    noisy = _noisy_values(exact, noise, L)

    for name, values in (("exact", exact), ("background", background), ("test", products), ("noisy", noisy)):
        if not np.all(np.isfinite(values)):
            raise ImagingError(f"non-finite {name} power products")
    return MeasurementSet(family=family, case=case, tests=tests, exact=exact, noisy=noisy, background=background,
                          test_products=products, noise=noise, L=L)


def with_noise(data: MeasurementSet, noise: NoiseModel) -> MeasurementSet:
    """Re-noise existing exact data without re-solving; the range L is kept unless the model sets one."""
    L = noise.L if noise.L is not None else data.L
    return replace(data, noise=noise, L=L, noisy=_noisy_values(data.exact, noise, L))


def _excitation_margins(data: MeasurementSet, rule: ReconstructionRule) -> np.ndarray:
    """Margins per (test, excitation) for ``rule``; a test passes when its row minimum is >= 0."""
    P_T = data.test_products
    P_A, P_noisy, L = data.exact, data.noisy, data.L
    s = rule.noise_sign
    high = data.case == ContrastCase.HIGH
    if rule.kind == RuleKind.IDEAL:
        bound = P_A
    elif rule.kind == RuleKind.UNREGULARIZED:
        bound = P_noisy
    elif rule.kind == RuleKind.REGULARIZED:
        if high:
            bound = (P_noisy + s * rule.eta2_star * L) / (1.0 - s * rule.eta1_star)
        else:
            bound = (P_noisy - s * rule.eta2_star * L) / (1.0 + s * rule.eta1_star)
    else:
        if high:
            bound = (P_A * (1.0 + rule.eta1) + rule.eta2 * L + rule.eta2_star * L) / (1.0 - rule.eta1_star)
        else:
            bound = (P_A * (1.0 - rule.eta1) - rule.eta2 * L - rule.eta2_star * L) / (1.0 + rule.eta1_star)
    return bound[None, :] - P_T if high else P_T - bound[None, :]


def monotonicity_margin(t_index: int, data: MeasurementSet, rule: ReconstructionRule) -> float:
    """Worst case over excitations of the rule's inequality for test ``t_index``."""
    if not 0 <= t_index < data.n_tests:
        raise ImagingError(f"no measurements for test {t_index} (have {data.n_tests})")
    return float(_excitation_margins(data, rule)[t_index].min())


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReconstructionResult:
    tests: Tuple[CellRegion, ...]
    rule: ReconstructionRule
    margins: np.ndarray
    passed: np.ndarray
    mask: CellRegion

    @property
    def n_passed(self) -> int:
        return int(self.passed.sum())


@dataclass(frozen=True, eq=False)
class ReconstructionBundle:
    """Ideal, regularized and deterministic masks from one data set."""

    ideal: ReconstructionResult
    regularized: ReconstructionResult
    deterministic: ReconstructionResult

    @property
    def nested(self) -> bool:
        return self.ideal.mask <= self.regularized.mask <= self.deterministic.mask


def reconstruct(data: MeasurementSet, rule: ReconstructionRule) -> ReconstructionResult:
    """Union of the measured tests whose margin under ``rule`` is non-negative."""
    if not data.tests:
        raise ImagingError("test family is empty")
    margins = _excitation_margins(data, rule).min(axis=1)
    passed = margins >= 0.0
    first = data.tests[0]
    mask = union_all([t for t, ok in zip(data.tests, passed) if ok], first.nx, first.ny)
    logger.debug("🧩 Reconstructed", rule=rule.kind.value, passed=int(passed.sum()), cells=mask.count)
    return ReconstructionResult(tests=data.tests, rule=rule, margins=margins, passed=passed, mask=mask)


def reconstruct_all(data: MeasurementSet, eta_star: Tuple[float, float] = None) -> ReconstructionBundle:
    """Ideal, regularized(eta*) and deterministic(eta, eta*) masks; eta* defaults to the true eta."""
    eta1, eta2 = data.noise.eta1, data.noise.eta2
    eta1_star, eta2_star = (eta1, eta2) if eta_star is None else eta_star
    return ReconstructionBundle(
        ideal=reconstruct(data, ReconstructionRule.ideal()),
        regularized=reconstruct(data, ReconstructionRule.regularized(eta1_star, eta2_star)),
        deterministic=reconstruct(data, ReconstructionRule.deterministic(eta1, eta2, eta1_star, eta2_star)),
    )


class SweepStudy(BaseModel):
    """Deterministic masks along a decreasing noise sequence."""
    etas: List[Tuple[float, float]]
    sizes: List[int]
    nested: List[bool] = Field(description="mask[k+1] subset of mask[k], per step")
    equals_ideal: List[bool]
    ideal_size: int
    equality_index: Optional[int] = Field(description="First k from which every mask equals the ideal one")
    threshold_index: Optional[int] = Field(description="First k where the noise bump is below every failing ideal margin")
    masks: List[List[int]] = Field(description="Pixel indices of each mask")

    @property
    def all_nested(self) -> bool:
        return all(self.nested)


def validate_noise_sequence(etas: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    etas = [(float(a), float(b)) for a, b in etas]
    if not etas:
        raise ImagingError("noise sequence is empty")
    if any(a < 0 or b < 0 or a >= 1 for a, b in etas):
        raise ImagingError("noise levels must satisfy 0 <= eta1 < 1 and eta2 >= 0")
    if all(a == 0 and b == 0 for a, b in etas):
        raise ImagingError("noise sequence is identically zero")
    for (a0, b0), (a1, b1) in zip(etas, etas[1:]):
        if not (a1 < a0 and b1 < b0):
            raise ImagingError(f"noise sequence must decrease strictly in both components: {(a0, b0)} -> {(a1, b1)}")
    return etas


def noise_sweep(data: MeasurementSet, etas: Sequence[Tuple[float, float]]) -> SweepStudy:
    """A_det(eta_k) with eta* = eta_k along a strictly decreasing sequence."""
    etas = validate_noise_sequence(etas)
    ideal = reconstruct(data, ReconstructionRule.ideal())
    masks = [reconstruct(data, ReconstructionRule.deterministic(a, b)).mask for a, b in etas]
    equals = [m == ideal.mask for m in masks]
    equality_index = None
    for k in range(len(masks) - 1, -1, -1):
        if not equals[k]:
            break
        equality_index = k

    failing = -ideal.margins[~ideal.passed]
    threshold_index = None
    scale = float(np.max(np.abs(data.exact)))
    for k, (a, b) in enumerate(etas):
        bump = (2 * a * scale + 2 * b * data.L) / (1 - a)
        if failing.size == 0 or bump < failing.min():
            threshold_index = k
            break

    logger.info("📉 Noise sweep", steps=len(etas), equality_index=equality_index, threshold_index=threshold_index)
    return SweepStudy(
        etas=etas,
        sizes=[m.count for m in masks],
        nested=[b <= a for a, b in zip(masks, masks[1:])],
        equals_ideal=equals,
        ideal_size=ideal.mask.count,
        equality_index=equality_index,
        threshold_index=threshold_index,
        masks=[m.pixels.tolist() for m in masks],
    )


class MisEstimationReport(BaseModel):
    eta: Tuple[float, float]
    eta_star: Tuple[float, float]
    relation: str = Field(description="over, under, exact or not applicable")
    applicable: bool
    violations: List[str] = Field(default_factory=list)
    sizes: Dict[str, int] = Field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations


def mis_estimation_check(data: MeasurementSet, eta: Tuple[float, float],
                         eta_star: Tuple[float, float]) -> MisEstimationReport:
    """
    Over-estimated noise (eta* >= eta) must give a superset of the eta-regularized
    mask; under-estimated noise (eta* <= eta) a subset of the deterministic eta mask.
    """
    over = eta_star[0] >= eta[0] and eta_star[1] >= eta[1]
    under = eta_star[0] <= eta[0] and eta_star[1] <= eta[1]
    relation = "exact" if over and under else "over" if over else "under" if under else "not applicable"
    report = MisEstimationReport(eta=tuple(eta), eta_star=tuple(eta_star), relation=relation,
                                 applicable=over or under)
    if not report.applicable:
        return report
    star = reconstruct(data, ReconstructionRule.regularized(*eta_star)).mask
    report.sizes["regularized_eta_star"] = star.count
    if over:
        base = reconstruct(data, ReconstructionRule.regularized(*eta)).mask
        report.sizes["regularized_eta"] = base.count
        if not base <= star:
            report.violations.append(f"A_reg(eta*) misses {(base - star).count} cells of A_reg(eta)")
    if under:
        det = reconstruct(data, ReconstructionRule.deterministic(*eta)).mask
        report.sizes["deterministic_eta"] = det.count
        if not star <= det:
            report.violations.append(f"A_reg(eta*) exceeds A_det(eta) by {(star - det).count} cells")
    return report


# ---------------------------------------------------------------------------
# Metrics and diagnostics
# ---------------------------------------------------------------------------

class ReconMetrics(BaseModel):
    contains_A: bool
    within_A_star: bool
    excess_cells: int
    deficit_cells: int
    excess_over_A_star: int
    jaccard_A: float
    jaccard_A_star: float


def _jaccard(a: CellRegion, b: CellRegion) -> float:
    union = (a | b).count
    return 1.0 if union == 0 else (a & b).count / union


def metrics(result, region: CellRegion) -> ReconMetrics:
    """Compare a mask (or a result's mask) with the true anomaly and its outer support."""
    mask = result.mask if isinstance(result, ReconstructionResult) else result
    star = outer_support(region)
    return ReconMetrics(
        contains_A=region <= mask,
        within_A_star=mask <= star,
        excess_cells=(mask - region).count,
        deficit_cells=(region - mask).count,
        excess_over_A_star=(mask - star).count,
        jaccard_A=_jaccard(mask, region),
        jaccard_A_star=_jaccard(mask, star),
    )


class ConverseReport(BaseModel):
    """Tests reaching outside the outer support that still passed."""
    n_tests: int
    n_outside: int = Field(description="Tests not contained in the outer support")
    passed_outside: List[int] = Field(description="Indices of such tests that passed")
    excess_cells: int

    @property
    def holds(self) -> bool:
        return not self.passed_outside


def converse_report(result: ReconstructionResult, region: CellRegion) -> ConverseReport:
    star = outer_support(region)
    outside = [k for k, t in enumerate(result.tests) if not t <= star]
    return ConverseReport(
        n_tests=len(result.tests),
        n_outside=len(outside),
        passed_outside=[k for k in outside if result.passed[k]],
        excess_cells=(result.mask - star).count,
    )


class LimitOrderingCheck(BaseModel):
    """Ordering of limit, anomaly and background products for one excitation."""
    label: str
    p_zero: float
    p_anomaly: float
    p_infinite: float
    p_background: float
    g_anomaly: float
    chain_holds: bool = Field(description="P0 <= P_A <= P_inf up to slack")
    infinite_above_background: bool
    zero_below_background: bool
    infinite_ratio: float = Field(description="(P_inf - P_bg) / G_A")
    zero_ratio: float = Field(description="(P_bg - P0) / G_A")

    @property
    def passed(self) -> bool:
        return self.chain_holds and self.infinite_above_background and self.zero_below_background


def limit_ordering_checks(mesh: StructuredTriMesh, assignment: MaterialAssignment, family: ExcitationFamily,
                          threads: int = None, slack: float = 1e-8) -> List[LimitOrderingCheck]:
    """
    Per excitation: P0 <= P_A <= P_inf, P_inf >= P_bg and P0 <= P_bg, with the
    empirical ratios against the background energy in the anomaly.
    """
    if assignment.region.is_empty():
        raise ImagingError("limit ordering checks need a non-empty anomaly")
    pec = build_limit_material(assignment.background, assignment.region, MaterialLimit.INFINITE)
    pei = build_limit_material(assignment.background, assignment.region, MaterialLimit.ZERO)
    F = family.boundary_matrix()
    p_a = anomaly_products(mesh, assignment, family, threads=threads)
    p_inf = anomaly_products(mesh, pec, family, threads=threads)
    p_zero = anomaly_products(mesh, pei, family, threads=threads)
    p_bg = linear_power_products(mesh, assignment.background, F)
    U = linear_solutions(mesh, assignment.background, F)

    checks = []
    for k, member in enumerate(family.members):
        g = gradient_energy_density(mesh, assignment.background, U[:, k], assignment.region)
        tol = slack * max(1.0, abs(p_bg[k]))
        checks.append(LimitOrderingCheck(
            label=member.label,
            p_zero=p_zero[k],
            p_anomaly=p_a[k],
            p_infinite=p_inf[k],
            p_background=p_bg[k],
            g_anomaly=g,
            chain_holds=bool(p_zero[k] <= p_a[k] + tol and p_a[k] <= p_inf[k] + tol),
            infinite_above_background=bool(p_inf[k] >= p_bg[k] - tol),
            zero_below_background=bool(p_zero[k] <= p_bg[k] + tol),
            infinite_ratio=(p_inf[k] - p_bg[k]) / g if g > 0 else float("nan"),
            zero_ratio=(p_bg[k] - p_zero[k]) / g if g > 0 else float("nan"),
        ))
    return checks
