"""
Brute-force cross-checks for the forward solver and the imaging rules.

Everything here is deliberately slow and algorithmically separate from the
main path: coordinate descent instead of Newton, loop assembly instead of
vectorized assembly, finite differences instead of the analytic gradient.
"""
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, Field
from scipy.optimize import minimize_scalar

from config import settings
from mpm.excitation import zero_mean_project
from mpm.forward import (
    DirichletProblem,
    assemble_energy,
    energy_gradient,
    solve,
    solve_nonlinear,
)
from mpm.geometry import CellRegion, StructuredTriMesh, build_mesh
from mpm.imaging import MeasurementSet, NoiseModel, ReconstructionRule, reconstruct, with_noise
from mpm.materials import (
    ContrastCase,
    LawKind,
    MaterialAssignment,
    MaterialLaw,
    MaterialLimit,
    affine_law,
    as_background,
    build_assignment,
    build_limit_material,
    build_test_material,
    constant_law,
    power_law,
    saturating_law,
    scaled_law,
    sigmoid_law,
)
from mpm.mpm_utils import OracleError

logger = structlog.get_logger(__name__)


class OracleReport(BaseModel):
    """Main-path value against an independent value, with the verdict."""
    quantity: str
    main_value: float
    oracle_value: float
    abs_error: float
    rel_error: float
    tolerance: float
    passed: bool
    detail: str = ""


def compare(quantity: str, main_value: float, oracle_value: float, tolerance: float,
            relative: bool = False, detail: str = "") -> OracleReport:
    abs_error = abs(main_value - oracle_value)
    rel_error = abs_error / max(abs(oracle_value), 1e-300)
    measure = rel_error if relative else abs_error
    return OracleReport(quantity=quantity, main_value=main_value, oracle_value=oracle_value, abs_error=abs_error,
                        rel_error=rel_error, tolerance=tolerance, passed=bool(measure <= tolerance), detail=detail)


def ordering_report(quantity: str, lower: float, upper: float, slack: float, detail: str = "") -> OracleReport:
    """Report for ``lower <= upper`` with an absolute slack."""
    return OracleReport(quantity=quantity, main_value=lower, oracle_value=upper, abs_error=max(lower - upper, 0.0),
                        rel_error=max(lower - upper, 0.0) / max(abs(upper), 1e-300), tolerance=slack,
                        passed=bool(lower <= upper + slack), detail=detail)


# ---------------------------------------------------------------------------
# Dense references
# ---------------------------------------------------------------------------

class DenseMinimum(NamedTuple):
    energy: float
    u: np.ndarray
    history: List[float]


def _triangle_gradient_matrix(p: np.ndarray) -> np.ndarray:
    # rows of inv(J)^T applied to the reference gradients (-1,-1), (1,0), (0,1)
    J = np.array([p[1] - p[0], p[2] - p[0]]).T
    reference = np.array([[-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    return np.linalg.solve(J.T, reference)


def dense_stiffness(mesh: StructuredTriMesh, coefficients) -> np.ndarray:
    """Loop-assembled dense stiffness for per-pixel linear coefficients."""
    c = as_background(coefficients, mesh.nx, mesh.ny)
    K = np.zeros((mesh.n_vertices, mesh.n_vertices))
    for t, tri in enumerate(mesh.triangles):
        p = mesh.vertices[tri]
        G = _triangle_gradient_matrix(p)
        area = 0.5 * abs(np.linalg.det(np.array([p[1] - p[0], p[2] - p[0]])))
        local = c[t // 2] * area * G.T @ G
        for a in range(3):
            for b in range(3):
                K[tri[a], tri[b]] += local[a, b]
    return K


def _triangle_density(material: MaterialAssignment, mesh: StructuredTriMesh) -> List[Callable[[float], float]]:
    inside = material.region.triangle_mask(mesh)
    law = material.law
    densities = []
    for t in range(mesh.n_triangles):
        if inside[t]:
            densities.append(lambda s: float(law.energy_density(np.array([s]))[0]))
        else:
            c = float(material.background[t // 2])
            densities.append(lambda s, c=c: 0.5 * c * s * s)
    return densities


def dense_minimize(problem: DirichletProblem, max_dofs: int = None, tol: float = None,
                   max_sweeps: int = 20000) -> DenseMinimum:
    """
    Cyclic coordinate descent over interior vertices with golden-section line
    minimization, until one sweep lowers the energy by at most ``tol``.
    """
    mesh = problem.mesh
    max_dofs = settings.ORACLE_MAX_DOFS if max_dofs is None else max_dofs
    tol = settings.ORACLE_ENERGY_TOL if tol is None else tol
    interior = mesh.interior_vertices
    if interior.size > max_dofs:
        raise OracleError(f"dense oracle limited to {max_dofs} interior DOFs, problem has {interior.size}")
    if problem.material.limit != MaterialLimit.NONE:
        raise OracleError("dense oracle handles finite materials only")

    densities = _triangle_density(problem.material, mesh)
    operators = [_triangle_gradient_matrix(mesh.vertices[tri]) for tri in mesh.triangles]
    areas = [0.5 * abs(np.linalg.det(np.array([p[1] - p[0], p[2] - p[0]])))
             for p in (mesh.vertices[tri] for tri in mesh.triangles)]
    around = [[] for _ in range(mesh.n_vertices)]
    for t, tri in enumerate(mesh.triangles):
        for v in tri:
            around[v].append(t)

    u = np.zeros(mesh.n_vertices)
    u[mesh.boundary_vertices] = problem.boundary_data

    def triangle_energy(t: int) -> float:
        g = operators[t] @ u[mesh.triangles[t]]
        return areas[t] * densities[t](float(np.hypot(g[0], g[1])))

    def total() -> float:
        return sum(triangle_energy(t) for t in range(mesh.n_triangles))

    scale = max(1.0, float(np.max(np.abs(problem.boundary_data))))
    history = [total()]
    for _ in range(max_sweeps):
        for v in interior:
            start = u[v]

            def local(x, v=v):
                u[v] = x
                return sum(triangle_energy(t) for t in around[v])

            found = minimize_scalar(local, bracket=(start - 0.1 * scale, start), method="golden",
                                    options={"xtol": 1e-11, "maxiter": 200})
            u[v] = found.x if local(found.x) <= local(start) else start
        history.append(total())
        if history[-2] - history[-1] <= tol:
            break
    else:
        logger.warning("⚠️ Coordinate descent hit the sweep cap", sweeps=max_sweeps, energy=history[-1])
    return DenseMinimum(energy=history[-1], u=u.copy(), history=history)


# ---------------------------------------------------------------------------
# Random phantoms
# ---------------------------------------------------------------------------

def _random_zero_mean(mesh: StructuredTriMesh, rng: np.random.Generator) -> np.ndarray:
    values = zero_mean_project(rng.uniform(-1.0, 1.0, mesh.boundary_vertices.size), mesh.boundary_weights)
    return values / np.max(np.abs(values))


def _random_block(rng: np.random.Generator, nx: int, ny: int, off_rim: bool = True) -> CellRegion:
    lo = 1 if off_rim else 0
    width = int(rng.integers(1, max(2, nx - 2 * lo)))
    height = int(rng.integers(1, max(2, ny - 2 * lo)))
    i0 = int(rng.integers(lo, nx - lo - width + 1))
    j0 = int(rng.integers(lo, ny - lo - height + 1))
    return CellRegion.block(nx, ny, i0, j0, width, height)


def random_law(rng: np.random.Generator, case: ContrastCase = ContrastCase.HIGH) -> MaterialLaw:
    """A random admissible law: above 2 for high contrast, below 1 for low contrast."""
    pick = int(rng.integers(0, 4))
    if case == ContrastCase.HIGH:
        a = 2.0 + rng.uniform(0.0, 1.0)
        if pick == 0:
            return sigmoid_law(a, rng.uniform(0.2, 2.0), rng.uniform(0.5, 2.0))
        if pick == 1:
            return affine_law(a, rng.uniform(0.1, 2.0))
        if pick == 2:
            return power_law(rng.uniform(0.5, 2.0), 1.0, 4.0, a=a)
        return saturating_law(a, rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), kind=LawKind.BOUNDED, gamma_lo=a)
    top = rng.uniform(0.5, 1.0)
    if pick in (0, 1):
        b = rng.uniform(0.1, 0.5) * top
        return sigmoid_law(top - b, b, rng.uniform(0.5, 2.0))
    return saturating_law(0.1 * top, 0.9 * top, rng.uniform(0.5, 2.0), kind=LawKind.VANISHING, gamma_hi=top,
                          gamma_lo=0.1 * top)


def _power(mesh, material, f) -> float:
    return solve(DirichletProblem(mesh, material, f)).power_avg


# ---------------------------------------------------------------------------
# Suites
# ---------------------------------------------------------------------------

def fd_gradient_suite(n_trials: int = 50, seed: int = 0, tolerance: float = 1e-5) -> List[OracleReport]:
    """Analytic energy gradient against central differences on random states."""
    rng = np.random.default_rng(seed)
    makers = [
        ("linear", lambda: constant_law(rng.uniform(0.5, 2.0))),
        ("affine", lambda: affine_law(rng.uniform(0.5, 2.0), rng.uniform(0.1, 2.0))),
        ("power q=4", lambda: power_law(rng.uniform(0.5, 2.0), 1.0, 4.0)),
        ("sigmoid", lambda: sigmoid_law(rng.uniform(0.5, 2.0), rng.uniform(0.1, 2.0), rng.uniform(0.5, 2.0))),
    ]
    reports = []
    for trial in range(n_trials):
        name, make = makers[trial % len(makers)]
        n = int(rng.integers(2, 5))
        mesh = build_mesh(n, n)
        region = _random_block(rng, n, n, off_rim=False)
        material = MaterialAssignment(background=as_background(rng.uniform(0.5, 2.0, n * n), n, n),
                                      region=region, law=make())
        problem = DirichletProblem(mesh, material, _random_zero_mean(mesh, rng))
        u = np.zeros(mesh.n_vertices)
        u[mesh.boundary_vertices] = problem.boundary_data
        u[mesh.interior_vertices] = rng.uniform(-1.0, 1.0, mesh.interior_vertices.size)
        h = 1e-6 * max(1.0, float(np.max(np.abs(u))))
        fd = np.empty(mesh.interior_vertices.size)
        for k, v in enumerate(mesh.interior_vertices):
            up, down = u.copy(), u.copy()
            up[v] += h
            down[v] -= h
            fd[k] = (assemble_energy(problem, up) - assemble_energy(problem, down)) / (2 * h)
        grad = energy_gradient(problem, u)
        err, ref = float(np.linalg.norm(grad - fd)), float(np.linalg.norm(fd))
        reports.append(OracleReport(quantity="energy gradient", main_value=float(np.linalg.norm(grad)),
                                    oracle_value=ref, abs_error=err, rel_error=err / max(ref, 1e-300),
                                    tolerance=tolerance, passed=bool(err <= tolerance * max(ref, 1e-12)), detail=name))
    return reports


EQUIVALENCE_KINDS = (LawKind.LINEAR, LawKind.BOUNDED, LawKind.GROWTH, LawKind.VANISHING)


def random_law_of_kind(rng: np.random.Generator, kind: LawKind) -> Tuple[MaterialLaw, ContrastCase]:
    """A random law of one class with the contrast case it pairs with; vanishing laws sit below 1."""
    if kind == LawKind.LINEAR:
        return constant_law(2.0 + rng.uniform(0.0, 1.0)), ContrastCase.HIGH
    if kind == LawKind.BOUNDED:
        return sigmoid_law(2.0 + rng.uniform(0.0, 1.0), rng.uniform(0.2, 2.0), rng.uniform(0.5, 2.0)), ContrastCase.HIGH
    if kind == LawKind.GROWTH:
        a = 2.0 + rng.uniform(0.0, 1.0)
        if rng.integers(0, 2):
            return power_law(rng.uniform(0.5, 2.0), 1.0, 4.0, a=a), ContrastCase.HIGH
        return affine_law(a, rng.uniform(0.1, 2.0)), ContrastCase.HIGH
    if kind == LawKind.VANISHING:
        top = rng.uniform(0.5, 1.0)
        law = saturating_law(0.1 * top, 0.9 * top, rng.uniform(0.5, 2.0), kind=LawKind.VANISHING, gamma_hi=top,
                             gamma_lo=0.1 * top)
        return law, ContrastCase.LOW
    raise OracleError(f"no random law for class {kind.value}")


def solver_equivalence_suite(n_trials: int = 10, seed: int = 0, tolerance: float = 1e-6,
                             kinds: Sequence[LawKind] = EQUIVALENCE_KINDS) -> List[OracleReport]:
    """
    Newton energy against the coordinate-descent minimum on meshes with at most
    25 interior DOFs; ``n_trials`` per law class.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for kind in kinds:
        for _ in range(n_trials):
            n = int(rng.integers(3, 7))
            mesh = build_mesh(n, n)
            law, case = random_law_of_kind(rng, LawKind(kind))
            background = 1.5 if case == ContrastCase.HIGH else 1.2
            material = build_assignment(background, _random_block(rng, n, n, off_rim=False), law, case)
            problem = DirichletProblem(mesh, material, _random_zero_mean(mesh, rng))
            main = solve_nonlinear(problem).energy
            reference = dense_minimize(problem).energy
            reports.append(compare("minimum energy", main, reference, tolerance,
                                   detail=f"{law.kind.value}: {law.name}, {n}x{n}"))
    return reports


def pointwise_monotonicity_suite(n_trials: int = 100, seed: int = 0, slack: float = 1e-8) -> List[OracleReport]:
    """Random ordered pairs gamma_1 <= gamma_2 must give P_1 <= P_2 for random data."""
    rng = np.random.default_rng(seed)
    reports = []
    for trial in range(n_trials):
        n = int(rng.integers(3, 9))
        mesh = build_mesh(n, n)
        region = _random_block(rng, n, n, off_rim=False)
        bg1 = as_background(rng.uniform(1.0, 2.0, n * n), n, n)
        factor = 1.0 if trial % 10 == 0 else 1.0 + rng.uniform(0.0, 1.0)
        bg_factor = 1.0 if trial % 10 == 0 else 1.0 + rng.uniform(0.0, 1.0)
        law1 = random_law(rng)
        first = MaterialAssignment(background=bg1, region=region, law=law1)
        second = MaterialAssignment(background=as_background(bg1 * bg_factor, n, n), region=region,
                                    law=scaled_law(law1, factor))
        f = _random_zero_mean(mesh, rng)
        p1, p2 = _power(mesh, first, f), _power(mesh, second, f)
        reports.append(ordering_report("pointwise monotonicity", p1, p2, slack * max(1.0, abs(p2)),
                                       detail=f"{law1.name}, factors {bg_factor:.3f}/{factor:.3f}"))
    return reports


def _limit_phantom(rng: np.random.Generator, n: int):
    mesh = build_mesh(n, n)
    region = _random_block(rng, n, n, off_rim=True)
    case = ContrastCase.HIGH if rng.uniform() < 0.5 else ContrastCase.LOW
    background = rng.uniform(1.0, 1.5) if case == ContrastCase.HIGH else rng.uniform(1.2, 2.0)
    material = build_assignment(background, region, random_law(rng, case), case)
    return mesh, material


def ordering_chain_suite(n_trials: int = 50, seed: int = 0, excitations: int = 4,
                         slack: float = 1e-8) -> List[OracleReport]:
    """P_0 <= P_A <= P_inf for random anomalies and data."""
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_trials):
        mesh, material = _limit_phantom(rng, int(rng.integers(4, 9)))
        pec = build_limit_material(material.background, material.region, MaterialLimit.INFINITE)
        pei = build_limit_material(material.background, material.region, MaterialLimit.ZERO)
        for _ in range(excitations):
            f = _random_zero_mean(mesh, rng)
            p_zero, p_a, p_inf = _power(mesh, pei, f), _power(mesh, material, f), _power(mesh, pec, f)
            tol = slack * max(1.0, p_inf)
            reports.append(ordering_report("zero limit below anomaly", p_zero, p_a, tol, detail=material.law.name))
            reports.append(ordering_report("anomaly below infinite limit", p_a, p_inf, tol, detail=material.law.name))
    return reports


def background_ordering_suite(n_trials: int = 50, seed: int = 0, slack: float = 1e-8) -> List[OracleReport]:
    """Limit materials against the background: P_0 <= P_bg <= P_inf."""
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(n_trials):
        mesh, material = _limit_phantom(rng, int(rng.integers(4, 9)))
        f = _random_zero_mean(mesh, rng)
        background = MaterialAssignment(background=material.background,
                                        region=CellRegion.empty(mesh.nx, mesh.ny), law=constant_law(1.0))
        p_bg = _power(mesh, background, f)
        p_inf = _power(mesh, build_limit_material(material.background, material.region, MaterialLimit.INFINITE), f)
        p_zero = _power(mesh, build_limit_material(material.background, material.region, MaterialLimit.ZERO), f)
        tol = slack * max(1.0, p_inf)
        reports.append(ordering_report("background below infinite limit", p_bg, p_inf, tol))
        reports.append(ordering_report("zero limit below background", p_zero, p_bg, tol))
    return reports


def mp_forward_suite(n_trials: int = 100, seed: int = 0, n: int = 8, slack: float = 1e-8) -> List[OracleReport]:
    """A test inside the anomaly must pass the noise-free test in the case-appropriate direction."""
    rng = np.random.default_rng(seed)
    mesh = build_mesh(n, n)
    reports = []
    for trial in range(n_trials):
        case = ContrastCase.HIGH if trial % 2 == 0 else ContrastCase.LOW
        region = _random_block(rng, n, n, off_rim=False)
        i0, j0, i1, j1 = region.bounding_box()
        w, h = int(rng.integers(1, i1 - i0 + 1)), int(rng.integers(1, j1 - j0 + 1))
        test = CellRegion.block(n, n, int(rng.integers(i0, i1 - w + 1)), int(rng.integers(j0, j1 - h + 1)), w, h)
        background = rng.uniform(1.0, 1.5) if case == ContrastCase.HIGH else rng.uniform(1.2, 2.0)
        law = random_law(rng, case)
        material = build_assignment(background, region, law, case)
        linear = build_test_material(background, test, case, law)
        f = _random_zero_mean(mesh, rng)
        p_a, p_t = _power(mesh, material, f), _power(mesh, linear, f)
        lower, upper = (p_t, p_a) if case == ContrastCase.HIGH else (p_a, p_t)
        reports.append(ordering_report(f"monotonicity ({case.value} contrast)", lower, upper,
                                       slack * max(1.0, abs(upper)), detail=law.name))
    return reports


def nestedness_suite(data: MeasurementSet, eta: Tuple[float, float], seeds: Sequence[int],
                     mutation: Optional[str] = None) -> List[OracleReport]:
    """
    Ideal within regularized within deterministic masks, per noise seed.

    ``mutation="flip_noise_sign"`` reverses the regularization shift so the
    battery can be shown to catch a broken rule.
    """
    if mutation not in (None, "flip_noise_sign"):
        raise OracleError(f"unknown mutation {mutation!r}")
    sign = -1.0 if mutation == "flip_noise_sign" else 1.0
    ideal = reconstruct(data, ReconstructionRule.ideal()).mask
    deterministic = reconstruct(data, ReconstructionRule.deterministic(*eta)).mask
    reports = []
    for seed in seeds:
        noisy = with_noise(data, NoiseModel(eta1=eta[0], eta2=eta[1], L=data.L, seed=int(seed)))
        regularized = reconstruct(noisy, ReconstructionRule.regularized(*eta, noise_sign=sign)).mask
        ok = ideal <= regularized <= deterministic
        reports.append(OracleReport(quantity="mask nestedness", main_value=float(regularized.count),
                                    oracle_value=float(deterministic.count), abs_error=0.0 if ok else 1.0,
                                    rel_error=0.0 if ok else 1.0, tolerance=0.0, passed=bool(ok),
                                    detail=f"seed {seed}, ideal {ideal.count} cells"))
    return reports


def summarize(reports: Sequence[OracleReport]) -> dict:
    return {"total": len(reports), "passed": sum(r.passed for r in reports),
            "failed": sum(not r.passed for r in reports)}
