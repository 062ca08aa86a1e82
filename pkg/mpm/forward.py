"""
P1 finite-element forward solver for div(gamma(x, |grad u|) grad u) = 0 with
Dirichlet data, by minimization of the Dirichlet energy

    E(u) = sum_t area_t * Q_t(|grad u|_t)

plus the perfectly conducting / insulating limit solvers and power products.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import splu, spsolve

from config import settings
from mpm.geometry import CellRegion, StructuredTriMesh
from mpm.materials import MaterialAssignment, MaterialLimit, as_background
from mpm.mpm_utils import GeometryError, MaterialError, SolverError

logger = structlog.get_logger(__name__)

HESSIAN_FLOOR = 1e-12
ARMIJO = 1e-4


class SolverStats(BaseModel):
    """Per-solve diagnostics serialized with results."""
    method: str = Field(description="newton, linear, pec or pei")
    iterations: int = 0
    residual: float = 0.0
    residual_history: List[float] = Field(default_factory=list)
    backtracks: int = 0
    gradient_fallbacks: int = 0
    tied_groups: int = 0
    floating_components: int = 0


@dataclass(frozen=True, eq=False)
class DirichletProblem:
    """Mesh, material and zero-mean Dirichlet data on the boundary loop."""

    mesh: StructuredTriMesh
    material: MaterialAssignment
    boundary_data: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.boundary_data, dtype=float).ravel().copy()
        if f.size != self.mesh.boundary_vertices.size:
            raise GeometryError(f"boundary data has {f.size} values, mesh rim has {self.mesh.boundary_vertices.size}")
        if not np.all(np.isfinite(f)):
            raise MaterialError("boundary data must be finite")
        w = self.mesh.boundary_weights
        if abs(w @ f) > 1e-12 * w.sum() * max(np.abs(f).max(), 1e-300):
            raise MaterialError(f"boundary data is not mean zero (weighted mean {w @ f / w.sum():.3e})")
        if not self.material.region.matches(self.mesh):
            raise GeometryError("material grid does not match the mesh")
        f.setflags(write=False)
        object.__setattr__(self, "boundary_data", f)


@dataclass(frozen=True, eq=False)
class ForwardSolution:
    u: np.ndarray
    gradients: np.ndarray
    energy: float
    power_avg: float
    power_classical: float
    stats: SolverStats


class _TriangleMaterial:
    """Per-triangle view of an assignment: linear coefficients plus the nonlinear triangles."""

    def __init__(self, mesh: StructuredTriMesh, material: MaterialAssignment):
        if material.limit != MaterialLimit.NONE:
            raise MaterialError(f"{material.limit.value}-limit assignments have no finite energy density")
        self.law = material.law
        self.coefficients = np.asarray(material.background, dtype=float)[mesh.triangle_pixels].copy()
        mask = material.region.triangle_mask(mesh)
        if self.law.is_linear:
            self.coefficients[mask] = float(self.law.evaluate(np.ones(1))[0])
            mask = np.zeros_like(mask)
        self.nonlinear = mask

    def gamma(self, s: np.ndarray) -> np.ndarray:
        g = self.coefficients.copy()
        if self.nonlinear.any():
            g[self.nonlinear] = self.law.evaluate(s[self.nonlinear])
        return g

    def slope(self, s: np.ndarray) -> np.ndarray:
        d = np.zeros_like(s)
        if self.nonlinear.any():
            d[self.nonlinear] = self.law.slope(s[self.nonlinear])
        return d

    def density(self, s: np.ndarray) -> np.ndarray:
        q = 0.5 * self.coefficients * s ** 2
        if self.nonlinear.any():
            q[self.nonlinear] = self.law.energy_density(s[self.nonlinear])
        return q


def triangle_gradients(mesh: StructuredTriMesh, u: np.ndarray) -> np.ndarray:
    """Constant P1 gradient of ``u`` on every triangle, shape (n_triangles, 2)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (mesh.n_vertices,):
        raise GeometryError(f"u has shape {u.shape}, mesh has {mesh.n_vertices} vertices")
    return np.einsum("tki,ti->tk", mesh.gradient_operators, u[mesh.triangles])


def stiffness_matrix(mesh: StructuredTriMesh, triangle_coefficients: np.ndarray,
                     triangles: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    """Assembled sum of c_t * area_t * G_t^T G_t over the selected triangles (all by default)."""
    idx = np.arange(mesh.n_triangles) if triangles is None else np.asarray(triangles)
    G = mesh.gradient_operators[idx]
    local = (mesh.areas[idx] * np.asarray(triangle_coefficients, dtype=float)[idx])[:, None, None] * \
        np.einsum("tki,tkj->tij", G, G)
    tri = mesh.triangles[idx]
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()


def _lift(mesh: StructuredTriMesh, boundary_data: np.ndarray) -> np.ndarray:
    u = np.zeros(mesh.n_vertices)
    u[mesh.boundary_vertices] = boundary_data
    return u


def _linear_solve(mesh: StructuredTriMesh, triangle_coefficients: np.ndarray, boundary_data: np.ndarray) -> np.ndarray:
    K = stiffness_matrix(mesh, triangle_coefficients)
    u = _lift(mesh, boundary_data)
    interior = mesh.interior_vertices
    if interior.size:
        K_ii = K[interior][:, interior].tocsc()
        u[interior] = spsolve(K_ii, -(K[interior] @ u))
    return u


def _finish(mesh: StructuredTriMesh, tri_mat: _TriangleMaterial, u: np.ndarray, stats: SolverStats) -> ForwardSolution:
    grads = triangle_gradients(mesh, u)
    s = np.linalg.norm(grads, axis=1)
    energy = float(mesh.areas @ tri_mat.density(s))
    classical = float(mesh.areas @ (tri_mat.gamma(s) * s ** 2))
    return ForwardSolution(u=u, gradients=grads, energy=energy, power_avg=energy,
                           power_classical=classical, stats=stats)


def assemble_energy(problem: DirichletProblem, u: np.ndarray) -> float:
    """Dirichlet energy of ``u``; exact per triangle because |grad u| is constant there."""
    tri_mat = _TriangleMaterial(problem.mesh, problem.material)
    s = np.linalg.norm(triangle_gradients(problem.mesh, u), axis=1)
    return float(problem.mesh.areas @ tri_mat.density(s))


def _full_gradient(mesh: StructuredTriMesh, tri_mat: _TriangleMaterial, u: np.ndarray) -> np.ndarray:
    grads = triangle_gradients(mesh, u)
    s = np.linalg.norm(grads, axis=1)
    flux = (mesh.areas * tri_mat.gamma(s))[:, None] * grads
    local = np.einsum("tki,tk->ti", mesh.gradient_operators, flux)
    r = np.zeros(mesh.n_vertices)
    np.add.at(r, mesh.triangles, local)
    return r


def energy_gradient(problem: DirichletProblem, u: np.ndarray) -> np.ndarray:
    """Weak-form residual sum_t area*gamma*grad u . grad phi_i over interior vertices i."""
    tri_mat = _TriangleMaterial(problem.mesh, problem.material)
    return _full_gradient(problem.mesh, tri_mat, u)[problem.mesh.interior_vertices]


def _hessian(mesh: StructuredTriMesh, tri_mat: _TriangleMaterial, u: np.ndarray) -> sparse.csr_matrix:
    grads = triangle_gradients(mesh, u)
    s = np.linalg.norm(grads, axis=1)
    g = tri_mat.gamma(s)
    floor = HESSIAN_FLOOR * max(float(np.max(g)), 1.0)
    lam_perp = np.maximum(g, floor)
    lam_par = np.maximum(g + tri_mat.slope(s) * s, floor)
    lam_par = np.where(np.isfinite(lam_par), lam_par, lam_perp)
    with np.errstate(invalid="ignore", divide="ignore"):
        direction = np.where(s[:, None] > 0, grads / s[:, None], 0.0)
    tensor = lam_perp[:, None, None] * np.eye(2) + \
        (lam_par - lam_perp)[:, None, None] * np.einsum("ti,tj->tij", direction, direction)
    G = mesh.gradient_operators
    local = mesh.areas[:, None, None] * np.einsum("tki,tkl,tlj->tij", G, tensor, G)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_vertices,) * 2).tocsr()


def solve_nonlinear(problem: DirichletProblem, tol: float = None, max_iter: int = None) -> ForwardSolution:
    """
    Damped Newton on the convex energy, started from the background linear solve.

    Steps that fail the Armijo test after the backtracking budget fall back to a
    steepest-descent step; a stall of both raises SolverError with the residual history.
    """
    tol = settings.SOLVER_TOL if tol is None else tol
    max_iter = settings.SOLVER_MAX_ITER if max_iter is None else max_iter
    if not tol > 0:
        raise SolverError(f"tol must be positive, got {tol}")
    mesh = problem.mesh
    tri_mat = _TriangleMaterial(mesh, problem.material)
    if not tri_mat.nonlinear.any():
        u = _linear_solve(mesh, tri_mat.coefficients, problem.boundary_data)
        return _finish(mesh, tri_mat, u, SolverStats(method="linear"))

    background = np.asarray(problem.material.background, dtype=float)[mesh.triangle_pixels]
    u = _linear_solve(mesh, background, problem.boundary_data)
    interior = mesh.interior_vertices
    stats = SolverStats(method="newton")

    def energy(v):
        s = np.linalg.norm(triangle_gradients(mesh, v), axis=1)
        return float(mesh.areas @ tri_mat.density(s))

    r = _full_gradient(mesh, tri_mat, u)[interior]
    r0 = np.linalg.norm(r)
    e_curr = energy(u)
    for iteration in range(max_iter + 1):
        res = np.linalg.norm(r) / (1.0 + r0)
        stats.residual_history.append(float(res))
        if res <= tol:
            stats.iterations = iteration
            stats.residual = float(res)
            logger.debug("✅ Newton converged", iterations=iteration, residual=res)
            return _finish(mesh, tri_mat, u, stats)
        if iteration == max_iter:
            break

        H = _hessian(mesh, tri_mat, u)[interior][:, interior].tocsc()
        direction = spsolve(H, -r)
        if not np.all(np.isfinite(direction)) or r @ direction >= 0:
            direction = -r
            stats.gradient_fallbacks += 1

        accepted = _line_search(u, interior, direction, r, e_curr, energy, stats)
        if accepted is None and not np.array_equal(direction, -r):
            logger.warning("⚠️ Newton step rejected, falling back to gradient step", iteration=iteration)
            stats.gradient_fallbacks += 1
            accepted = _line_search(u, interior, -r, r, e_curr, energy, stats)
        if accepted is None:
            raise SolverError(f"line search stalled at iteration {iteration} (residual {res:.3e})",
                              stats.residual_history)
        u, e_curr = accepted
        r = _full_gradient(mesh, tri_mat, u)[interior]

    raise SolverError(f"Newton did not converge in {max_iter} iterations "
                      f"(residual {stats.residual_history[-1]:.3e})", stats.residual_history)


def _line_search(u, interior, direction, r, e_curr, energy, stats):
    slope = float(r @ direction)
    slack = 1e-14 * max(1.0, abs(e_curr))
    t = 1.0
    for _ in range(settings.LINE_SEARCH_MAX_BACKTRACKS + 1):
        trial = u.copy()
        trial[interior] += t * direction
        e_trial = energy(trial)
        if np.isfinite(e_trial) and e_trial <= e_curr + ARMIJO * t * slope + slack:
            return trial, e_trial
        t *= 0.5
        stats.backtracks += 1
    return None


def _limit_region(problem: DirichletProblem, limit: MaterialLimit) -> CellRegion:
    material = problem.material
    if material.limit != limit:
        raise MaterialError(f"expected a {limit.value}-limit assignment, got {material.limit.value}")
    if material.region.touches_rim():
        raise MaterialError(f"{limit.value}-limit anomaly must not touch the domain rim")
    return material.region


def _vertex_components(mesh: StructuredTriMesh, selected: np.ndarray) -> np.ndarray:
    """Component label of every vertex in the edge graph of the selected triangles."""
    tri = mesh.triangles[selected]
    edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [0, 2]]])
    graph = sparse.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(mesh.n_vertices,) * 2)
    _, labels = csgraph.connected_components(graph, directed=False)
    return labels


def _exterior_result(mesh, u, coefficients, exterior, stats) -> ForwardSolution:
    grads = triangle_gradients(mesh, u)
    s2 = np.sum(grads ** 2, axis=1)
    classical = float(np.sum((mesh.areas * coefficients * s2)[exterior]))
    return ForwardSolution(u=u, gradients=grads, energy=0.5 * classical, power_avg=0.5 * classical,
                           power_classical=classical, stats=stats)


def solve_pec(problem: DirichletProblem) -> ForwardSolution:
    """
    Perfectly conducting anomaly: all vertices of each connected anomaly part are
    tied to one unknown, and the background problem is solved on the exterior.

    Parts that only touch at a corner share a vertex and are tied together.
    """
    mesh = problem.mesh
    region = _limit_region(problem, MaterialLimit.INFINITE)
    coefficients = np.asarray(problem.material.background, dtype=float)[mesh.triangle_pixels]
    if region.is_empty():
        u = _linear_solve(mesh, coefficients, problem.boundary_data)
        return _exterior_result(mesh, u, coefficients, np.ones(mesh.n_triangles, bool), SolverStats(method="pec"))

    inside = region.triangle_mask(mesh)
    exterior = ~inside
    tri = mesh.triangles[inside]
    labels = _vertex_components(mesh, inside)
    tied = np.unique(tri)
    group_ids, group_of = np.unique(labels[tied], return_inverse=True)

    free = np.setdiff1d(mesh.interior_vertices, tied)
    column = np.full(mesh.n_vertices, -1)
    column[free] = np.arange(free.size)
    column[tied] = free.size + group_of
    n_dofs = free.size + group_ids.size
    rows = np.flatnonzero(column >= 0)
    P = sparse.csr_matrix((np.ones(rows.size), (rows, column[rows])), shape=(mesh.n_vertices, n_dofs))

    K = stiffness_matrix(mesh, coefficients, np.flatnonzero(exterior))
    lift = _lift(mesh, problem.boundary_data)
    z = spsolve((P.T @ K @ P).tocsc(), -(P.T @ (K @ lift)))
    u = lift + P @ np.atleast_1d(z)
    stats = SolverStats(method="pec", tied_groups=int(group_ids.size))
    logger.debug("🔗 PEC solve", tied_groups=stats.tied_groups, dofs=n_dofs)
    return _exterior_result(mesh, u, coefficients, exterior, stats)


def solve_pei(problem: DirichletProblem) -> ForwardSolution:
    """
    Perfectly insulating anomaly: the background problem on the exterior
    triangles only (zero flux through the anomaly boundary), followed by a
    harmonic fill of the anomaly from its trace.
    """
    mesh = problem.mesh
    region = _limit_region(problem, MaterialLimit.ZERO)
    coefficients = np.asarray(problem.material.background, dtype=float)[mesh.triangle_pixels]
    if region.is_empty():
        u = _linear_solve(mesh, coefficients, problem.boundary_data)
        return _exterior_result(mesh, u, coefficients, np.ones(mesh.n_triangles, bool), SolverStats(method="pei"))

    inside = region.triangle_mask(mesh)
    exterior = ~inside
    stats = SolverStats(method="pei")
    K = stiffness_matrix(mesh, coefficients, np.flatnonzero(exterior))
    u = _lift(mesh, problem.boundary_data)

    ext_vertices = np.unique(mesh.triangles[exterior])
    labels = _vertex_components(mesh, exterior)
    grounded = np.isin(labels, labels[mesh.boundary_vertices])
    on_exterior = np.zeros(mesh.n_vertices, bool)
    on_exterior[ext_vertices] = True
    interior = np.zeros(mesh.n_vertices, bool)
    interior[mesh.interior_vertices] = True

    solve_for = np.flatnonzero(on_exterior & interior & grounded)
    if solve_for.size:
        K_ii = K[solve_for][:, solve_for].tocsc()
        u[solve_for] = spsolve(K_ii, -(K[solve_for] @ u))

    trace = np.intersect1d(np.unique(mesh.triangles[inside]), ext_vertices)
    floating = on_exterior & ~grounded
    if floating.any():
        stats.floating_components = int(np.unique(labels[floating]).size)
        grounded_trace = trace[grounded[trace]]
        level = float(np.mean(u[grounded_trace])) if grounded_trace.size else 0.0
        u[floating] = level
        logger.warning("⚠️ Exterior parts enclosed by the insulating anomaly set to the trace mean",
                       components=stats.floating_components, level=level)

    hidden = np.setdiff1d(np.unique(mesh.triangles[inside]), trace)
    if hidden.size:
        K_in = stiffness_matrix(mesh, np.ones(mesh.n_triangles), np.flatnonzero(inside))
        u[hidden] = spsolve(K_in[hidden][:, hidden].tocsc(), -(K_in[hidden][:, trace] @ u[trace]))
    return _exterior_result(mesh, u, coefficients, exterior, stats)


def solve(problem: DirichletProblem, tol: float = None, max_iter: int = None) -> ForwardSolution:
    """Route a problem to the nonlinear, PEC or PEI solver by its material limit."""
    limit = problem.material.limit
    if limit == MaterialLimit.INFINITE:
        return solve_pec(problem)
    if limit == MaterialLimit.ZERO:
        return solve_pei(problem)
    return solve_nonlinear(problem, tol=tol, max_iter=max_iter)


def power_products(solution: ForwardSolution) -> Tuple[float, float]:
    """(power_avg, power_classical); the average product is the energy value itself."""
    return solution.power_avg, solution.power_classical


def linear_solutions(mesh: StructuredTriMesh, coefficients, boundary_data: np.ndarray) -> np.ndarray:
    """
    Nodal values of a linear material for many excitations at once, shape
    (n_vertices, n_excitations); the interior stiffness is factored a single time.

    ``coefficients`` is a scalar or per-pixel array, ``boundary_data`` has shape
    (n_excitations, n_boundary_vertices).
    """
    F = np.atleast_2d(np.asarray(boundary_data, dtype=float))
    if F.shape[1] != mesh.boundary_vertices.size:
        raise GeometryError(f"boundary data has {F.shape[1]} columns, mesh rim has {mesh.boundary_vertices.size}")
    c = as_background(coefficients, mesh.nx, mesh.ny)[mesh.triangle_pixels]
    K = stiffness_matrix(mesh, c)
    U = np.zeros((mesh.n_vertices, F.shape[0]))
    U[mesh.boundary_vertices] = F.T
    interior = mesh.interior_vertices
    if interior.size:
        lu = splu(K[interior][:, interior].tocsc())
        U[interior] = lu.solve(-(K[interior] @ U))
    return U


def linear_power_products(mesh: StructuredTriMesh, coefficients, boundary_data: np.ndarray) -> np.ndarray:
    """Average power products 0.5*int c |grad u_f|^2 of a linear material, one per excitation."""
    U = linear_solutions(mesh, coefficients, boundary_data)
    c = as_background(coefficients, mesh.nx, mesh.ny)[mesh.triangle_pixels]
    K = stiffness_matrix(mesh, c)
    return 0.5 * np.einsum("ij,ij->j", U, K @ U)


def gradient_energy_density(mesh: StructuredTriMesh, coefficients, u: np.ndarray, cells: CellRegion) -> float:
    """sum over triangles of ``cells`` of c * |grad u|^2 * area."""
    c = as_background(coefficients, mesh.nx, mesh.ny)[mesh.triangle_pixels]
    grads = triangle_gradients(mesh, u)
    mask = cells.triangle_mask(mesh)
    return float(np.sum((mesh.areas * c * np.sum(grads ** 2, axis=1))[mask]))
