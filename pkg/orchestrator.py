"""
Pipeline orchestrator: builds a validated experiment from a config and runs
the forward, reconstruct, sweep, verify and depleting commands, writing
results under the output directory.
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import structlog

from config import settings
from config.experiment import ExperimentConfig
from mpm import oracle
from mpm.excitation import ExcitationFamily, depleting_sequence, family_from_spec, localization_ratios
from mpm.forward import DirichletProblem, linear_power_products, linear_solutions, solve, triangle_gradients
from mpm.geometry import CellRegion, StructuredTriMesh, build_mesh, rasterize_shapes
from mpm.imaging import (
    NoiseModel,
    ReconstructionRule,
    anomaly_products,
    block_test_family,
    collect_measurements,
    converse_report,
    limit_ordering_checks,
    metrics,
    mis_estimation_check,
    noise_sweep,
    ordered_map,
    reconstruct,
    reconstruct_all,
    validate_noise_sequence,
)
from mpm.materials import (
    ContrastCase,
    MaterialAssignment,
    MaterialLaw,
    MaterialLimit,
    as_background,
    build_assignment,
    build_limit_material,
    check_admissibility,
    constant_law,
    contrast_violations,
    law_from_spec,
)
from mpm.mpm_utils import ConfigValidationError, MPMError, SolverError
from mpm.results_io import write_csv, write_json, write_pgm

logger = structlog.get_logger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_VERIFY = 3


@dataclass(frozen=True, eq=False)
class Experiment:
    """Everything a command needs, built once from a validated config."""

    config: ExperimentConfig
    mesh: StructuredTriMesh
    background: np.ndarray
    region: CellRegion
    case: ContrastCase
    law: Optional[MaterialLaw]
    test_law: Optional[MaterialLaw]
    assignment: MaterialAssignment
    family: ExcitationFamily
    tests: List[CellRegion]
    noise: NoiseModel


def _rasterize(nx: int, ny: int, specs) -> CellRegion:
    return rasterize_shapes(nx, ny, [s.model_dump(exclude_none=True) for s in specs])


def _calibration_gradient(mesh: StructuredTriMesh, background: np.ndarray, family: ExcitationFamily) -> float:
    U = linear_solutions(mesh, background, family.boundary_matrix())
    return max(float(np.max(np.linalg.norm(triangle_gradients(mesh, U[:, k]), axis=1))) for k in range(len(family)))


class MonotonicityOrchestrator:
    """
    Coordinates the imaging workflow; one method per command, each returning a
    plain result dict with status, exit code and written files.
    """

    def __init__(self, output_dir: Optional[str] = None, threads: Optional[int] = None):
        self.output_dir = output_dir
        self.threads = threads

    # ------------------------------------------------------------------
    # Experiment assembly
    # ------------------------------------------------------------------

    def build_experiment(self, config: ExperimentConfig, needs_tests: bool = True) -> Experiment:
        """Validate every cross-module precondition and collect all violations before raising."""
        violations: List[str] = []
        try:
            mesh = build_mesh(config.mesh.nx, config.mesh.ny, config.mesh.extent)
        except MPMError as e:
            raise ConfigValidationError([f"mesh: {e}"]) from e
        nx, ny = mesh.nx, mesh.ny

        background = None
        try:
            background = as_background(config.background.value, nx, ny)
        except MPMError as e:
            violations.append(f"background: {e}")

        region = CellRegion.empty(nx, ny)
        try:
            region = _rasterize(nx, ny, config.anomaly.regions)
        except (MPMError, KeyError) as e:
            violations.append(f"anomaly.regions: {e}")

        anomaly = config.anomaly
        case = ContrastCase(anomaly.contrast)
        limit = MaterialLimit(anomaly.limit)
        if limit != MaterialLimit.NONE and region.touches_rim():
            violations.append(f"anomaly.limit: {limit.value}-limit anomaly must not touch the domain rim")

        law = test_law = None
        if anomaly.law is not None:
            try:
                law = law_from_spec(anomaly.law.model_dump())
            except MPMError as e:
                violations.append(f"anomaly.law: {e}")
        elif limit == MaterialLimit.NONE and not region.is_empty():
            violations.append("anomaly.law: a nonlinear anomaly needs a law")
        if anomaly.test_law is not None:
            try:
                test_law = law_from_spec(anomaly.test_law.model_dump())
            except MPMError as e:
                violations.append(f"anomaly.test_law: {e}")
        else:
            test_law = law

        if law is not None and background is not None and limit == MaterialLimit.NONE:
            violations.extend(f"anomaly.contrast: {v}" for v in contrast_violations(background, law, case, region))
        if needs_tests:
            if test_law is None:
                violations.append("anomaly.test_law: test materials need a law with declared bounds")
            elif background is not None:
                violations.extend(f"anomaly.test_law: {v}" for v in contrast_violations(background, test_law, case))

        family = None
        if background is not None:
            target = region
            try:
                if config.excitations.target is not None:
                    target = _rasterize(nx, ny, config.excitations.target)
                family = family_from_spec(mesh, config.excitations.model_dump(), background=background, target=target)
            except (MPMError, KeyError) as e:
                violations.append(f"excitations: {e}")

        if law is not None and family is not None and not law.is_limit:
            s_max = settings.ADMISSIBILITY_OVERSAMPLING * _calibration_gradient(mesh, background, family)
            report = check_admissibility(law, s_max, settings.ADMISSIBILITY_SAMPLES)
            violations.extend(f"anomaly.law admissibility {v.clause} at s={v.s:.4g}: {v.detail}"
                              for v in report.violations)

        tests: List[CellRegion] = []
        if needs_tests:
            try:
                tests = block_test_family(mesh, config.tests.block, config.tests.stride)
            except MPMError as e:
                violations.append(f"tests: {e}")

        try:
            validate_noise_sequence(config.sweep.sequence())
        except MPMError as e:
            violations.append(f"sweep: {e}")
        if config.depleting.n_max < 1:
            violations.append(f"depleting.n_max: must be >= 1, got {config.depleting.n_max}")

        if violations:
            raise ConfigValidationError(violations)

        if region.is_empty():
            assignment = MaterialAssignment(background=background, region=region,
                                            law=constant_law(float(background.min())), contrast=case,
                                            label="background")
        elif limit != MaterialLimit.NONE:
            assignment = replace(build_limit_material(background, region, limit), contrast=case)
        else:
            assignment = build_assignment(background, region, law, case)

        noise = NoiseModel(**config.noise.model_dump())
        logger.info("🧪 Experiment ready", grid=f"{nx}x{ny}", anomaly_cells=region.count,
                    excitations=len(family), tests=len(tests), case=case.value)
        return Experiment(config=config, mesh=mesh, background=background, region=region, case=case, law=law,
                          test_law=test_law, assignment=assignment, family=family, tests=tests, noise=noise)

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _out(self, config: ExperimentConfig) -> Path:
        path = Path(self.output_dir or config.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _threads(self, config: ExperimentConfig) -> int:
        return settings.resolve_threads(self.threads if self.threads is not None else config.threads)

    @staticmethod
    def _document(command: str, config: ExperimentConfig) -> Dict[str, Any]:
        return {
            "command": command,
            "config": config.model_dump(mode="json"),
            "seed": config.noise.seed,
            "solver_settings": {**settings.solver_settings(), "tol": config.solver.tol,
                                "max_iter": config.solver.max_iter},
        }

    @staticmethod
    def _result(command: str, files: List[Path], summary: Dict[str, Any], exit_code: int = EXIT_OK) -> Dict[str, Any]:
        return {
            "command": command,
            "status": "ok" if exit_code == EXIT_OK else "failed",
            "exit_code": exit_code,
            "files": [str(f) for f in files],
            "summary": summary,
        }

    # ------------------------------------------------------------------
    # Commands
    # ------------------------------------------------------------------

    def run_forward(self, config: ExperimentConfig) -> Dict[str, Any]:
        """Forward-solve the anomaly for every excitation; write power products and nodal fields."""
        exp = self.build_experiment(config, needs_tests=False)
        out = self._out(config)
        logger.info("⚡ Step 1: Forward solves", excitations=len(exp.family))

        def run(member):
            return solve(DirichletProblem(exp.mesh, exp.assignment, member.values),
                         tol=config.solver.tol, max_iter=config.solver.max_iter)

        solutions = ordered_map(run, list(exp.family.members), self._threads(config))
        background = linear_power_products(exp.mesh, exp.background, exp.family.boundary_matrix())

        rows = []
        for member, sol, p_bg in zip(exp.family.members, solutions, background):
            rows.append({
                "label": member.label,
                "energy": sol.energy,
                "power_avg": sol.power_avg,
                "power_classical": sol.power_classical,
                "background_power": float(p_bg),
                "stats": sol.stats,
            })
        document = self._document("forward", config)
        document["excitations"] = rows
        files = [write_json(out / "forward.json", document)]

        xy = exp.mesh.vertices
        header = ["x", "y"] + [f"u_{m.label}" for m in exp.family.members]
        fields = np.column_stack([xy] + [s.u for s in solutions])
        files.append(write_csv(out / "solution.csv", header, fields.tolist()))
        logger.info("✅ Forward solves complete", files=len(files))
        return self._result("forward", files, {"excitations": len(rows),
                                               "power_avg": [r["power_avg"] for r in rows]})

    def run_reconstruct(self, config: ExperimentConfig) -> Dict[str, Any]:
        """Measure, run every applicable test rule, and write masks, margins and metrics."""
        exp = self.build_experiment(config)
        out = self._out(config)
        threads = self._threads(config)
        logger.info("📡 Step 1: Collecting measurements", tests=len(exp.tests), seed=exp.noise.seed)
        data = collect_measurements(exp.mesh, exp.assignment, exp.family, exp.tests, exp.noise,
                                    test_law=exp.test_law, threads=threads, tol=config.solver.tol)

        logger.info("🧩 Step 2: Reconstructing")
        results = {"ideal": reconstruct(data, ReconstructionRule.ideal())}
        nested = mis_estimation = None
        if not exp.noise.is_noise_free:
            bundle = reconstruct_all(data, config.eta_star())
            results.update(regularized=bundle.regularized, deterministic=bundle.deterministic,
                           unregularized=reconstruct(data, ReconstructionRule.unregularized()))
            nested = bundle.nested
            mis_estimation = mis_estimation_check(data, (exp.noise.eta1, exp.noise.eta2), config.eta_star())

        files = [write_pgm(out / f"mask_{name}.pgm", r.mask) for name, r in results.items()]
        header = ["test", "i0", "j0", "i1", "j1"] + [f"margin_{name}" for name in results]
        rows = [[k, *t.bounding_box(), *(float(r.margins[k]) for r in results.values())]
                for k, t in enumerate(exp.tests)]
        files.append(write_csv(out / "margins.csv", header, rows))

        document = self._document("reconstruct", config)
        document.update({
            "instrument_range": data.L,
            "eta_star": list(config.eta_star()),
            "products": {"exact": data.exact, "noisy": data.noisy, "background": data.background,
                         "labels": exp.family.labels},
            "nested": nested,
            "mis_estimation": mis_estimation,
            "anomaly_cells": exp.region.pixels,
            "results": {
                name: {
                    "rule": r.rule,
                    "passed": int(r.n_passed),
                    "mask": r.mask.pixels,
                    "metrics": metrics(r, exp.region),
                }
                for name, r in results.items()
            },
            "converse": converse_report(results["ideal"], exp.region),
        })
        files.append(write_json(out / "reconstruct.json", document))
        summary = {name: metrics(r, exp.region).model_dump() for name, r in results.items()}
        logger.info("✅ Reconstruction complete", masks=len(results), nested=nested)
        return self._result("reconstruct", files, summary)

    def run_sweep(self, config: ExperimentConfig) -> Dict[str, Any]:
        """Deterministic masks along the configured decreasing noise sequence."""
        exp = self.build_experiment(config)
        out = self._out(config)
        data = collect_measurements(exp.mesh, exp.assignment, exp.family, exp.tests, NoiseModel(L=exp.noise.L),
                                    test_law=exp.test_law, threads=self._threads(config), tol=config.solver.tol)
        study = noise_sweep(data, config.sweep.sequence())
        rows = [[k, a, b, size, k == 0 or study.nested[k - 1], eq]
                for k, ((a, b), size, eq) in enumerate(zip(study.etas, study.sizes, study.equals_ideal))]
        files = [write_csv(out / "sweep.csv", ["k", "eta1", "eta2", "cells", "nested", "equals_ideal"], rows)]
        document = self._document("sweep", config)
        document["study"] = study
        files.append(write_json(out / "sweep.json", document))
        return self._result("sweep", files, {"equality_index": study.equality_index,
                                             "threshold_index": study.threshold_index,
                                             "all_nested": study.all_nested})

    def run_verify(self, config: ExperimentConfig) -> Dict[str, Any]:
        """Run the oracle and property battery; exit code 3 when anything fails."""
        exp = self.build_experiment(config)
        out = self._out(config)
        v = config.verify
        seed = config.noise.seed
        suites: Dict[str, Callable[[], list]] = {
            "fd_gradient": lambda: oracle.fd_gradient_suite(v.fd_trials, seed),
            "solver_equivalence": lambda: oracle.solver_equivalence_suite(v.oracle_trials, seed),
            "pointwise_monotonicity": lambda: oracle.pointwise_monotonicity_suite(v.monotonicity_trials, seed),
            "ordering_chain": lambda: oracle.ordering_chain_suite(v.chain_trials, seed),
            "background_ordering": lambda: oracle.background_ordering_suite(v.chain_trials, seed),
            "mp_forward": lambda: oracle.mp_forward_suite(v.mp_trials, seed),
            "nestedness": lambda: self._nestedness(exp, config),
        }
        if not exp.region.is_empty() and not exp.region.touches_rim() and exp.law is not None \
                and exp.assignment.limit == MaterialLimit.NONE:
            suites["phantom_limits"] = lambda: limit_ordering_checks(exp.mesh, exp.assignment, exp.family,
                                                                     threads=self._threads(config))

        report: Dict[str, Any] = {}
        all_passed = True
        for name, run in suites.items():
            logger.info("🔬 Running suite", suite=name)
            items = run()
            passed = sum(bool(item.passed) for item in items)
            all_passed &= passed == len(items)
            report[name] = {"total": len(items), "passed": passed, "failed": len(items) - passed, "items": items}
            level = logger.info if passed == len(items) else logger.warning
            level("📋 Suite finished", suite=name, passed=passed, total=len(items))

        document = self._document("verify", config)
        document.update({"suites": report, "all_passed": all_passed, "mutation": v.mutation})
        files = [write_json(out / "verify.json", document)]
        summary = {name: {k: r[k] for k in ("total", "passed", "failed")} for name, r in report.items()}
        return self._result("verify", files, summary, EXIT_OK if all_passed else EXIT_VERIFY)

    def _nestedness(self, exp: Experiment, config: ExperimentConfig) -> list:
        v = config.verify
        noise = NoiseModel(eta1=v.eta1, eta2=v.eta2, L=exp.noise.L, seed=config.noise.seed)
        data = collect_measurements(exp.mesh, exp.assignment, exp.family, exp.tests, noise,
                                    test_law=exp.test_law, threads=self._threads(config), tol=config.solver.tol)
        seeds = range(config.noise.seed, config.noise.seed + v.nestedness_seeds)
        return oracle.nestedness_suite(data, (v.eta1, v.eta2), seeds, mutation=v.mutation)

    def run_depleting(self, config: ExperimentConfig) -> Dict[str, Any]:
        """Depleting sequence against a target: localization ratios and energy gaps per index."""
        d = config.depleting
        violations = []
        if d.n_max < 1:
            violations.append(f"depleting.n_max: must be >= 1, got {d.n_max}")
        try:
            mesh = build_mesh(d.nx, d.ny)
            target = _rasterize(d.nx, d.ny, d.target)
            if target.is_empty():
                violations.append("depleting.target: region is empty")
            elif target.touches_rim():
                violations.append("depleting.target: region touches the rim; the target must stay off the boundary")
        except (MPMError, KeyError) as e:
            violations.append(f"depleting: {e}")
        if violations:
            raise ConfigValidationError(violations)

        out = self._out(config)
        family = depleting_sequence(mesh, d.background, target, d.n_max)
        ratios = localization_ratios(mesh, d.background, family, target)
        p_bg = linear_power_products(mesh, d.background, family.boundary_matrix())
        material, material_name = self._depleting_target_material(config, target)
        p_target = anomaly_products(mesh, material, family, threads=self._threads(config))

        params = family.depleting
        rows = [[n, delta, ratio, pb, pt - pb]
                for n, delta, ratio, pb, pt in zip(range(1, d.n_max + 1), params.attenuations, ratios, p_bg, p_target)]
        files = [write_csv(out / "depleting.csv",
                           ["n", "delta_n", "ratio", "p_background", "p_target_minus_background"], rows)]
        document = self._document("deplete", config)
        document.update({"params": params, "target_material": material_name, "ratios": ratios,
                         "p_background": p_bg, "p_target": p_target})
        files.append(write_json(out / "depleting.json", document))
        return self._result("deplete", files, {"ratios": ratios.tolist(), "side": params.side,
                                               "target_material": material_name})

    def _depleting_target_material(self, config: ExperimentConfig, target: CellRegion) -> Tuple[MaterialAssignment, str]:
        d = config.depleting
        anomaly = config.anomaly
        if anomaly.law is not None and anomaly.limit == "none":
            law = law_from_spec(anomaly.law.model_dump())
            case = ContrastCase(anomaly.contrast)
            bg = as_background(d.background, d.nx, d.ny)
            if not contrast_violations(bg, law, case, target):
                return build_assignment(bg, target, law, case), law.name
        limit = MaterialLimit.ZERO if anomaly.limit == "zero" else MaterialLimit.INFINITE
        return build_limit_material(d.background, target, limit), limit.value

    # ------------------------------------------------------------------
    # Entry
    # ------------------------------------------------------------------

    COMMANDS = {
        "forward": "run_forward",
        "reconstruct": "run_reconstruct",
        "sweep": "run_sweep",
        "verify": "run_verify",
        "deplete": "run_depleting",
    }

    def run(self, command: str, config: ExperimentConfig) -> Dict[str, Any]:
        """Run one command; failures are logged and mapped to exit codes instead of raised."""
        if command not in self.COMMANDS:
            return self._result(command, [], {"error": f"unknown command {command!r}"}, EXIT_CONFIG)
        logger.info("🚀 Starting command", command=command, seed=config.noise.seed)
        try:
            return getattr(self, self.COMMANDS[command])(config)
        except ConfigValidationError as e:
            logger.error("❌ Invalid configuration", violations=e.violations)
            result = self._result(command, [], {"error": str(e), "violations": e.violations}, EXIT_CONFIG)
        except SolverError as e:
            logger.error("❌ Solver failure", error=str(e), residuals=e.residual_history[-5:], exc_info=True)
            result = self._result(command, [], {"error": str(e)}, EXIT_RUNTIME)
        except (MPMError, RuntimeError, OSError) as e:
            logger.error("❌ Command failed", command=command, error=str(e), exc_info=True)
            result = self._result(command, [], {"error": str(e)}, EXIT_RUNTIME)
        return result


def create_orchestrator(output_dir: Optional[str] = None, threads: Optional[int] = None) -> MonotonicityOrchestrator:
    """Create and configure the monotonicity imaging orchestrator."""
    return MonotonicityOrchestrator(output_dir=output_dir, threads=threads)
