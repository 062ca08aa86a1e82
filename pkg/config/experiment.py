"""
Experiment configuration schema.

A config file is deep-merged over ``config/experiment_defaults.json`` and
validated here; cross-module checks (contrast, admissibility, rim rules) are
done when the orchestrator builds the experiment.
"""
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator

from config import settings
from mpm.mpm_utils import ConfigValidationError, deep_merge, load_experiment_defaults


class MeshSpec(BaseModel):
    nx: int = Field(ge=1, description="Pixels along x")
    ny: int = Field(ge=1, description="Pixels along y")
    extent: Tuple[float, float] = Field(default=(1.0, 1.0), description="Domain width and height")


class BackgroundSpec(BaseModel):
    value: Union[float, List[float]] = Field(default=1.0, description="Constant or per-pixel linear background")


class RegionSpec(BaseModel):
    """Rectangle ``[i0, i1] x [j0, j1]`` or disc ``(cx, cy, r)`` in pixel coordinates."""
    shape: Literal["rect", "disc"]
    i0: Optional[float] = None
    j0: Optional[float] = None
    i1: Optional[float] = None
    j1: Optional[float] = None
    cx: Optional[float] = None
    cy: Optional[float] = None
    r: Optional[float] = None
    mode: Literal["add", "subtract"] = "add"


class LawSpec(BaseModel):
    name: str = Field(description="Builtin law: constant, affine, power, sigmoid, saturating, piecewise")
    params: Dict[str, float] = Field(default_factory=dict)
    kind: Optional[str] = Field(default=None, description="Declared class tag, e.g. bounded-nl")
    gamma_lo: Optional[float] = None
    gamma_hi: Optional[float] = None
    q: Optional[float] = None
    s0: Optional[float] = None
    kappa: Optional[float] = None


class AnomalySpec(BaseModel):
    regions: List[RegionSpec] = Field(default_factory=list, description="Empty means background only")
    law: Optional[LawSpec] = None
    contrast: Literal["high", "low"] = "high"
    limit: Literal["none", "infinite", "zero"] = "none"
    test_law: Optional[LawSpec] = Field(default=None, description="Bounds for test materials of pec/pei anomalies")


class ExcitationSpec(BaseModel):
    type: Literal["fourier", "depleting", "fourier+depleting", "coordinate"] = "fourier"
    axes: List[Literal["x", "y"]] = Field(default_factory=lambda: ["x"], description="Coordinate profiles")
    K: int = Field(default=settings.DEFAULT_FOURIER_ORDER, ge=1)
    n_max: int = Field(default=5, ge=1)
    target: Optional[List[RegionSpec]] = Field(default=None, description="Depleting target; defaults to the anomaly")


class NoiseSpec(BaseModel):
    eta1: float = Field(default=0.0, ge=0.0, lt=1.0)
    eta2: float = Field(default=0.0, ge=0.0)
    L: Optional[float] = Field(default=None, gt=0.0)
    seed: int = Field(default=0, ge=0)


class RegularizationSpec(BaseModel):
    eta1_star: Optional[float] = Field(default=None, ge=0.0, lt=1.0, description="Defaults to the noise eta1")
    eta2_star: Optional[float] = Field(default=None, ge=0.0, description="Defaults to the noise eta2")


class BlockFamilySpec(BaseModel):
    block: int = Field(default=settings.DEFAULT_TEST_BLOCK, ge=1)
    stride: int = Field(default=1, ge=1)


class SweepSpec(BaseModel):
    eta1: float = Field(default=0.2, ge=0.0, lt=1.0)
    eta2: float = Field(default=0.02, ge=0.0)
    steps: int = Field(default=7, description="Number of sweep levels")
    factor: float = Field(default=0.5, gt=0.0, lt=1.0)
    etas: Optional[List[Tuple[float, float]]] = Field(default=None, description="Explicit sequence; overrides the geometric one")

    def sequence(self) -> List[Tuple[float, float]]:
        if self.etas is not None:
            return [tuple(e) for e in self.etas]
        return [(self.eta1 * self.factor ** k, self.eta2 * self.factor ** k) for k in range(self.steps)]


class VerifySpec(BaseModel):
    fd_trials: int = Field(default=50, ge=0)
    oracle_trials: int = Field(default=10, ge=0)
    monotonicity_trials: int = Field(default=100, ge=0)
    chain_trials: int = Field(default=50, ge=0)
    mp_trials: int = Field(default=100, ge=0)
    nestedness_seeds: int = Field(default=100, ge=0)
    eta1: float = Field(default=0.05, ge=0.0, lt=1.0)
    eta2: float = Field(default=0.01, ge=0.0)
    mutation: Optional[Literal["flip_noise_sign"]] = None


class DepletingSpec(BaseModel):
    nx: int = Field(default=settings.DEFAULT_GRID_SIZE, ge=1)
    ny: int = Field(default=settings.DEFAULT_GRID_SIZE, ge=1)
    background: float = Field(default=1.0, gt=0.0)
    n_max: int = Field(default=5, description="Number of depleting potentials")
    target: List[RegionSpec] = Field(default_factory=list)


class SolverSpec(BaseModel):
    tol: float = Field(default=settings.SOLVER_TOL, gt=0.0)
    max_iter: int = Field(default=settings.SOLVER_MAX_ITER, ge=1)


class ExperimentConfig(BaseModel):
    mesh: MeshSpec
    background: BackgroundSpec = Field(default_factory=BackgroundSpec)
    anomaly: AnomalySpec = Field(default_factory=AnomalySpec)
    excitations: ExcitationSpec = Field(default_factory=ExcitationSpec)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    regularization: RegularizationSpec = Field(default_factory=RegularizationSpec)
    tests: BlockFamilySpec = Field(default_factory=BlockFamilySpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    verify: VerifySpec = Field(default_factory=VerifySpec)
    depleting: DepletingSpec = Field(default_factory=DepletingSpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)
    output_dir: str = settings.OUTPUT_DIR
    threads: int = Field(default=settings.THREADS, ge=0)

    @field_validator("output_dir")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("output_dir must not be empty")
        return value

    def eta_star(self) -> Tuple[float, float]:
        reg = self.regularization
        return (self.noise.eta1 if reg.eta1_star is None else reg.eta1_star,
                self.noise.eta2 if reg.eta2_star is None else reg.eta2_star)


REPLACED_KEYS = (("anomaly", "law"), ("anomaly", "test_law"))


def _format_errors(error: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in error.errors()]


def load_experiment_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Defaults, then the user file, then CLI overrides (dotted keys such as
    ``noise.seed``), validated into an ExperimentConfig.
    """
    document = load_experiment_defaults()
    if path:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigValidationError([f"config file {path}: {e}"]) from e
        if not isinstance(user, dict):
            raise ConfigValidationError([f"config file {path}: top level must be an object"])
        document = deep_merge(document, user)
        # a law given by the user replaces the default law instead of merging its params
        for section, key in REPLACED_KEYS:
            if key in (user.get(section) or {}):
                document[section][key] = user[section][key]
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = document
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigValidationError(_format_errors(e)) from e
