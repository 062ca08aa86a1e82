"""
Nonlinear material laws, their admissibility checks, the primitive energy
density Q(s) = int_0^s gamma(eta) eta d(eta), and spatial material assignments
(anomaly, test, and limit materials).
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Union

import numpy as np
import structlog
from pydantic import BaseModel, Field
from scipy import integrate, special

from config import settings
from mpm.geometry import CellRegion
from mpm.mpm_utils import MaterialError

logger = structlog.get_logger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]


class LawKind(str, Enum):
    LINEAR = "linear-constant"
    BOUNDED = "bounded-nl"      # (B1)
    GROWTH = "growth-nl"        # (B2)
    VANISHING = "vanishing-nl"  # (B3)
    PEC = "pec"
    PEI = "pei"


class ContrastCase(str, Enum):
    HIGH = "high"
    LOW = "low"


class MaterialLimit(str, Enum):
    NONE = "none"
    INFINITE = "infinite"
    ZERO = "zero"


@dataclass(frozen=True, eq=False)
class MaterialLaw:
    """
    A scalar law gamma(s) >= 0 for s = |grad u| >= 0, tagged with its class.

    ``derivative`` and ``primitive`` are optional; without a derivative the
    Newton solver uses a symmetric secant, without a primitive Q falls back to
    adaptive quadrature.
    """

    kind: LawKind
    name: str
    gamma: Optional[ArrayFn] = None
    derivative: Optional[ArrayFn] = None
    primitive: Optional[ArrayFn] = None
    gamma_lo: Optional[float] = None
    gamma_hi: Optional[float] = None
    q: Optional[float] = None
    s0: Optional[float] = None
    kappa: Optional[float] = None
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def is_limit(self) -> bool:
        return self.kind in (LawKind.PEC, LawKind.PEI)

    @property
    def is_linear(self) -> bool:
        return self.kind == LawKind.LINEAR

    def _require_evaluator(self) -> ArrayFn:
        if self.gamma is None:
            raise MaterialError(f"law {self.name!r} ({self.kind.value}) has no evaluator")
        return self.gamma

    def evaluate(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.asarray(self._require_evaluator()(s), dtype=float) * np.ones_like(s)

    def flux(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return self.evaluate(s) * s

    def slope(self, s) -> np.ndarray:
        """d(gamma)/ds, or a symmetric secant where no derivative is supplied."""
        s = np.asarray(s, dtype=float)
        if self.derivative is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.asarray(self.derivative(s), dtype=float) * np.ones_like(s)
        h = 1e-6 * np.maximum(s, 1.0)
        lo = np.maximum(s - h, 0.0)
        return (self.evaluate(s + h) - self.evaluate(lo)) / (s + h - lo)

    def energy_density(self, s) -> np.ndarray:
        return q_primitive(self, s)


def q_primitive(law: MaterialLaw, s) -> np.ndarray:
    """Q(s) = int_0^s gamma(eta) eta d(eta); exact when a closed form exists."""
    if law.is_limit:
        raise MaterialError(f"{law.kind.value} laws have no finite energy density")
    s = np.asarray(s, dtype=float)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise MaterialError("Q is defined for finite s >= 0 only")
    if law.primitive is not None:
        return np.asarray(law.primitive(s), dtype=float) * np.ones_like(s)

    gamma = law._require_evaluator()
    flat = s.ravel()
    values = np.zeros_like(flat)
    unique, inverse = np.unique(flat, return_inverse=True)
    integrals = np.array([
        integrate.quad(lambda eta: float(gamma(np.asarray(eta))) * eta, 0.0, upper,
                       epsabs=settings.QUAD_TOL, epsrel=1e-12, limit=200)[0] if upper > 0 else 0.0
        for upper in unique
    ])
    values[:] = integrals[inverse]
    return values.reshape(s.shape)


# ---------------------------------------------------------------------------
# Builtin laws
# ---------------------------------------------------------------------------

def constant_law(value: float, kind: LawKind = LawKind.LINEAR) -> MaterialLaw:
    if not value > 0:
        raise MaterialError(f"constant law needs a positive value, got {value}")
    return MaterialLaw(
        kind=kind,
        name="constant",
        gamma=lambda s: np.full_like(s, value, dtype=float),
        derivative=lambda s: np.zeros_like(s, dtype=float),
        primitive=lambda s: 0.5 * value * s ** 2,
        gamma_lo=value,
        gamma_hi=value,
        params={"c": value},
    )


def affine_law(a: float, b: float, kind: LawKind = LawKind.GROWTH, gamma_lo: float = None,
               gamma_hi: float = None, q: float = 3.0, s0: float = 1.0, kappa: float = None) -> MaterialLaw:
    """gamma(s) = a + b*s."""
    return MaterialLaw(
        kind=kind,
        name="affine",
        gamma=lambda s: a + b * s,
        derivative=lambda s: np.full_like(s, b, dtype=float),
        primitive=lambda s: 0.5 * a * s ** 2 + b * s ** 3 / 3.0,
        gamma_lo=a if gamma_lo is None else gamma_lo,
        gamma_hi=max(a, b * s0) if gamma_hi is None else gamma_hi,
        q=q,
        s0=s0,
        kappa=kappa,
        params={"a": a, "b": b},
    )


def power_law(c: float, s0: float, q: float, a: float = 0.0, kind: LawKind = LawKind.GROWTH,
              gamma_lo: float = None, gamma_hi: float = None, kappa: float = None) -> MaterialLaw:
    """gamma(s) = a + c*(s/s0)^(q-2)."""
    if q <= 1 or s0 <= 0:
        raise MaterialError(f"power law needs q > 1 and s0 > 0, got q={q}, s0={s0}")

    def gamma(s):
        return a + c * (s / s0) ** (q - 2)

    def derivative(s):
        if q == 2:
            return np.zeros_like(s, dtype=float)
        return np.where(s > 0, c * (q - 2) / s0 * (s / s0) ** (q - 3), 0.0 if q > 3 else np.inf)

    def primitive(s):
        return 0.5 * a * s ** 2 + c * s0 ** (2 - q) * s ** q / q

    return MaterialLaw(
        kind=kind,
        name="power",
        gamma=gamma,
        derivative=derivative,
        primitive=primitive,
        gamma_lo=(a if a > 0 else None) if gamma_lo is None else gamma_lo,
        gamma_hi=(max(a, c) if q >= 2 else c) if gamma_hi is None else gamma_hi,
        q=q,
        s0=s0,
        kappa=kappa,
        params={"a": a, "c": c},
    )


def _x_tanh_integral(x: np.ndarray) -> np.ndarray:
    # int_0^x t tanh(t) dt = x^2/2 + x ln(1 + e^{-2x}) - Li2(-e^{-2x})/2 - pi^2/24
    e = np.exp(-2.0 * x)
    return 0.5 * x ** 2 + x * np.log1p(e) - 0.5 * special.spence(1.0 + e) - np.pi ** 2 / 24.0


def sigmoid_law(a: float, b: float, s0: float, kind: LawKind = LawKind.BOUNDED, gamma_lo: float = None,
                gamma_hi: float = None, kappa: float = None) -> MaterialLaw:
    """gamma(s) = a + b*tanh(s/s0)."""
    if s0 <= 0:
        raise MaterialError(f"sigmoid law needs s0 > 0, got {s0}")
    return MaterialLaw(
        kind=kind,
        name="sigmoid",
        gamma=lambda s: a + b * np.tanh(s / s0),
        derivative=lambda s: b / s0 / np.cosh(s / s0) ** 2,
        primitive=lambda s: 0.5 * a * s ** 2 + b * s0 ** 2 * _x_tanh_integral(s / s0),
        gamma_lo=min(a, a + b) if gamma_lo is None else gamma_lo,
        gamma_hi=max(a, a + b) if gamma_hi is None else gamma_hi,
        q=2.0,
        s0=s0,
        kappa=kappa,
        params={"a": a, "b": b},
    )


def saturating_law(a: float, b: float, s0: float, q: float = 4.0, kind: LawKind = LawKind.VANISHING,
                   gamma_lo: float = None, gamma_hi: float = None, kappa: float = None) -> MaterialLaw:
    """gamma(s) = a + b*r/(1 + r) with r = (s/s0)^(q-2); vanishes at s = 0 when a = 0."""
    if q < 2 or s0 <= 0:
        raise MaterialError(f"saturating law needs q >= 2 and s0 > 0, got q={q}, s0={s0}")

    def gamma(s):
        r = (s / s0) ** (q - 2)
        return a + b * r / (1.0 + r)

    def derivative(s):
        if q == 2:
            return np.zeros_like(s, dtype=float)
        r = (s / s0) ** (q - 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, b * (q - 2) * r / (s * (1.0 + r) ** 2), 0.0 if q > 3 else np.inf)

    primitive = None
    if q == 4:
        def primitive(s):
            return 0.5 * a * s ** 2 + 0.5 * b * (s ** 2 - s0 ** 2 * np.log1p((s / s0) ** 2))
    elif q == 2:
        def primitive(s):
            return 0.25 * (2 * a + b) * s ** 2

    return MaterialLaw(
        kind=kind,
        name="saturating",
        gamma=gamma,
        derivative=derivative,
        primitive=primitive,
        gamma_lo=gamma_lo,
        gamma_hi=(a + b) if gamma_hi is None else gamma_hi,
        q=q,
        s0=s0,
        kappa=kappa,
        params={"a": a, "b": b},
    )


def piecewise_law(a: float, b: float, s0: float, kind: LawKind = LawKind.GROWTH, gamma_lo: float = None,
                  gamma_hi: float = None, kappa: float = None) -> MaterialLaw:
    """gamma(s) = a for s <= s0 and a + b*(s - s0) above; kinked, so no derivative is supplied."""

    def primitive(s):
        excess = np.maximum(s - s0, 0.0)
        return 0.5 * a * s ** 2 + b * (excess ** 2 * (2 * excess + 3 * s0)) / 6.0

    return MaterialLaw(
        kind=kind,
        name="piecewise",
        gamma=lambda s: a + b * np.maximum(s - s0, 0.0),
        derivative=None,
        primitive=primitive,
        gamma_lo=a if gamma_lo is None else gamma_lo,
        gamma_hi=max(a, b * s0) if gamma_hi is None else gamma_hi,
        q=3.0,
        s0=s0,
        kappa=kappa,
        params={"a": a, "b": b},
    )


def custom_law(gamma: ArrayFn, kind: LawKind, name: str = "custom", derivative: ArrayFn = None,
               primitive: ArrayFn = None, gamma_lo: float = None, gamma_hi: float = None,
               q: float = None, s0: float = None, kappa: float = None) -> MaterialLaw:
    return MaterialLaw(kind=kind, name=name, gamma=gamma, derivative=derivative, primitive=primitive,
                       gamma_lo=gamma_lo, gamma_hi=gamma_hi, q=q, s0=s0, kappa=kappa)


def pec_law() -> MaterialLaw:
    return MaterialLaw(kind=LawKind.PEC, name="pec")


def pei_law() -> MaterialLaw:
    return MaterialLaw(kind=LawKind.PEI, name="pei")


def scaled_law(law: MaterialLaw, factor: float) -> MaterialLaw:
    """Pointwise multiple ``factor * gamma``; keeps the class and scales the bounds."""
    if not factor > 0:
        raise MaterialError(f"scale factor must be positive, got {factor}")
    base = law._require_evaluator()

    def scale(value):
        return None if value is None else factor * value

    return replace(
        law,
        name=f"{law.name}*{factor:g}",
        gamma=lambda s: factor * base(s),
        derivative=None if law.derivative is None else (lambda s: factor * law.derivative(s)),
        primitive=None if law.primitive is None else (lambda s: factor * law.primitive(s)),
        gamma_lo=scale(law.gamma_lo),
        gamma_hi=scale(law.gamma_hi),
        kappa=scale(law.kappa),
    )


BUILTIN_LAWS: Dict[str, Callable[..., MaterialLaw]] = {
    "constant": lambda c, **kw: constant_law(c, **kw),
    "affine": affine_law,
    "power": power_law,
    "sigmoid": sigmoid_law,
    "saturating": saturating_law,
    "piecewise": piecewise_law,
}


def law_from_spec(spec: Mapping[str, Any]) -> MaterialLaw:
    """Build a law from a config mapping ``{name, params, kind, gamma_lo, gamma_hi, q, s0, kappa}``."""
    name = spec.get("name")
    if name not in BUILTIN_LAWS:
        raise MaterialError(f"unknown law {name!r}; expected one of {sorted(BUILTIN_LAWS)}")
    kwargs = dict(spec.get("params") or {})
    if spec.get("kind") is not None:
        kwargs["kind"] = LawKind(spec["kind"])
    for key in ("gamma_lo", "gamma_hi", "kappa"):
        if spec.get(key) is not None and name != "constant":
            kwargs[key] = spec[key]
    for key in ("q", "s0"):
        if spec.get(key) is not None and key not in kwargs and name in ("power", "saturating", "affine"):
            kwargs[key] = spec[key]
    if name in ("sigmoid", "piecewise") and spec.get("s0") is not None:
        kwargs.setdefault("s0", spec["s0"])
    try:
        return BUILTIN_LAWS[name](**kwargs)
    except TypeError as e:
        raise MaterialError(f"bad parameters for law {name!r}: {e}") from e


# ---------------------------------------------------------------------------
# Admissibility
# ---------------------------------------------------------------------------

class Violation(BaseModel):
    """A violated assumption clause with the witnessing sample."""
    clause: str = Field(description="Assumption clause, e.g. 'A2' or 'B1 upper'")
    s: float = Field(description="Witnessing sample of |grad u|")
    value: float = Field(description="Offending value at the witness")
    detail: str = Field(default="", description="Human readable explanation")


class AdmissibilityReport(BaseModel):
    """Sampled admissibility check of a law against its declared class."""
    law: str
    kind: str
    s_max: float
    n_samples: int
    violations: List[Violation] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def clauses(self) -> List[str]:
        return sorted({v.clause for v in self.violations})


def _first_failure(mask: np.ndarray) -> Optional[int]:
    idx = np.flatnonzero(mask)
    return int(idx[0]) if idx.size else None


def check_admissibility(law: MaterialLaw, s_max: float, n_samples: int) -> AdmissibilityReport:
    """
    Dense-sampling check of (A2), the declared (B) class bounds and, when a
    kappa is declared, the (C) strong monotonicity on collinear pairs.
    """
    if n_samples < 2:
        raise MaterialError(f"n_samples must be >= 2, got {n_samples}")
    report = AdmissibilityReport(law=law.name, kind=law.kind.value, s_max=float(s_max), n_samples=n_samples)
    if law.is_limit:
        report.notes.append("pec/pei laws carry no evaluator; nothing to sample")
        return report

    s = s_max * np.arange(1, n_samples + 1) / n_samples
    g = law.evaluate(s)

    def flag(clause, mask, values, detail):
        k = _first_failure(mask)
        if k is not None:
            report.violations.append(Violation(clause=clause, s=float(s[k]), value=float(values[k]), detail=detail))

    flag("A1", ~np.isfinite(g) | (g < 0), g, "gamma must be finite and non-negative")
    flux = g * s
    step = np.diff(flux)
    k = _first_failure(~(step > 0))
    if k is not None:
        report.violations.append(Violation(clause="A2", s=float(s[k + 1]), value=float(flux[k + 1]),
                                           detail="s -> gamma(s)*s is not strictly increasing"))

    def slack(bound):
        return 1e-12 * np.maximum(1.0, np.abs(bound))

    lo, hi, q, s0 = law.gamma_lo, law.gamma_hi, law.q, law.s0
    if law.kind == LawKind.LINEAR or law.kind == LawKind.BOUNDED:
        clause = "B1"
        if lo is None or hi is None or not 0 < lo <= hi:
            report.violations.append(Violation(clause=clause, s=0.0, value=float("nan"),
                                               detail="B1 needs declared 0 < gamma_lo <= gamma_hi"))
        else:
            flag("B1 lower", g < lo - slack(lo), g, f"gamma below gamma_lo={lo}")
            flag("B1 upper", g > hi + slack(hi), g, f"gamma above gamma_hi={hi}")
    elif law.kind == LawKind.GROWTH:
        if hi is None or q is None or s0 is None or q <= 1 or s0 <= 0:
            report.violations.append(Violation(clause="B2", s=0.0, value=float("nan"),
                                               detail="B2 needs declared gamma_hi, q > 1 and s0 > 0"))
        else:
            r = (s / s0) ** (q - 2)
            upper = hi * (1.0 + r) if q >= 2 else hi * r
            flag("B2 upper", g > upper + slack(upper), g, f"gamma above the q={q} growth bound")
            if lo is not None:
                flag("B2 lower", g < lo - slack(lo), g, f"gamma below gamma_lo={lo}")
            else:
                report.notes.append("gamma_lo not declared; B2 lower bound not checked")
    elif law.kind == LawKind.VANISHING:
        if hi is None or q is None or s0 is None or q < 2 or s0 <= 0:
            report.violations.append(Violation(clause="B3", s=0.0, value=float("nan"),
                                               detail="B3 needs declared gamma_hi, q >= 2 and s0 > 0"))
        else:
            flag("B3 upper", g > hi + slack(hi), g, f"gamma above gamma_hi={hi}")
            if lo is not None:
                lower = lo * (s / s0) ** (q - 2)
                flag("B3 lower", g < lower - slack(lower), g, f"gamma below the q={q} vanishing bound")
            else:
                report.notes.append("gamma_lo not declared; B3 lower bound not checked")

    if law.kappa is not None:
        _check_strong_monotonicity(law, s, flux, report)
    return report


def _check_strong_monotonicity(law: MaterialLaw, s: np.ndarray, flux: np.ndarray, report: AdmissibilityReport) -> None:
    clause = {LawKind.GROWTH: "C2", LawKind.VANISHING: "C3"}.get(law.kind, "C1")
    report.notes.append(f"{clause} checked on collinear vector pairs only (necessary, not sufficient)")
    q = law.q or 2.0
    s1 = np.concatenate([s[:-1], s[:-1]])
    s2 = np.concatenate([s[1:], -s[1:]])
    f1 = np.concatenate([flux[:-1], flux[:-1]])
    f2 = np.concatenate([flux[1:], -flux[1:]])
    lhs = (f2 - f1) * (s2 - s1)
    gap = np.abs(s2 - s1)
    if clause == "C1":
        rhs = law.kappa * gap ** 2
    elif clause == "C2" and q < 2:
        rhs = law.kappa * (1 + s1 ** 2 + s2 ** 2) ** ((q - 2) / 2) * gap ** 2
    else:
        rhs = law.kappa * gap ** q
    k = _first_failure(lhs < rhs * (1 - 1e-12))
    if k is not None:
        report.violations.append(Violation(clause=clause, s=float(abs(s2[k])), value=float(lhs[k]),
                                           detail=f"strong monotonicity with kappa={law.kappa} fails"))


# ---------------------------------------------------------------------------
# Assignments
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MaterialAssignment:
    """
    gamma(x, s): the linear background per pixel outside ``region``, ``law`` inside.

    ``limit`` routes the assignment to the perfectly conducting (infinite) or
    perfectly insulating (zero) solvers.
    """

    background: np.ndarray
    region: CellRegion
    law: MaterialLaw
    contrast: Optional[ContrastCase] = None
    limit: MaterialLimit = MaterialLimit.NONE
    label: str = ""

    @property
    def nx(self) -> int:
        return self.region.nx

    @property
    def ny(self) -> int:
        return self.region.ny

    @property
    def is_linear(self) -> bool:
        return self.limit == MaterialLimit.NONE and (self.law.is_linear or self.region.is_empty())

    def pixel_values(self) -> np.ndarray:
        """Per-pixel coefficients of a linear assignment."""
        if not self.is_linear:
            raise MaterialError("pixel values exist for linear assignments only")
        values = np.array(self.background, dtype=float)
        if not self.region.is_empty():
            values[self.region.mask] = self.law.params.get("c", values[self.region.mask])
        return values


def as_background(value: Union[float, np.ndarray, List[float]], nx: int, ny: int) -> np.ndarray:
    """Broadcast a scalar or per-pixel background to a validated frozen array."""
    values = np.broadcast_to(np.asarray(value, dtype=float), (nx * ny,)).copy() if np.ndim(value) == 0 \
        else np.asarray(value, dtype=float).ravel().copy()
    if values.size != nx * ny:
        raise MaterialError(f"background has {values.size} values, grid needs {nx * ny}")
    if not np.all(np.isfinite(values)) or values.min() <= 0:
        raise MaterialError("background must be finite and bounded below by a positive constant")
    values.setflags(write=False)
    return values


def contrast_violations(background: np.ndarray, law: MaterialLaw, case: ContrastCase,
                        region: Optional[CellRegion] = None) -> List[str]:
    """Violated contrast conditions against the background outside ``region`` (empty when admissible)."""
    background = np.asarray(background, dtype=float)
    if region is not None:
        background = background[~region.mask]
        if background.size == 0:
            return []
    case = ContrastCase(case)
    if case == ContrastCase.HIGH:
        if law.gamma_lo is None:
            return ["contrast (high): law declares no gamma_lo"]
        if not background.max() < law.gamma_lo:
            return [f"contrast (high): max background {background.max():g} must be < gamma_lo {law.gamma_lo:g}"]
    else:
        if law.gamma_hi is None:
            return ["contrast (low): law declares no gamma_hi"]
        if not law.gamma_hi < background.min():
            return [f"contrast (low): gamma_hi {law.gamma_hi:g} must be < min background {background.min():g}"]
    return []


def background_assignment(background, nx: int, ny: int) -> MaterialAssignment:
    bg = as_background(background, nx, ny)
    return MaterialAssignment(background=bg, region=CellRegion.empty(nx, ny),
                              law=constant_law(float(bg.min())), label="background")


def build_assignment(background, region: CellRegion, law: MaterialLaw, case: ContrastCase) -> MaterialAssignment:
    """Nonlinear anomaly ``law`` on ``region`` in a linear background."""
    if law.is_limit:
        raise MaterialError("use build_limit_material for pec/pei anomalies")
    bg = as_background(background, region.nx, region.ny)
    problems = contrast_violations(bg, law, case, region)
    if problems:
        raise MaterialError("; ".join(problems))
    return MaterialAssignment(background=bg, region=region, law=law, contrast=ContrastCase(case), label="anomaly")


def build_test_material(background, region: CellRegion, case: ContrastCase, law: MaterialLaw) -> MaterialAssignment:
    """Linear test material: background outside ``region``, gamma_lo (high) or gamma_hi (low) inside."""
    bg = as_background(background, region.nx, region.ny)
    problems = contrast_violations(bg, law, case)
    if problems:
        raise MaterialError("; ".join(problems))
    case = ContrastCase(case)
    value = law.gamma_lo if case == ContrastCase.HIGH else law.gamma_hi
    return MaterialAssignment(background=bg, region=region, law=constant_law(value), contrast=case, label="test")


def build_limit_material(background, region: CellRegion, limit: MaterialLimit) -> MaterialAssignment:
    """Perfectly conducting (infinite) or insulating (zero) anomaly on ``region``."""
    limit = MaterialLimit(limit)
    if limit == MaterialLimit.NONE:
        raise MaterialError("limit must be 'infinite' or 'zero'")
    if region.is_empty():
        return background_assignment(background, region.nx, region.ny)
    if region.touches_rim():
        raise MaterialError(f"{limit.value}-limit anomaly must not touch the domain rim")
    bg = as_background(background, region.nx, region.ny)
    law = pec_law() if limit == MaterialLimit.INFINITE else pei_law()
    return MaterialAssignment(background=bg, region=region, law=law, limit=limit, label=law.name)
