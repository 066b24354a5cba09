import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import solve_ivp

from .errors import (
    CoverageDomainError,
    IntegrationError,
    MarginalStabilityError,
    NoSaddleError,
    UnsupportedDimensionError
)

logger = logging.getLogger(__name__)

DOMAIN_TOL = 1e-12
RTOL = 1e-8
ATOL = 1e-10
RESIDUAL_TOL = 1e-10
MARGINAL_TOL = 1e-8


class Mechanism(str, Enum):
    NO = "no"
    CO = "co"

    @property
    def dimension(self) -> int:
        return 1 if self is Mechanism.NO else 2

    @property
    def coverage_columns(self) -> List[str]:
        return ['theta'] if self is Mechanism.NO else ['theta_a', 'theta_b']


class NOParams(BaseModel):
    """Rate constants of the NO reduction mechanism (all 1/time)."""
    model_config = ConfigDict(frozen=True, extra='forbid')

    alpha: float = Field(default=1.0, ge=0)
    gamma: float = Field(default=0.01, ge=0)
    k: float = Field(default=4.5, ge=0)

    @property
    def mechanism(self) -> Mechanism:
        return Mechanism.NO


class COParams(BaseModel):
    """Rate constants of the CO oxidation mechanism (all 1/time).

    A is adsorbed CO, B is adsorbed atomic oxygen.
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    alpha: float = Field(default=1.6, ge=0)
    beta: float = Field(default=3.5, ge=0)
    gamma: float = Field(default=0.04, ge=0)
    k_r: float = Field(default=1.0, ge=0)

    @property
    def mechanism(self) -> Mechanism:
        return Mechanism.CO


MechanismParams = Union[NOParams, COParams]


def params_for(mechanism: Mechanism, values: Optional[dict] = None) -> MechanismParams:
    """Build the parameter record of a mechanism, defaults filled in."""
    model = NOParams if Mechanism(mechanism) is Mechanism.NO else COParams
    return model(**(values or {}))


class Stability(str, Enum):
    STABLE = "stable"
    UNSTABLE = "unstable-node-or-focus"
    SADDLE = "saddle"
    MARGINAL = "marginal"


@dataclass(frozen=True)
class SteadyState:
    state: np.ndarray
    stability: Stability
    eigenvalues: np.ndarray  # real parts of the Jacobian spectrum

    @property
    def is_stable(self) -> bool:
        return self.stability is Stability.STABLE


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray  # (n_samples, dimension)

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def to_frame(self, mechanism: Mechanism) -> pd.DataFrame:
        frame = pd.DataFrame(self.states, columns=Mechanism(mechanism).coverage_columns)
        frame.insert(0, 't', self.t)
        return frame


def check_coverage(x, mechanism: Mechanism, tol: float = DOMAIN_TOL) -> np.ndarray:
    """Validate a coverage vector against the unit simplex and return it as an array."""
    mechanism = Mechanism(mechanism)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (mechanism.dimension,):
        raise CoverageDomainError(
            f"{mechanism.value} coverage must have {mechanism.dimension} component(s), got shape {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise CoverageDomainError(f"Coverage {x} is not finite")
    if np.any(x < -tol) or np.any(x > 1 + tol) or x.sum() > 1 + tol:
        raise CoverageDomainError(f"Coverage {x} outside the unit simplex")
    return x


def clip_to_simplex(states: np.ndarray) -> np.ndarray:
    """Remove integrator-level overshoot past the simplex faces."""
    clipped = np.clip(states, 0.0, 1.0)
    total = clipped.sum(axis=-1, keepdims=True)
    return np.where(total > 1.0, clipped / np.maximum(total, 1.0), clipped)


# Raw vector fields: no domain checks, safe to evaluate at integrator stages.

def _no_field(theta, p: NOParams):
    return p.alpha * (1 - theta) - p.gamma * theta - p.k * (1 - theta) ** 2 * theta


def _co_field(a, b, p: COParams):
    vacant = 1 - a - b
    reaction = 4 * p.k_r * a * b
    return (
        p.alpha * vacant - p.gamma * a - reaction,
        2 * p.beta * vacant ** 2 - reaction
    )


def rhs_no(theta: float, p: NOParams) -> float:
    """dθ/dt of the NO reduction model."""
    theta = float(check_coverage(theta, Mechanism.NO)[0])
    return float(_no_field(theta, p))


def rhs_co(state, p: COParams) -> np.ndarray:
    """(dθ_A/dt, dθ_B/dt) of the CO oxidation model."""
    a, b = check_coverage(state, Mechanism.CO)
    return np.array(_co_field(a, b, p), dtype=float)


def rhs(state, params: MechanismParams) -> np.ndarray:
    if isinstance(params, NOParams):
        return np.array([rhs_no(np.atleast_1d(state)[0], params)])
    return rhs_co(state, params)


def jacobian_no(theta: float, p: NOParams) -> np.ndarray:
    return np.array([[-p.alpha - p.gamma - p.k * (1 - theta) * (1 - 3 * theta)]])


def jacobian_co(state, p: COParams) -> np.ndarray:
    a, b = np.asarray(state, dtype=float)
    vacant = 1 - a - b
    return np.array([
        [-p.alpha - p.gamma - 4 * p.k_r * b, -p.alpha - 4 * p.k_r * a],
        [-4 * p.beta * vacant - 4 * p.k_r * b, -4 * p.beta * vacant - 4 * p.k_r * a]
    ])


def jacobian(state, params: MechanismParams) -> np.ndarray:
    if isinstance(params, NOParams):
        return jacobian_no(float(np.atleast_1d(state)[0]), params)
    return jacobian_co(state, params)


def vector_field(params: MechanismParams, reverse: bool = False) -> Callable:
    """solve_ivp-compatible right-hand side, optionally time-reversed."""
    sign = -1.0 if reverse else 1.0
    if isinstance(params, NOParams):
        def field_no(t, y):
            return np.array([sign * _no_field(y[0], params)])
        return field_no

    def field_co(t, y):
        da, db = _co_field(y[0], y[1], params)
        return np.array([sign * da, sign * db])
    return field_co


def integrate(
    params: MechanismParams,
    x0,
    t_span: float,
    t_eval: Optional[Sequence[float]] = None,
    t0: float = 0.0
) -> Trajectory:
    """Integrate the mean-field model from x0 over [t0, t0 + t_span].

    Dormand-Prince RK45 with rtol 1e-8 and atol 1e-10. When t_eval is given
    the trajectory is sampled there (both endpoints always included);
    otherwise every accepted step is returned.
    """
    x0 = check_coverage(x0, params.mechanism)
    if t_span < 0:
        raise ValueError(f"t_span must be nonnegative, got {t_span}")
    if t_span == 0:
        return Trajectory(t=np.array([t0]), states=x0[None, :].copy())

    t_end = t0 + t_span
    samples = None
    if t_eval is not None:
        inner = np.asarray(t_eval, dtype=float)
        inner = inner[(inner > t0) & (inner < t_end)]
        samples = np.unique(np.concatenate([[t0], inner, [t_end]]))

    sol = solve_ivp(
        vector_field(params),
        (t0, t_end),
        x0,
        method='RK45',
        t_eval=samples,
        rtol=RTOL,
        atol=ATOL
    )
    if sol.status < 0:
        logger.error(f"Mean-field integration failed: {sol.message}")
        raise IntegrationError(sol.message)

    states = clip_to_simplex(sol.y.T)
    t = sol.t.copy()
    t[-1] = t_end
    return Trajectory(t=t, states=states)


def classify_stability(real_parts: np.ndarray, tol: float = MARGINAL_TOL) -> Stability:
    real_parts = np.asarray(real_parts, dtype=float)
    if np.any(np.abs(real_parts) <= tol):
        return Stability.MARGINAL
    if np.all(real_parts < 0):
        return Stability.STABLE
    if np.all(real_parts > 0):
        return Stability.UNSTABLE
    return Stability.SADDLE


def _steady_state(state: np.ndarray, params: MechanismParams) -> SteadyState:
    eigenvalues = np.sort(np.linalg.eigvals(jacobian(state, params)).real)
    return SteadyState(
        state=np.asarray(state, dtype=float),
        stability=classify_stability(eigenvalues),
        eigenvalues=eigenvalues
    )


def _no_roots(p: NOParams) -> List[float]:
    # k θ³ - 2k θ² + (k + α + γ) θ - α = 0; the roots sum to 2 whenever k > 0
    if p.k == 0:
        if p.alpha + p.gamma == 0:
            logger.warning("NO model with all rates zero: every coverage is stationary")
            return []
        return [p.alpha / (p.alpha + p.gamma)]

    coefficients = [p.k, -2 * p.k, p.k + p.alpha + p.gamma, -p.alpha]
    roots = []
    for root in np.roots(coefficients):
        if abs(root.imag) > 1e-7 * max(1.0, abs(root)):
            continue
        theta = root.real
        for _ in range(20):
            value = np.polyval(coefficients, theta)
            slope = np.polyval(np.polyder(coefficients), theta)
            if slope == 0 or abs(value) < 1e-16:
                break
            theta -= value / slope
        if -DOMAIN_TOL <= theta <= 1 + DOMAIN_TOL:
            roots.append(min(max(theta, 0.0), 1.0))
    return roots


def _co_newton(
    seeds: np.ndarray,
    p: COParams,
    known: List[np.ndarray],
    max_iter: int = 100,
    tol: float = 1e-12
) -> np.ndarray:
    """Vectorized (optionally deflated) Newton from every seed; returns converged points.

    Deflation uses M(x) = Π (1/|x - r|² + 1) over the known roots r. The
    Newton step of M·F only needs J_F + F ⊗ ∇log M, so M itself never
    has to be formed.
    """
    x = seeds.astype(float).copy()
    active = np.ones(len(x), dtype=bool)
    converged = np.zeros(len(x), dtype=bool)

    with np.errstate(all='ignore'):
        for _ in range(max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            a, b = x[idx, 0], x[idx, 1]
            f_a, f_b = _co_field(a, b, p)
            vacant = 1 - a - b
            j00 = -p.alpha - p.gamma - 4 * p.k_r * b
            j01 = -p.alpha - 4 * p.k_r * a
            j10 = -4 * p.beta * vacant - 4 * p.k_r * b
            j11 = -4 * p.beta * vacant - 4 * p.k_r * a

            if known:
                g_a = np.zeros_like(a)
                g_b = np.zeros_like(b)
                for root in known:
                    d_a, d_b = a - root[0], b - root[1]
                    dist2 = d_a ** 2 + d_b ** 2
                    weight = (-2.0 / dist2 ** 2) / (1.0 / dist2 + 1.0)
                    g_a += weight * d_a
                    g_b += weight * d_b
                j00 = j00 + f_a * g_a
                j01 = j01 + f_a * g_b
                j10 = j10 + f_b * g_a
                j11 = j11 + f_b * g_b

            det = j00 * j11 - j01 * j10
            step_a = -(j11 * f_a - j01 * f_b) / det
            step_b = -(-j10 * f_a + j00 * f_b) / det
            usable = (np.abs(det) > 1e-14) & np.isfinite(step_a) & np.isfinite(step_b)

            x[idx[usable], 0] += step_a[usable]
            x[idx[usable], 1] += step_b[usable]

            step_norm = np.hypot(step_a, step_b)
            done = usable & (step_norm < tol)
            lost = ~usable | np.any(np.abs(x[idx]) > 10, axis=1)
            converged[idx[done]] = True
            active[idx[done | lost]] = False

    return x[converged]


def _co_roots(p: COParams, include_boundary: bool) -> List[np.ndarray]:
    grid = np.linspace(0.0, 1.0, 21)
    seeds = np.array([(a, b) for a in grid for b in grid if a + b <= 1.0 + 1e-12])

    found: List[np.ndarray] = []

    def absorb(candidates: np.ndarray) -> int:
        added = 0
        for candidate in candidates:
            residual = np.hypot(*_co_field(candidate[0], candidate[1], p))
            if not residual < RESIDUAL_TOL:
                continue
            if any(np.linalg.norm(candidate - root) < 1e-8 for root in found):
                continue
            found.append(candidate.copy())
            added += 1
        return added

    absorb(_co_newton(seeds, p, known=[]))
    for _ in range(3):
        if not absorb(_co_newton(seeds, p, known=list(found))):
            break

    roots = []
    for root in found:
        a, b = root
        if a < -DOMAIN_TOL or b < -DOMAIN_TOL or a + b > 1 + DOMAIN_TOL:
            continue
        if not include_boundary and 1 - a - b < 1e-9:
            continue
        roots.append(clip_to_simplex(root))
    return roots


def find_steady_states(params: MechanismParams, include_boundary: bool = False) -> List[SteadyState]:
    """All steady states in the unit simplex, sorted by the first coverage component.

    For CO the zero-vacancy edge (fully poisoned, absorbing surface) is
    skipped unless include_boundary is set.
    """
    if isinstance(params, NOParams):
        states = [np.array([theta]) for theta in _no_roots(params)]
    else:
        states = _co_roots(params, include_boundary)

    result = [_steady_state(state, params) for state in states]
    result.sort(key=lambda s: s.state[0])

    deduplicated: List[SteadyState] = []
    for steady in result:
        if deduplicated and np.linalg.norm(steady.state - deduplicated[-1].state) < 1e-12:
            continue
        deduplicated.append(steady)
    return deduplicated


@dataclass
class BifurcationTable:
    param_name: str
    values: np.ndarray
    rows: List[List[SteadyState]]
    folds: List[Tuple[float, float]] = field(default_factory=list)

    def branch_counts(self) -> np.ndarray:
        return np.array([len(row) for row in self.rows])

    def to_frame(self, mechanism: Mechanism) -> pd.DataFrame:
        columns = Mechanism(mechanism).coverage_columns
        records = []
        for value, row in zip(self.values, self.rows):
            for branch, steady in enumerate(row):
                record = {self.param_name: value, 'branch': branch}
                record.update(zip(columns, steady.state))
                record['stability'] = steady.stability.value
                records.append(record)
        return pd.DataFrame.from_records(
            records,
            columns=[self.param_name, 'branch'] + columns + ['stability']
        )


def bifurcation_scan(
    params: MechanismParams,
    param_name: str,
    value_range: Tuple[float, float],
    resolution: int
) -> BifurcationTable:
    """Steady states with stability over a uniform grid of one rate constant.

    Fold points are bracketed by consecutive grid values where the number
    of branches changes.
    """
    lo, hi = float(value_range[0]), float(value_range[1])
    if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
        raise ValueError(f"Invalid scan range [{lo}, {hi}]")
    if param_name not in type(params).model_fields:
        raise ValueError(f"{type(params).__name__} has no parameter '{param_name}'")
    if resolution < 2 and lo != hi:
        raise ValueError("resolution must be at least 2 for a non-degenerate range")

    values = np.linspace(lo, hi, max(int(resolution), 1)) if lo != hi else np.array([lo])
    rows = [
        find_steady_states(params.model_copy(update={param_name: float(value)}))
        for value in values
    ]

    table = BifurcationTable(param_name=param_name, values=values, rows=rows)
    counts = table.branch_counts()
    for i in np.flatnonzero(np.diff(counts) != 0):
        table.folds.append((float(values[i]), float(values[i + 1])))
    logger.info(
        f"Scanned {param_name} over [{lo}, {hi}] at {len(values)} points, "
        f"{len(table.folds)} fold bracket(s)"
    )
    return table


@dataclass
class Separatrix:
    """Stable manifold of the saddle, as a polyline through the saddle."""

    points: np.ndarray  # (n, 2), ordered along the manifold
    saddle: SteadyState
    attractors: List[SteadyState]
    stable_direction: np.ndarray
    unstable_direction: np.ndarray

    def side(self, x) -> int:
        """+1 or -1 depending on which side of the polyline x lies."""
        x = np.asarray(x, dtype=float)
        starts = self.points[:-1]
        segments = self.points[1:] - starts
        lengths2 = np.einsum('ij,ij->i', segments, segments)
        lengths2 = np.where(lengths2 > 0, lengths2, 1.0)
        u = np.clip(np.einsum('ij,ij->i', x - starts, segments) / lengths2, 0.0, 1.0)
        nearest = starts + u[:, None] * segments
        i = int(np.argmin(np.linalg.norm(nearest - x, axis=1)))
        offset = x - starts[i]
        cross = segments[i, 0] * offset[1] - segments[i, 1] * offset[0]
        return 1 if cross >= 0 else -1

    def distance(self, x) -> float:
        x = np.asarray(x, dtype=float)
        starts = self.points[:-1]
        segments = self.points[1:] - starts
        lengths2 = np.einsum('ij,ij->i', segments, segments)
        lengths2 = np.where(lengths2 > 0, lengths2, 1.0)
        u = np.clip(np.einsum('ij,ij->i', x - starts, segments) / lengths2, 0.0, 1.0)
        nearest = starts + u[:, None] * segments
        return float(np.min(np.linalg.norm(nearest - x, axis=1)))

    def basin_of(self, x) -> SteadyState:
        """The attractor lying on the same side of the separatrix as x."""
        side = self.side(x)
        for attractor in self.attractors:
            if self.side(attractor.state) == side:
                return attractor
        raise NoSaddleError("Both attractors lie on the same side of the separatrix")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.points, columns=Mechanism.CO.coverage_columns)


def _exit_events():
    def below_a(t, y):
        return y[0]

    def below_b(t, y):
        return y[1]

    def above_sum(t, y):
        return 1.0 - y[0] - y[1]

    events = [below_a, below_b, above_sum]
    for event in events:
        event.terminal = True
        event.direction = -1
    return events


def _truncate_arc(points: np.ndarray, max_arc: float) -> np.ndarray:
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])
    return points[arc <= max_arc]


def trace_separatrix(
    params: COParams,
    delta: float = 1e-6,
    max_arc: float = 10.0,
    max_time: float = 200.0
) -> Separatrix:
    """Shoot the saddle's stable manifold backwards in time, both branches.

    Each branch starts at saddle ± delta along the unit stable eigenvector
    and integrates the reversed field until it leaves the unit simplex or
    its arc length exceeds max_arc.
    """
    if not isinstance(params, COParams):
        raise UnsupportedDimensionError("A separatrix is only defined for the 2-D CO model")

    states = find_steady_states(params)
    if any(s.stability is Stability.MARGINAL for s in states):
        raise MarginalStabilityError(
            f"Marginal steady state at beta={params.beta}; separatrix undefined near a fold"
        )
    saddles = [s for s in states if s.stability is Stability.SADDLE]
    if len(states) < 3 or not saddles:
        raise NoSaddleError(
            f"No saddle steady state at beta={params.beta} ({len(states)} steady state(s))"
        )
    saddle = saddles[0]
    attractors = [s for s in states if s.is_stable]

    eigenvalues, eigenvectors = np.linalg.eig(jacobian_co(saddle.state, params))
    order = np.argsort(eigenvalues.real)
    stable = eigenvectors[:, order[0]].real
    unstable = eigenvectors[:, order[-1]].real
    stable /= np.linalg.norm(stable)
    unstable /= np.linalg.norm(unstable)

    branches = []
    for sign in (1.0, -1.0):
        sol = solve_ivp(
            vector_field(params, reverse=True),
            (0.0, max_time),
            saddle.state + sign * delta * stable,
            method='RK45',
            events=_exit_events(),
            rtol=RTOL,
            atol=ATOL,
            max_step=0.01
        )
        if sol.status < 0:
            raise IntegrationError(sol.message)
        branch = np.vstack([saddle.state[None, :], sol.y.T])
        branches.append(_truncate_arc(branch, max_arc))

    points = np.vstack([branches[1][::-1], branches[0][1:]])
    logger.debug(f"Separatrix traced with {len(points)} points at beta={params.beta}")
    return Separatrix(
        points=points,
        saddle=saddle,
        attractors=attractors,
        stable_direction=stable,
        unstable_direction=unstable
    )
