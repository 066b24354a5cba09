"""Noise-tolerant direct-search optimizers over decision vectors.

All three searches share SearchSpec in and SearchTrace out. The objective is
an opaque callable; the incumbent only ever moves to a strictly better value,
so best_f is non-increasing over the recorded iterations.
"""
import logging
import threading
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], float]

MAX_ITER_PER_SCALE = 100
MAX_BACKTRACKS = 4

# Nelder-Mead coefficients: reflection, expansion, contraction, shrink.
NM_ALPHA, NM_GAMMA, NM_RHO, NM_SIGMA = 1.0, 2.0, 0.5, 0.5


@dataclass
class SearchSpec:
    x0: np.ndarray
    objective: Objective
    scales: Sequence[float] = (1.0, 0.5, 0.25, 0.125)
    directions: Optional[np.ndarray] = None  # rows are search directions
    max_evals: int = 10_000

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float)).copy()
        self.scales = tuple(float(s) for s in self.scales)
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ValueError(f"scales must be strictly decreasing, got {self.scales}")
        if self.max_evals < 0:
            raise ValueError("max_evals must be nonnegative")
        if self.directions is not None:
            directions = np.atleast_2d(np.asarray(self.directions, dtype=float))
            if directions.shape[1] != self.x0.size or np.linalg.matrix_rank(directions) < self.x0.size:
                raise ValueError("directions must span the decision space")
            self.directions = directions

    def basis(self) -> np.ndarray:
        if self.directions is None:
            return np.eye(self.x0.size)
        return self.directions

    def restarted_from(self, x0, max_evals: Optional[int] = None) -> 'SearchSpec':
        return replace(self, x0=x0, max_evals=self.max_evals if max_evals is None else max_evals)


@dataclass
class IterationRecord:
    iteration: int
    scale: float
    best_f: float
    accepted_moves: int = 0
    pattern_moves: int = 0
    evals: int = 0
    event: str = ""


@dataclass
class SearchTrace:
    algorithm: str
    best_x: np.ndarray
    best_f: Optional[float] = None
    eval_count: int = 0
    iterations: List[IterationRecord] = field(default_factory=list)
    budget_exhausted: bool = False
    passes: int = 1
    cap_hit: bool = False

    def record(self, **kwargs) -> None:
        self.iterations.append(IterationRecord(iteration=len(self.iterations), **kwargs))

    def to_records(self) -> List[dict]:
        """One JSON-ready dict per iteration."""
        return [{'algorithm': self.algorithm, **asdict(it)} for it in self.iterations]

    def summary(self) -> dict:
        return {
            'algorithm': self.algorithm,
            'best_f': self.best_f,
            'best_x': self.best_x.tolist(),
            'eval_count': self.eval_count,
            'budget_exhausted': self.budget_exhausted,
            'passes': self.passes,
            'cap_hit': self.cap_hit
        }


class BudgetExhausted(Exception):
    pass


class CountingObjective:
    """Objective wrapper that enforces max_evals and remembers the best point seen."""

    def __init__(self, objective: Objective, max_evals: int):
        self.objective = objective
        self.max_evals = max_evals
        self.count = 0
        self.best_x: Optional[np.ndarray] = None
        self.best_f = np.inf
        self._lock = threading.Lock()

    @property
    def remaining(self) -> int:
        return self.max_evals - self.count

    def __call__(self, x: np.ndarray) -> float:
        with self._lock:
            if self.count >= self.max_evals:
                raise BudgetExhausted()
            self.count += 1
        value = float(self.objective(np.array(x, dtype=float)))
        with self._lock:
            if value < self.best_f:
                self.best_x, self.best_f = np.array(x, dtype=float), value
        return value


def _finish(trace: SearchTrace, f: CountingObjective) -> SearchTrace:
    # Points improved on mid-sweep before the budget ran out are kept.
    if f.best_x is not None and (trace.best_f is None or f.best_f < trace.best_f):
        trace.best_x, trace.best_f = f.best_x.copy(), f.best_f
    trace.eval_count = f.count
    if trace.budget_exhausted:
        logger.info(f"{trace.algorithm}: budget of {f.max_evals} evaluations exhausted")
    return trace


def _explore(f: CountingObjective, x: np.ndarray, fx: float, basis: np.ndarray, scale: float) -> Tuple[np.ndarray, float, int]:
    accepted = 0
    for v in basis:
        for sign in (1.0, -1.0):
            trial = x + sign * scale * v
            ft = f(trial)
            if ft < fx:
                x, fx = trial, ft
                accepted += 1
                break
    return x, fx, accepted


def _explore_speculative(
    f: CountingObjective,
    x: np.ndarray,
    fx: float,
    basis: np.ndarray,
    scale: float,
    executor: Executor
) -> Tuple[np.ndarray, float, int]:
    if f.remaining < 2 * len(basis):
        return _explore(f, x, fx, basis, scale)

    trials = [x + sign * scale * v for v in basis for sign in (1.0, -1.0)]
    values = np.array(list(executor.map(f, trials))).reshape(len(basis), 2)
    steps, best_single = [], (x, fx)
    for j, v in enumerate(basis):
        k = int(np.argmin(values[j]))
        if values[j, k] < fx:
            steps.append((1.0, -1.0)[k] * scale * v)
            if values[j, k] < best_single[1]:
                best_single = (trials[2 * j + k], values[j, k])
    if not steps:
        return x, fx, 0
    if len(steps) == 1:
        return best_single[0], best_single[1], 1
    composite = x + np.sum(steps, axis=0)
    fc = f(composite)
    if fc < best_single[1]:
        return composite, fc, len(steps)
    return best_single[0], best_single[1], 1


def hooke_jeeves(spec: SearchSpec, speculative: bool = False, executor: Optional[Executor] = None) -> SearchTrace:
    """Hooke-Jeeves pattern search over the scale ladder.

    Exploratory trial points x +/- s v_j are compared against the current
    incumbent. A sweep with no accepted trial point moves to the next scale;
    otherwise the pattern point x_0 + 2 d is tried and kept only if it
    beats the sweep result. With speculative=True the 2n trial points of a sweep
    are evaluated together through `executor`, which changes the visit
    order.
    """
    if speculative and executor is None:
        raise ValueError("speculative mode needs an executor")
    f = CountingObjective(spec.objective, spec.max_evals)
    basis = spec.basis()
    x0 = spec.x0.copy()
    trace = SearchTrace(algorithm='hooke_jeeves', best_x=x0.copy())
    try:
        f0 = f(x0)
        trace.best_f = f0
        level = 0
        while level < len(spec.scales):
            scale = spec.scales[level]
            if speculative:
                xs, fs, accepted = _explore_speculative(f, x0, f0, basis, scale, executor)
            else:
                xs, fs, accepted = _explore(f, x0, f0, basis, scale)
            if accepted == 0:
                trace.record(scale=scale, best_f=f0, evals=f.count, event='scale_reduced')
                logger.debug(f"hooke_jeeves: no improving trial point at scale {scale}; f={f0:.6g}")
                level += 1
                continue

            pattern = 0
            xc = x0 + 2.0 * (xs - x0)
            fc = f(xc)
            if fc < fs:
                xs, fs = xc, fc
                pattern = 1
            x0, f0 = xs, fs
            trace.best_x, trace.best_f = x0.copy(), f0
            trace.record(scale=scale, best_f=f0, accepted_moves=accepted, pattern_moves=pattern,
                         evals=f.count, event='moved')
    except BudgetExhausted:
        trace.budget_exhausted = True
    return _finish(trace, f)


def stencil_gradient(
    f: Objective,
    x: np.ndarray,
    h: float,
    directions: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Central-difference gradient at x with step h along each direction.

    Returns (gradient in x coordinates, stencil points, stencil values); the
    stencil is ordered +v_1, -v_1, +v_2, ...
    """
    x = np.asarray(x, dtype=float)
    directions = np.eye(x.size) if directions is None else np.atleast_2d(directions)
    points = np.array([x + sign * h * v for v in directions for sign in (1.0, -1.0)])
    values = np.array([f(p) for p in points])
    slopes = (values[0::2] - values[1::2]) / (2.0 * h * np.linalg.norm(directions, axis=1))
    unit = directions / np.linalg.norm(directions, axis=1)[:, None]
    gradient = np.linalg.lstsq(unit, slopes, rcond=None)[0]
    return gradient, points, values


def implicit_filtering(
    spec: SearchSpec,
    max_iter_per_scale: int = MAX_ITER_PER_SCALE,
    max_backtracks: int = MAX_BACKTRACKS
) -> SearchTrace:
    """Implicit filtering: stencil gradients with the difference step shrinking over the scales.

    At scale s the descent step is capped at s in the max norm and shortened
    by halving up to max_backtracks times. If the line search fails the
    best stencil point is taken; if no stencil point beats the incumbent
    (stencil failure) the next scale is used.
    """
    f = CountingObjective(spec.objective, spec.max_evals)
    basis = spec.basis()
    x = spec.x0.copy()
    trace = SearchTrace(algorithm='implicit_filtering', best_x=x.copy())
    try:
        fx = f(x)
        trace.best_f = fx
        for scale in spec.scales:
            for _ in range(max_iter_per_scale):
                gradient, points, values = stencil_gradient(f, x, scale, basis)
                best = int(np.argmin(values))
                if values[best] >= fx:
                    trace.record(scale=scale, best_f=fx, evals=f.count, event='stencil_failure')
                    break

                step = -gradient
                longest = np.max(np.abs(step))
                if longest > scale:
                    step *= scale / longest
                event = 'stencil_point'
                lam = 1.0
                for _ in range(max_backtracks + 1):
                    trial = x + lam * step
                    ft = f(trial)
                    if ft < fx:
                        x, fx = trial, ft
                        event = 'line_search'
                        break
                    lam *= 0.5
                if event == 'stencil_point':
                    x, fx = points[best].copy(), float(values[best])
                trace.best_x, trace.best_f = x.copy(), fx
                trace.record(scale=scale, best_f=fx, accepted_moves=1, evals=f.count, event=event)
            else:
                logger.debug(f"implicit_filtering: iteration cap reached at scale {scale}")
    except BudgetExhausted:
        trace.budget_exhausted = True
    return _finish(trace, f)


def nelder_mead(spec: SearchSpec) -> SearchTrace:
    """Nelder-Mead simplex with coefficients (1, 2, 1/2, 1/2).

    The initial simplex is x0 plus scales[0] along each direction; the
    search stops when the simplex diameter falls below the smallest scale.
    """
    f = CountingObjective(spec.objective, spec.max_evals)
    x0 = spec.x0.copy()
    trace = SearchTrace(algorithm='nelder_mead', best_x=x0.copy())
    tolerance = spec.scales[-1]
    try:
        simplex = [x0] + [x0 + spec.scales[0] * v for v in spec.basis()]
        values = []
        for point in simplex:
            values.append(f(point))
            if trace.best_f is None or values[-1] < trace.best_f:
                trace.best_x, trace.best_f = point.copy(), values[-1]
        simplex, values = np.array(simplex), np.array(values)

        while True:
            order = np.argsort(values, kind='stable')
            simplex, values = simplex[order], values[order]
            trace.best_x, trace.best_f = simplex[0].copy(), float(values[0])
            diameter = np.max(np.linalg.norm(simplex[1:] - simplex[0], axis=1))
            if diameter < tolerance:
                trace.record(scale=tolerance, best_f=trace.best_f, evals=f.count, event='converged')
                break

            centroid = simplex[:-1].mean(axis=0)
            worst, f_worst = simplex[-1], values[-1]
            xr = centroid + NM_ALPHA * (centroid - worst)
            fr = f(xr)
            if values[0] <= fr < values[-2]:
                simplex[-1], values[-1], event = xr, fr, 'reflect'
            elif fr < values[0]:
                xe = centroid + NM_GAMMA * (xr - centroid)
                fe = f(xe)
                if fe < fr:
                    simplex[-1], values[-1], event = xe, fe, 'expand'
                else:
                    simplex[-1], values[-1], event = xr, fr, 'reflect'
            else:
                if fr < f_worst:
                    xc = centroid + NM_RHO * (xr - centroid)
                    fc = f(xc)
                    accept = fc <= fr
                else:
                    xc = centroid + NM_RHO * (worst - centroid)
                    fc = f(xc)
                    accept = fc < f_worst
                if accept:
                    simplex[-1], values[-1], event = xc, fc, 'contract'
                else:
                    event = 'shrink'
                    for j in range(1, len(simplex)):
                        simplex[j] = simplex[0] + NM_SIGMA * (simplex[j] - simplex[0])
                        values[j] = f(simplex[j])
            best = int(np.argmin(values))
            trace.record(scale=float(diameter), best_f=float(min(values[best], trace.best_f)),
                         evals=f.count, event=event)
    except BudgetExhausted:
        trace.budget_exhausted = True
    return _finish(trace, f)


OPTIMIZERS = {
    'hooke_jeeves': hooke_jeeves,
    'implicit_filtering': implicit_filtering,
    'nelder_mead': nelder_mead,
}
