import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import IncompatibleHorizonError, InvalidPolicyError
from .objective import ObjectiveReport, Policy, SwitchingProblem, evaluate, legacy_reevaluate
from .optimizers import SearchSpec, SearchTrace, hooke_jeeves
from .seeding import derive_seed
from .stepper import CoarseStepper

logger = logging.getLogger(__name__)

HORIZON_TOL = 1e-9
DEFAULT_MAX_RESTARTS = 5
DEFAULT_AGREEMENT = 0.01
NOISE_REPEATS = 5
NOISE_FACTOR = 3.0

Optimizer = Callable[[SearchSpec], SearchTrace]


def restart_until_stable(
    optimizer: Optimizer,
    spec: SearchSpec,
    agreement_tol: Optional[float] = None,
    max_restarts: int = DEFAULT_MAX_RESTARTS
) -> SearchTrace:
    """Rerun the optimizer from its own best point, full scale ladder each time,
    until two consecutive passes agree on best_f.

    agreement_tol is absolute; None means 1% of the previous best_f. The
    evaluation budget is shared across passes.
    """
    if agreement_tol is not None and not agreement_tol > 0:
        raise ValueError(f"agreement_tol must be positive, got {agreement_tol}")
    if max_restarts < 1:
        raise ValueError("max_restarts must be at least 1")

    trace = optimizer(spec)
    evals, iterations = trace.eval_count, list(trace.iterations)
    passes = 1
    while passes < max_restarts and not trace.budget_exhausted and trace.best_f is not None:
        previous = trace
        spec = spec.restarted_from(previous.best_x, max_evals=spec.max_evals - evals)
        trace = optimizer(spec)
        passes += 1
        evals += trace.eval_count
        iterations.extend(trace.iterations)
        # a pass never loses the incumbent
        if trace.best_f is None or trace.best_f > previous.best_f:
            trace = replace(trace, best_x=previous.best_x, best_f=previous.best_f)
        tol = agreement_tol if agreement_tol is not None else DEFAULT_AGREEMENT * abs(previous.best_f)
        logger.info(f"Restart pass {passes}: best_f {previous.best_f:.6g} -> {trace.best_f:.6g}")
        if abs(previous.best_f - trace.best_f) <= tol:
            break
    else:
        if passes >= max_restarts:
            trace.cap_hit = True
            logger.warning(f"Restart cap of {max_restarts} passes reached without agreement")

    # renumber across passes
    for index, record in enumerate(iterations):
        record.iteration = index
    trace.iterations = iterations
    trace.eval_count = evals
    trace.passes = passes
    return trace


def _intervals(t_f: float, T: float) -> int:
    ratio = t_f / T
    N = int(round(ratio))
    if N < 1 or abs(ratio - N) > HORIZON_TOL * max(1.0, ratio):
        raise IncompatibleHorizonError(f"Horizon {t_f} is not a whole number of intervals of length {T}")
    return N


def refine_timestep(policy: Policy, new_T: float, param_box: Optional[np.ndarray] = None) -> Policy:
    """Resample a policy onto shorter intervals over the same horizon.

    A natural cubic spline through (interval midpoint, p_i) is evaluated at
    the new midpoints, then clipped to param_box.
    """
    if not 0 < new_T < policy.T:
        raise InvalidPolicyError(f"new_T must be in (0, {policy.T}), got {new_T}")
    new_N = _intervals(policy.t_f, new_T)
    new_mid = new_T * (np.arange(new_N) + 0.5)
    if policy.N == 1:
        values = np.tile(policy.values[0], (new_N, 1))
    else:
        spline = CubicSpline(policy.midpoints(), policy.values, axis=0, bc_type='natural')
        values = spline(new_mid)
    if param_box is not None:
        box = np.atleast_2d(param_box)
        values = np.clip(values, box[:, 0], box[:, 1])
    return Policy(T=new_T, values=values, p_ss=policy.p_ss)


def policy_objective(
    problem: SwitchingProblem,
    stepper: CoarseStepper,
    template: Policy,
    seed: int,
    resample_noise: bool = False
) -> Callable[[np.ndarray], float]:
    """Map a decision vector to evaluate(...).total on the template's grid.

    By default every evaluation reuses `seed` (common random numbers);
    resample_noise gives evaluation j the seed derive_seed(seed, 'evaluation', j).
    """
    counter = {'calls': 0}

    def objective(x: np.ndarray) -> float:
        call = counter['calls']
        counter['calls'] += 1
        eval_seed = derive_seed(seed, 'evaluation', call) if resample_noise else seed
        return evaluate(template.with_decisions(x), problem, stepper, eval_seed).total

    return objective


def switching_warm_start(problem: SwitchingProblem, T: float, N: int, value=None) -> Policy:
    """Hold the manipulated parameters at `value` for the first n intervals, p_ss after.

    Starting from the constant p_ss policy, single-interval trial points cannot
    leave the start basin when the terminal penalty has saturated. Every n
    in 0..N is scored on the mean-field model and the cheapest policy is
    returned. value defaults to the lower edge of param_box.
    """
    value = problem.param_box[:, 0] if value is None else np.atleast_1d(np.asarray(value, dtype=float))
    base = Policy.constant(T, N, problem.p_ss)
    best, best_total, chosen = base, np.inf, 0
    for n in range(N + 1):
        values = base.values.copy()
        values[:n] = value
        candidate = Policy(T=T, values=values, p_ss=problem.p_ss)
        total = legacy_reevaluate(candidate, problem).total
        if total < best_total:
            best, best_total, chosen = candidate, total, n
    logger.info(f"Switching warm start: {chosen} of {N} intervals at {value.tolist()}, objective {best_total:.6g}")
    return best


@dataclass
class SearchTemplate:
    """Optimizer settings reused at every stage of a staged or multigrid search."""

    optimizer: Optimizer = hooke_jeeves
    scales: Sequence[float] = (1.0, 0.5, 0.25, 0.125)
    max_evals: int = 10_000
    restarts: int = 1
    agreement_tol: Optional[float] = None
    scale_shrink: float = 0.5
    resample_noise: bool = False


@dataclass
class StageResult:
    label: str
    T: float
    seed: int
    trace: SearchTrace
    policy: Policy
    report: Optional[ObjectiveReport] = None


def optimize_policy(
    problem: SwitchingProblem,
    stepper: CoarseStepper,
    start: Policy,
    template: SearchTemplate,
    seed: int,
    scales: Optional[Sequence[float]] = None
) -> StageResult:
    """One search over the decisions of `start`, with restarts when template.restarts > 1."""
    spec = SearchSpec(
        x0=start.decision_vector(),
        objective=policy_objective(problem, stepper, start, seed, template.resample_noise),
        scales=template.scales if scales is None else scales,
        max_evals=template.max_evals
    )
    if template.restarts > 1:
        trace = restart_until_stable(template.optimizer, spec, template.agreement_tol, template.restarts)
    else:
        trace = template.optimizer(spec)
    best = start.with_decisions(trace.best_x)
    return StageResult(label='search', T=start.T, seed=seed, trace=trace, policy=best)


@dataclass
class MultigridResult:
    stages: List[StageResult] = field(default_factory=list)

    @property
    def final(self) -> StageResult:
        return self.stages[-1]


def multigrid_search(
    problem: SwitchingProblem,
    stepper: CoarseStepper,
    schedule: Sequence[float],
    template: SearchTemplate,
    horizon: Optional[float] = None,
    initial_policy: Optional[Policy] = None,
    seed: int = 0
) -> MultigridResult:
    """Optimize on successively shorter intervals, warm starting each stage by spline resampling.

    Stage k uses the scale ladder multiplied by scale_shrink**k. With more
    than one entry in the schedule, the finest interval length is searched
    once more with the full ladder.
    """
    schedule = [float(T) for T in schedule]
    if not schedule:
        raise ValueError("schedule must not be empty")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"schedule must be strictly decreasing, got {schedule}")
    if initial_policy is None and horizon is None:
        raise ValueError("give either a horizon or an initial policy")
    t_f = initial_policy.t_f if initial_policy is not None else float(horizon)
    for T in schedule:
        _intervals(t_f, T)

    # Starting policy on the coarsest grid
    if initial_policy is None:
        policy = Policy.constant(schedule[0], _intervals(t_f, schedule[0]), problem.p_ss)
    elif np.isclose(initial_policy.T, schedule[0]):
        policy = initial_policy
    else:
        policy = refine_timestep(initial_policy, schedule[0], problem.param_box)

    # Coarse to fine, each stage warm started from the last
    result = MultigridResult()
    for k, T in enumerate(schedule):
        if k > 0:
            policy = refine_timestep(policy, T, problem.param_box)
        scales = [s * template.scale_shrink ** k for s in template.scales]
        stage_seed = derive_seed(seed, 'multigrid', k)
        logger.info(f"Multigrid stage {k}: T={T}, N={policy.N}, scales={scales}")
        stage = optimize_policy(problem, stepper, policy, template, stage_seed, scales)
        stage.label = f"stage-{k}"
        policy = stage.policy
        result.stages.append(stage)

    # Full ladder once more on the finest grid
    if len(schedule) > 1:
        stage_seed = derive_seed(seed, 'multigrid', len(schedule))
        logger.info(f"Multigrid second pass at T={schedule[-1]}")
        stage = optimize_policy(problem, stepper, policy, template, stage_seed)
        stage.label = 'second-pass'
        result.stages.append(stage)
    return result


@dataclass
class NoiseFloorReport:
    sigma: float
    smallest_scale: float
    scale_change: float
    resolved: bool


def check_scale_noise(
    noisy_objective: Callable[[np.ndarray, int], float],
    x,
    scales: Sequence[float],
    directions: Optional[np.ndarray] = None,
    repeats: int = NOISE_REPEATS,
    seed: int = 0
) -> NoiseFloorReport:
    """Warn when the smallest scale moves the objective by less than 3 sigma of its noise.

    sigma comes from `repeats` evaluations at x with independent seeds; the
    scale change is half the spread of the +/- trial points along the first
    direction under a common seed.
    """
    if repeats < 2:
        raise ValueError("repeats must be at least 2 to estimate noise")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.eye(x.size)[0] if directions is None else np.atleast_2d(directions)[0]
    h = min(scales)
    samples = [noisy_objective(x, derive_seed(seed, 'noise', r)) for r in range(repeats)]
    sigma = float(np.std(samples, ddof=1))
    common = derive_seed(seed, 'noise', 0)
    change = abs(noisy_objective(x + h * v, common) - noisy_objective(x - h * v, common)) / 2.0
    resolved = change >= NOISE_FACTOR * sigma
    if not resolved:
        logger.warning(
            f"Scale {h} changes the objective by {change:.3g}, below {NOISE_FACTOR:g}x noise sigma {sigma:.3g}"
        )
    return NoiseFloorReport(sigma=sigma, smallest_scale=h, scale_change=change, resolved=resolved)


@dataclass
class SearchStage:
    stepper: CoarseStepper
    scales: Sequence[float]
    max_evals: int = 10_000


def staged_search(
    problem: SwitchingProblem,
    stages: Sequence[SearchStage],
    initial_policy: Policy,
    template: SearchTemplate,
    seed: int = 0,
    label: str = 'stage'
) -> List[StageResult]:
    """Escalate accuracy: each stage warm starts from the previous best with its own stepper and scales."""
    if not stages:
        raise ValueError("stages must not be empty")
    policy = initial_policy
    results = []
    for k, stage in enumerate(stages):
        stage_template = replace(template, max_evals=stage.max_evals)
        stage_seed = derive_seed(seed, 'staged', k)
        logger.info(f"Staged search {k}: {type(stage.stepper).__name__}, scales={list(stage.scales)}")
        result = optimize_policy(problem, stage.stepper, policy, stage_template, stage_seed, stage.scales)
        result.label = f"{label}-{k}"
        policy = result.policy
        results.append(result)
    return results
