import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InvalidPolicyError
from .meanfield import Mechanism, MechanismParams, check_coverage, find_steady_states, rhs
from .stepper import CoarseStepper, LegacyStepper, Rollout, rollout

logger = logging.getLogger(__name__)

INFEASIBLE_PENALTY = 1e6
STATIONARY_TOL = 1e-8
SNAP_TOL = 1e-3
DEFAULT_BOX = (0.0, 20.0)
# Decision p_i is charged at t = (i-1)T, the instant it takes effect.
DIRAC_COMB_CONVENTION = "left-endpoint: p_i charged once at t=(i-1)T"


@dataclass(frozen=True)
class Policy:
    """Piecewise-constant parameter profile: p(t) = p_i on ((i-1)T, iT], p_ss before t=0."""

    T: float
    values: np.ndarray  # (N, m)
    p_ss: np.ndarray    # (m,)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        p_ss = np.atleast_1d(np.asarray(self.p_ss, dtype=float))
        if not self.T > 0:
            raise InvalidPolicyError(f"T must be positive, got {self.T}")
        if values.ndim != 2 or values.shape[0] < 1:
            raise InvalidPolicyError(f"Policy needs N >= 1 rows of parameter values, got shape {values.shape}")
        if values.shape[1] != p_ss.shape[0]:
            raise InvalidPolicyError(
                f"Policy values have {values.shape[1]} parameter(s) but p_ss has {p_ss.shape[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidPolicyError("Policy values must be finite")
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'p_ss', p_ss)

    @classmethod
    def constant(cls, T: float, N: int, p_ss) -> 'Policy':
        p_ss = np.atleast_1d(np.asarray(p_ss, dtype=float))
        return cls(T=T, values=np.tile(p_ss, (N, 1)), p_ss=p_ss)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def t_f(self) -> float:
        return self.N * self.T

    def midpoints(self) -> np.ndarray:
        return self.T * (np.arange(self.N) + 0.5)

    def value_at(self, t: float) -> np.ndarray:
        if t <= 0:
            return self.p_ss.copy()
        index = min(int(np.ceil(t / self.T)) - 1, self.N - 1)
        return self.values[index].copy()

    def decision_vector(self) -> np.ndarray:
        return self.values.ravel().copy()

    def with_decisions(self, x) -> 'Policy':
        x = np.asarray(x, dtype=float)
        if x.size != self.values.size:
            raise InvalidPolicyError(f"Expected {self.values.size} decision values, got {x.size}")
        return Policy(T=self.T, values=x.reshape(self.values.shape), p_ss=self.p_ss)


@dataclass
class SwitchingProblem:
    """Drive the system from x_start to the basin of x_target with a bounded-cost policy.

    x_start and x_target must be stationary under the mean-field model at
    the nominal parameters. param_box holds one [low, high] row per
    manipulated parameter.
    """

    params: MechanismParams
    manipulated: Sequence[str]
    x_start: np.ndarray
    x_target: np.ndarray
    epsilon: float = 0.05
    w_scale: float = 50.0
    decay_amplitude: float = 0.3
    decay_rate: float = 1.0
    param_box: Optional[np.ndarray] = None
    p_ss: np.ndarray = field(init=False)

    def __post_init__(self):
        self.manipulated = tuple(self.manipulated)
        if not self.manipulated:
            raise ConfigError("At least one manipulated parameter is required")
        fields = type(self.params).model_fields
        for name in self.manipulated:
            if name not in fields:
                raise ConfigError(f"{self.mechanism.value} has no parameter '{name}'")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")

        self.p_ss = np.array([getattr(self.params, name) for name in self.manipulated], dtype=float)
        if self.param_box is None:
            self.param_box = np.tile(DEFAULT_BOX, (len(self.manipulated), 1))
        self.param_box = np.atleast_2d(np.asarray(self.param_box, dtype=float))
        if self.param_box.shape != (len(self.manipulated), 2) or np.any(self.param_box[:, 0] > self.param_box[:, 1]):
            raise ConfigError(f"param_box must be {len(self.manipulated)} rows of [low, high]")

        self.x_start = check_coverage(self.x_start, self.mechanism)
        self.x_target = check_coverage(self.x_target, self.mechanism)
        for label, state in (('x_start', self.x_start), ('x_target', self.x_target)):
            residual = np.max(np.abs(rhs(state, self.params)))
            if residual >= STATIONARY_TOL:
                raise ConfigError(f"{label}={state} is not stationary at p_ss (residual {residual:.3g})")

    @property
    def mechanism(self) -> Mechanism:
        return self.params.mechanism

    @classmethod
    def from_params(
        cls,
        params: MechanismParams,
        manipulated: Sequence[str],
        x_start=None,
        x_target=None,
        **settings
    ) -> 'SwitchingProblem':
        """Problem between the stable steady states at the nominal parameters.

        Defaults: start at the stable state with the lowest first coverage,
        target the one with the highest. Explicit states are snapped to the
        nearest computed steady state within 1e-3, so tabulated (rounded)
        coverages can be supplied.
        """
        states = find_steady_states(params)
        stable = [s.state for s in states if s.is_stable]
        if x_start is None or x_target is None:
            if len(stable) < 2:
                raise ConfigError(
                    f"{params.mechanism.value} at {params.model_dump()} is not bistable; "
                    f"give x_start and x_target explicitly"
                )
        x_start = stable[0] if x_start is None else _snap(x_start, states)
        x_target = stable[-1] if x_target is None else _snap(x_target, states)
        return cls(params=params, manipulated=manipulated, x_start=x_start, x_target=x_target, **settings)

    def box_violation(self, values: np.ndarray) -> float:
        low, high = self.param_box[:, 0], self.param_box[:, 1]
        excess = np.maximum(low - values, 0.0) + np.maximum(values - high, 0.0)
        return float(np.sqrt(np.sum(excess ** 2)))


def _snap(x, states) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not states:
        raise ConfigError("No steady states at the nominal parameters")
    distances = [np.max(np.abs(s.state - x)) for s in states]
    nearest = int(np.argmin(distances))
    if distances[nearest] > SNAP_TOL:
        raise ConfigError(f"{x} is not within {SNAP_TOL} of any steady state")
    logger.debug(f"Snapped {x} to steady state {states[nearest].state}")
    return states[nearest].state


@dataclass
class ObjectiveReport:
    total: float
    q_part: float
    w_part: float
    final_state: Optional[np.ndarray]
    feasible: bool
    rollout: Optional[Rollout] = None

    def to_record(self) -> dict:
        final = [] if self.final_state is None else self.final_state.tolist()
        return {
            'total': self.total,
            'q_part': self.q_part,
            'w_part': self.w_part,
            'final_state': final,
            'feasible': self.feasible
        }


def running_cost(policy: Policy, decay_amplitude: float = 0.3, decay_rate: float = 1.0) -> float:
    """T * sum_i |p_i - p_ss|^2 (1 - a exp(-r t_{i-1})), t_{i-1} = (i-1)T."""
    deviation = np.sum((policy.values - policy.p_ss) ** 2, axis=1)
    t_left = policy.T * np.arange(policy.N)
    weight = 1.0 - decay_amplitude * np.exp(-decay_rate * t_left)
    return float(policy.T * np.sum(deviation * weight))


def terminal_penalty(final, prob: SwitchingProblem) -> float:
    """w_scale (1 - exp(-sum_j R(|x_j - target_j| - epsilon))), R the ramp."""
    final = check_coverage(final, prob.mechanism, tol=1e-9)
    excess = np.maximum(np.abs(final - prob.x_target) - prob.epsilon, 0.0)
    return float(prob.w_scale * (1.0 - np.exp(-np.sum(excess))))


def evaluate(policy: Policy, prob: SwitchingProblem, stepper: CoarseStepper, seed: int = 0) -> ObjectiveReport:
    """Objective of a policy: running cost plus terminal penalty after a rollout.

    A policy leaving param_box is charged 1e6 (1 + violation distance) and
    the stepper is not run.
    """
    if stepper.mechanism is not prob.mechanism:
        raise InvalidPolicyError(
            f"Stepper simulates {stepper.mechanism.value}, problem is {prob.mechanism.value}"
        )
    if policy.m != len(prob.manipulated) or not np.allclose(policy.p_ss, prob.p_ss):
        raise InvalidPolicyError(
            f"Policy p_ss={policy.p_ss.tolist()} does not match problem p_ss={prob.p_ss.tolist()}"
        )

    violation = prob.box_violation(policy.values)
    if violation > 0:
        return ObjectiveReport(
            total=INFEASIBLE_PENALTY * (1.0 + violation),
            q_part=0.0,
            w_part=0.0,
            final_state=None,
            feasible=False
        )

    path = rollout(prob.x_start, policy, stepper, seed)
    q_part = running_cost(policy, prob.decay_amplitude, prob.decay_rate)
    w_part = terminal_penalty(path.final, prob)
    return ObjectiveReport(
        total=q_part + w_part,
        q_part=q_part,
        w_part=w_part,
        final_state=path.final,
        feasible=True,
        rollout=path
    )


def legacy_reevaluate(policy: Policy, prob: SwitchingProblem) -> ObjectiveReport:
    """Objective of a policy on the deterministic mean-field scale."""
    return evaluate(policy, prob, LegacyStepper(prob.params, prob.manipulated), seed=0)
