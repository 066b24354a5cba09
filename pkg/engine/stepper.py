import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .kmc import lift, restrict, ssa_run
from .meanfield import Mechanism, MechanismParams, check_coverage, integrate
from .seeding import RngSeed, derive_seed

if TYPE_CHECKING:
    from .objective import Policy

logger = logging.getLogger(__name__)

NEAR_ZERO_MEAN = 1e-9


class EnsembleConfig(BaseModel):
    """Lattice size and replica-count controls of the adaptive ensemble protocol.

    d_max of None disables adaptation (the ensemble stays at m_replicas).
    """
    model_config = ConfigDict(frozen=True, extra='forbid')

    n_sites: int = Field(default=10_000, ge=1)
    m_replicas: int = Field(default=200, ge=1)
    m_min: int = Field(default=100, ge=1)
    m_max: int = Field(default=800, ge=1)
    d_max: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode='after')
    def check_replica_bounds(self) -> 'EnsembleConfig':
        if not self.m_min <= self.m_replicas <= self.m_max:
            raise ValueError(
                f"need m_min <= m_replicas <= m_max, got {self.m_min}, {self.m_replicas}, {self.m_max}"
            )
        return self


@dataclass
class StepResult:
    mean: np.ndarray
    d: np.ndarray
    m_used: int
    samples: Optional[np.ndarray] = None


def ensemble_statistics(samples: np.ndarray):
    """Mean and relative standard error d of restricted replica outputs, per component."""
    samples = np.asarray(samples, dtype=float)
    m = samples.shape[0]
    # moments taken about the first replica; identical replicas give exactly d = 0
    deviations = samples - samples[0]
    mean = samples[0] + deviations.mean(axis=0)
    if m < 2:
        return mean, np.zeros_like(mean)
    stderr = deviations.std(axis=0, ddof=1) / np.sqrt(m)
    magnitude = np.abs(mean)
    d = np.where(magnitude < NEAR_ZERO_MEAN, stderr, stderr / np.where(magnitude < NEAR_ZERO_MEAN, 1.0, magnitude))
    return mean, d


def coarse_step(
    x,
    params: MechanismParams,
    T: float,
    cfg: EnsembleConfig,
    seed: int,
    threads: int = 1,
    keep_samples: bool = False
) -> StepResult:
    """One application of the coarse map: lift, evolve every replica for T, restrict, average.

    Replica r runs on stream RngSeed(seed, r). While the largest component
    of d exceeds d_max and fewer than m_max replicas ran, the ensemble is
    doubled (clamped to [m_min, m_max]) and only the new replicas are run.
    The reduction is in replica-index order, so the result does not depend
    on the thread count.
    """
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    start = lift(x, cfg.n_sites)
    base = RngSeed(seed)

    def run_replica(index: int) -> np.ndarray:
        return restrict(ssa_run(start, params, T, base.replica(index)))

    m = min(max(cfg.m_replicas, cfg.m_min), cfg.m_max)
    samples: List[np.ndarray] = []
    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while True:
            indices = range(len(samples), m)
            if executor is not None:
                samples.extend(executor.map(run_replica, indices))
            else:
                samples.extend(run_replica(index) for index in indices)

            mean, d = ensemble_statistics(np.array(samples))
            if cfg.d_max is None or d.max() <= cfg.d_max or m >= cfg.m_max:
                break
            grown = min(max(2 * m, cfg.m_min), cfg.m_max)
            logger.debug(f"Ensemble d={d.max():.3g} > d_max={cfg.d_max}; growing {m} -> {grown} replicas")
            m = grown
    finally:
        if executor is not None:
            executor.shutdown()

    if cfg.d_max is not None and d.max() > cfg.d_max:
        logger.warning(f"Ensemble d={d.max():.3g} still above d_max={cfg.d_max} at m_max={cfg.m_max}")

    stacked = np.array(samples)
    return StepResult(
        mean=mean,
        d=d,
        m_used=len(samples),
        samples=stacked if keep_samples else None
    )


def legacy_step(x, params: MechanismParams, T: float) -> StepResult:
    """Deterministic coarse map from the mean-field ODE."""
    x = check_coverage(x, params.mechanism)
    final = integrate(params, x, T).final
    return StepResult(mean=final, d=np.zeros_like(final), m_used=1)


class CoarseStepper(ABC):
    """Coarse time-stepper bound to a nominal parameter record.

    The decision vector p passed to step() overrides the parameters named
    in `manipulated`; everything else stays at its nominal value.
    """

    def __init__(self, params: MechanismParams, manipulated: Sequence[str]):
        unknown = [name for name in manipulated if name not in type(params).model_fields]
        if unknown:
            raise ValueError(f"{type(params).__name__} has no parameter(s) {unknown}")
        self.params = params
        self.manipulated = tuple(manipulated)

    @property
    def mechanism(self) -> Mechanism:
        return self.params.mechanism

    def parameters_at(self, p) -> MechanismParams:
        values = np.atleast_1d(np.asarray(p, dtype=float))
        return self.params.model_copy(update=dict(zip(self.manipulated, values.tolist())))

    @abstractmethod
    def step(self, x, p, T: float, seed: int) -> StepResult:
        ...


class KMCStepper(CoarseStepper):
    def __init__(
        self,
        params: MechanismParams,
        manipulated: Sequence[str],
        ensemble: EnsembleConfig,
        threads: int = 1,
        keep_samples: bool = False
    ):
        super().__init__(params, manipulated)
        self.ensemble = ensemble
        self.threads = threads
        self.keep_samples = keep_samples

    def step(self, x, p, T: float, seed: int) -> StepResult:
        return coarse_step(
            x, self.parameters_at(p), T, self.ensemble, seed,
            threads=self.threads, keep_samples=self.keep_samples
        )


class LegacyStepper(CoarseStepper):
    def step(self, x, p, T: float, seed: int) -> StepResult:
        return legacy_step(x, self.parameters_at(p), T)


@dataclass
class Rollout:
    times: np.ndarray       # t_i = i*T, i = 0..N
    params: np.ndarray      # (N, m) decision applied on each interval
    x0: np.ndarray
    steps: List[StepResult]

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1].mean if self.steps else self.x0

    def coverages(self) -> np.ndarray:
        """Coarse states at t_0..t_N."""
        return np.vstack([self.x0[None, :]] + [s.mean[None, :] for s in self.steps])

    def to_frame(self, mechanism: Mechanism, param_names: Sequence[str]) -> pd.DataFrame:
        columns = Mechanism(mechanism).coverage_columns
        records = [{
            't': 0.0,
            **{name: np.nan for name in param_names},
            **dict(zip(columns, self.x0)),
            **{f"d_{c}": 0.0 for c in columns},
            'm_used': 0
        }]
        for t, p, step in zip(self.times[1:], self.params, self.steps):
            records.append({
                't': t,
                **dict(zip(param_names, p)),
                **dict(zip(columns, step.mean)),
                **{f"d_{c}": value for c, value in zip(columns, step.d)},
                'm_used': step.m_used
            })
        return pd.DataFrame.from_records(
            records,
            columns=['t'] + list(param_names) + columns + [f"d_{c}" for c in columns] + ['m_used']
        )


def rollout(x0, policy: 'Policy', stepper: CoarseStepper, seed: int) -> Rollout:
    """Compose the coarse map over the policy: step i applies p_i over ((i-1)T, iT].

    Every interval re-lifts from the previous mean; interval i draws its
    replica streams from derive_seed(seed, 'interval', i).
    """
    x = check_coverage(x0, stepper.mechanism)
    start = x.copy()
    steps = []
    for i, p in enumerate(policy.values, start=1):
        result = stepper.step(x, p, policy.T, derive_seed(seed, 'interval', i))
        steps.append(result)
        x = result.mean
    return Rollout(
        times=policy.T * np.arange(policy.N + 1),
        params=np.asarray(policy.values, dtype=float),
        x0=start,
        steps=steps
    )
