from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from engine.meanfield import Mechanism, params_for
from engine.objective import Policy
from engine.stepper import EnsembleConfig

DEFAULT_MANIPULATED = {
    Mechanism.NO: ['k'],
    Mechanism.CO: ['beta'],
}


class StepperKind(str, Enum):
    LEGACY = "legacy"
    KMC = "kmc"


class Algorithm(str, Enum):
    HOOKE_JEEVES = "hooke_jeeves"
    IMPLICIT_FILTERING = "implicit_filtering"
    NELDER_MEAD = "nelder_mead"


class ProblemBlock(BaseModel):
    model_config = ConfigDict(extra='forbid')

    x_start: Optional[List[float]] = None
    x_target: Optional[List[float]] = None
    epsilon: float = Field(default=0.05, gt=0)
    w_scale: float = Field(default=50.0, ge=0)
    decay_amplitude: float = Field(default=0.3, ge=0, le=1)
    decay_rate: float = Field(default=1.0, ge=0)
    param_box: Optional[List[Tuple[float, float]]] = None


class StepperBlock(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kind: StepperKind = StepperKind.LEGACY
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    resample_noise: bool = False


def _decreasing_positive(scales: List[float]) -> List[float]:
    if not scales or any(s <= 0 for s in scales):
        raise ValueError("scales must be positive")
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise ValueError("scales must be strictly decreasing")
    return scales


class InitialGuess(str, Enum):
    CONSTANT = "constant"
    SWITCHING = "switching"


class PolicyBlock(BaseModel):
    model_config = ConfigDict(extra='forbid')

    T: float = Field(default=0.25, gt=0)
    N: int = Field(default=20, ge=1)
    warm_start: Optional[str] = None  # path to a policy JSON
    initial_guess: InitialGuess = InitialGuess.CONSTANT
    switching_value: Optional[List[float]] = None  # default: lower edge of param_box


class EscalationStage(BaseModel):
    """One more accurate KMC pass, warm started from the previous best policy."""
    model_config = ConfigDict(extra='forbid')

    ensemble: EnsembleConfig
    scales: List[float] = Field(default_factory=lambda: [0.25, 0.125, 0.0625])
    budget: int = Field(default=2_000, ge=1)

    @field_validator('scales')
    @classmethod
    def check_scales(cls, scales: List[float]) -> List[float]:
        return _decreasing_positive(scales)


class OptimizerBlock(BaseModel):
    model_config = ConfigDict(extra='forbid')

    algorithm: Algorithm = Algorithm.HOOKE_JEEVES
    scales: List[float] = Field(default_factory=lambda: [1.0, 0.5, 0.25, 0.125])
    budget: int = Field(default=10_000, ge=0)
    restarts: int = Field(default=1, ge=1)
    agreement_tol: Optional[float] = Field(default=None, gt=0)
    multigrid: Optional[List[float]] = None  # decreasing interval lengths
    scale_shrink: float = Field(default=0.5, gt=0, le=1)
    speculative: bool = False
    noise_check: bool = False
    escalation: List[EscalationStage] = Field(default_factory=list)

    @field_validator('scales')
    @classmethod
    def check_scales(cls, scales: List[float]) -> List[float]:
        return _decreasing_positive(scales)

    @field_validator('multigrid')
    @classmethod
    def check_schedule(cls, schedule: Optional[List[float]]) -> Optional[List[float]]:
        if schedule is None:
            return schedule
        if not schedule or any(T <= 0 for T in schedule):
            raise ValueError("multigrid schedule must hold positive interval lengths")
        if any(b >= a for a, b in zip(schedule, schedule[1:])):
            raise ValueError("multigrid schedule must be strictly decreasing")
        return schedule


class RunConfig(BaseModel):
    """Complete description of one run; every block has defaults except the mechanism."""
    model_config = ConfigDict(extra='forbid', populate_by_name=True)

    comment: Optional[str] = Field(default=None, alias='_comment')
    mechanism: Mechanism
    params: Dict[str, float] = Field(default_factory=dict)
    manipulated: Optional[List[str]] = None
    problem: ProblemBlock = Field(default_factory=ProblemBlock)
    stepper: StepperBlock = Field(default_factory=StepperBlock)
    policy: PolicyBlock = Field(default_factory=PolicyBlock)
    optimizer: OptimizerBlock = Field(default_factory=OptimizerBlock)
    master_seed: int = Field(default=0, ge=0, lt=2 ** 64)
    output_dir: str = "runs/latest"

    @model_validator(mode='after')
    def resolve_mechanism_fields(self) -> 'RunConfig':
        try:
            record = params_for(self.mechanism, self.params)
        except ValidationError as e:
            raise ValueError(f"invalid {self.mechanism.value} params: {e}") from None
        if self.manipulated is None:
            self.manipulated = list(DEFAULT_MANIPULATED[self.mechanism])
        unknown = [name for name in self.manipulated if name not in type(record).model_fields]
        if unknown:
            raise ValueError(f"{self.mechanism.value} has no parameter(s) {unknown}")
        box = self.problem.param_box
        if box is not None and len(box) != len(self.manipulated):
            raise ValueError("problem.param_box needs one [low, high] row per manipulated parameter")
        value = self.policy.switching_value
        if value is not None and len(value) != len(self.manipulated):
            raise ValueError("policy.switching_value needs one entry per manipulated parameter")
        dimension = self.mechanism.dimension
        for label in ('x_start', 'x_target'):
            state = getattr(self.problem, label)
            if state is not None and len(state) != dimension:
                raise ValueError(f"problem.{label} needs {dimension} coverage value(s)")
        return self


class PolicyFile(BaseModel):
    """On-disk form of a policy."""
    model_config = ConfigDict(extra='forbid')

    mechanism: Mechanism
    manipulated: List[str]
    T: float = Field(gt=0)
    N: int = Field(ge=1)
    p_ss: List[float]
    values: List[List[float]]
    seed: Optional[int] = None

    @model_validator(mode='after')
    def check_shape(self) -> 'PolicyFile':
        if len(self.values) != self.N:
            raise ValueError(f"values has {len(self.values)} rows, N is {self.N}")
        width = len(self.p_ss)
        if width != len(self.manipulated) or any(len(row) != width for row in self.values):
            raise ValueError("every row of values needs one entry per manipulated parameter")
        return self

    def to_policy(self) -> Policy:
        return Policy(T=self.T, values=np.array(self.values, dtype=float), p_ss=np.array(self.p_ss, dtype=float))

    @classmethod
    def from_policy(
        cls,
        policy: Policy,
        mechanism: Mechanism,
        manipulated: List[str],
        seed: Optional[int] = None
    ) -> 'PolicyFile':
        return cls(
            mechanism=mechanism,
            manipulated=list(manipulated),
            T=policy.T,
            N=policy.N,
            p_ss=policy.p_ss.tolist(),
            values=policy.values.tolist(),
            seed=seed
        )


class RunManifest(BaseModel):
    command: str
    created_at: datetime
    code_version: str
    config_hash: str
    config_snapshot: Dict[str, Any]
    resolved_config: Dict[str, Any]
    master_seed: int
    stage_seeds: Dict[str, int] = Field(default_factory=dict)
    timing_seconds: float = 0.0
    dirac_comb_convention: str
    outputs: List[str] = Field(default_factory=list)


class EvaluationStats(BaseModel):
    repeats: int = Field(ge=1)
    mean: float
    std: Optional[float] = None  # absent for a single repeat
    totals: List[float]
    seeds: List[int]
    legacy_total: Optional[float] = None
