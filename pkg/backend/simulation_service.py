import logging
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from engine.kmc import lift, ssa_trajectory
from engine.meanfield import MechanismParams, Trajectory, integrate
from engine.objective import Policy, SwitchingProblem
from engine.seeding import RngSeed
from engine.stepper import CoarseStepper, rollout
from .config_service import ConfigService
from .models import RunConfig, StepperKind

logger = logging.getLogger(__name__)


class SimulationService:
    """Single trajectories (ODE or one KMC realization) and coarse rollouts of a policy."""

    def __init__(self, config_service: ConfigService):
        self.config_service = config_service

    def parameter_schedule(
        self,
        stepper: CoarseStepper,
        problem: SwitchingProblem,
        policy: Optional[Policy]
    ) -> List[Tuple[float, MechanismParams]]:
        """(switch time, params) pairs: p_i from (i-1)T, nominal again after the horizon."""
        if policy is None:
            return [(0.0, stepper.parameters_at(problem.p_ss))]
        schedule = [(i * policy.T, stepper.parameters_at(p)) for i, p in enumerate(policy.values)]
        schedule.append((policy.t_f, stepper.parameters_at(problem.p_ss)))
        return schedule

    def simulate(
        self,
        config: RunConfig,
        t_end: float,
        sample_dt: float,
        seed: int,
        policy: Optional[Policy] = None
    ) -> pd.DataFrame:
        if t_end <= 0 or sample_dt <= 0:
            raise ValueError("t_end and sample_dt must be positive")
        problem = self.config_service.build_problem(config)
        stepper = self.config_service.build_stepper(config)
        schedule = self.parameter_schedule(stepper, problem, policy)
        sample_times = np.arange(int(np.floor(t_end / sample_dt + 1e-9)) + 1) * sample_dt

        if config.stepper.kind is StepperKind.KMC:
            start = lift(problem.x_start, config.stepper.ensemble.n_sites)
            logger.info(f"Simulating one KMC realization on {start.n_sites} sites up to t={t_end}")
            trajectory = ssa_trajectory(start, schedule, sample_times, RngSeed(seed))
        else:
            trajectory = self._mean_field_path(problem.x_start, schedule, sample_times)
        return trajectory.to_frame(config.mechanism)

    def _mean_field_path(self, x0, schedule, sample_times: np.ndarray) -> Trajectory:
        times, states = [], []
        x = np.asarray(x0, dtype=float)
        t_last = float(sample_times[-1])
        for k, (t_switch, params) in enumerate(schedule):
            if t_switch >= t_last and k > 0:
                break
            t_next = schedule[k + 1][0] if k + 1 < len(schedule) else t_last
            t_next = min(t_next, t_last)
            mask = (sample_times >= t_switch) & (sample_times <= t_next)
            if k > 0:
                mask &= sample_times > t_switch
            wanted = sample_times[mask]
            path = integrate(params, x, t_next - t_switch, t_eval=wanted, t0=t_switch)
            if wanted.size == 0:
                # no sample inside this interval, only carry the state across it
                x = path.final
                continue
            # t0 + span can miss t_next by an ulp; match samples to the nearest output time
            nearest = np.abs(path.t[None, :] - wanted[:, None]).argmin(axis=1)
            times.append(wanted)
            states.append(path.states[nearest].reshape(len(wanted), -1))
            x = path.final
        return Trajectory(t=np.concatenate(times), states=np.vstack(states))

    def rollout(self, config: RunConfig, policy: Policy, seed: int, threads: int = 1) -> pd.DataFrame:
        problem = self.config_service.build_problem(config)
        stepper = self.config_service.build_stepper(config, threads)
        path = rollout(problem.x_start, policy, stepper, seed)
        return path.to_frame(config.mechanism, config.manipulated)
