import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import List, Optional

import numpy as np

from engine.objective import ObjectiveReport, Policy, evaluate, legacy_reevaluate
from engine.optimizers import OPTIMIZERS, hooke_jeeves
from engine.policy_search import (
    SearchTemplate,
    SearchStage,
    StageResult,
    check_scale_noise,
    multigrid_search,
    optimize_policy,
    refine_timestep,
    staged_search
)
from engine.stepper import KMCStepper
from .config_service import ConfigService
from .models import Algorithm, EvaluationStats, PolicyFile, RunConfig
from .services.manifest_service import ManifestService

logger = logging.getLogger(__name__)


@dataclass
class OptimizationOutcome:
    policy: Policy
    report: ObjectiveReport
    legacy_report: ObjectiveReport
    initial_total: float
    stages: List[StageResult] = field(default_factory=list)

    def trace_records(self) -> List[dict]:
        records = []
        for stage in self.stages:
            for record in stage.trace.to_records():
                records.append({'stage': stage.label, 'T': stage.T, **record})
        return records

    def run_record(self, command: str, seed: int) -> dict:
        evals = sum(stage.trace.eval_count for stage in self.stages)
        return {
            'command': command,
            'master_seed': seed,
            'T': self.policy.T,
            'N': self.policy.N,
            'initial_total': self.initial_total,
            'total': self.report.total,
            'q_part': self.report.q_part,
            'w_part': self.report.w_part,
            'feasible': self.report.feasible,
            'legacy_total': self.legacy_report.total,
            'eval_count': evals,
            'final_state': ' '.join(f"{x:.17g}" for x in self.report.final_state)
            if self.report.final_state is not None else ''
        }


class OptimizationService:
    """Policy searches, time-step refinement and repeated evaluation of stored policies."""

    def __init__(self, config_service: ConfigService):
        self.config_service = config_service

    def _template(self, config: RunConfig, executor: Optional[ThreadPoolExecutor]) -> SearchTemplate:
        block = config.optimizer
        optimizer = OPTIMIZERS[block.algorithm.value]
        if block.speculative:
            if block.algorithm is not Algorithm.HOOKE_JEEVES:
                logger.warning("Speculative stencil mode only applies to hooke_jeeves; ignored")
            else:
                optimizer = partial(hooke_jeeves, speculative=True, executor=executor)
        return SearchTemplate(
            optimizer=optimizer,
            scales=tuple(block.scales),
            max_evals=block.budget,
            restarts=block.restarts,
            agreement_tol=block.agreement_tol,
            scale_shrink=block.scale_shrink,
            resample_noise=config.stepper.resample_noise
        )

    def _escalation(self, config: RunConfig, threads: int) -> List[SearchStage]:
        params = self.config_service.build_params(config)
        return [
            SearchStage(
                stepper=KMCStepper(params, config.manipulated, stage.ensemble, threads=threads),
                scales=stage.scales,
                max_evals=stage.budget
            )
            for stage in config.optimizer.escalation
        ]

    def optimize(self, config: RunConfig, manifest: ManifestService, threads: int = 1) -> OptimizationOutcome:
        problem = self.config_service.build_problem(config)
        stepper = self.config_service.build_stepper(config, threads)
        start = self.config_service.initial_policy(config, problem)
        seed = manifest.seed_for('search')
        initial = evaluate(start, problem, stepper, seed)
        logger.info(f"Initial policy objective {initial.total:.6g} (T={start.T}, N={start.N})")

        if config.optimizer.budget == 0:
            logger.info("Budget is zero; returning the initial policy")
            return OptimizationOutcome(
                policy=start,
                report=initial,
                legacy_report=legacy_reevaluate(start, problem),
                initial_total=initial.total
            )

        # Noise check
        if config.optimizer.noise_check and isinstance(stepper, KMCStepper):
            check_scale_noise(
                lambda x, s: evaluate(start.with_decisions(x), problem, stepper, s).total,
                start.decision_vector(),
                config.optimizer.scales,
                seed=manifest.seed_for('noise')
            )

        executor = ThreadPoolExecutor(max_workers=max(threads, 1)) if config.optimizer.speculative else None
        try:
            template = self._template(config, executor)
            # Main search, on the configured stepper
            if config.optimizer.multigrid:
                result = multigrid_search(
                    problem, stepper, config.optimizer.multigrid, template,
                    initial_policy=start, seed=seed
                )
                stages = result.stages
            else:
                stages = [optimize_policy(problem, stepper, start, template, seed)]

            # Escalation onto finer KMC ensembles
            if config.optimizer.escalation:
                stages += staged_search(
                    problem,
                    self._escalation(config, threads),
                    stages[-1].policy,
                    template,
                    seed=manifest.seed_for('escalation'),
                    label='escalation'
                )
        finally:
            if executor is not None:
                executor.shutdown()

        # Legacy re-evaluation of every stage
        for stage in stages:
            manifest.stage_seeds[stage.label] = stage.seed
            stage.report = legacy_reevaluate(stage.policy, problem)
            logger.info(
                f"{stage.label}: T={stage.T} best_f={stage.trace.best_f} "
                f"legacy={stage.report.total:.6g} evals={stage.trace.eval_count}"
            )

        # Final report on the configured stepper
        best = stages[-1].policy
        report = evaluate(best, problem, stepper, seed)
        return OptimizationOutcome(
            policy=best,
            report=report,
            legacy_report=stages[-1].report,
            initial_total=initial.total,
            stages=stages
        )

    def refine(self, config: RunConfig, stored: PolicyFile, new_T: float) -> PolicyFile:
        self.config_service.check_policy(stored, config)
        problem = self.config_service.build_problem(config)
        refined = refine_timestep(stored.to_policy(), new_T, problem.param_box)
        logger.info(f"Refined policy from T={stored.T} (N={stored.N}) to T={refined.T} (N={refined.N})")
        return PolicyFile.from_policy(refined, config.mechanism, config.manipulated, seed=stored.seed)

    def evaluate(
        self,
        config: RunConfig,
        stored: PolicyFile,
        repeats: int,
        manifest: ManifestService,
        threads: int = 1
    ) -> EvaluationStats:
        """Objective of a stored policy over `repeats` independent seeds."""
        if repeats < 1:
            raise ValueError("repeats must be at least 1")
        self.config_service.check_policy(stored, config)
        problem = self.config_service.build_problem(config)
        stepper = self.config_service.build_stepper(config, threads)
        policy = stored.to_policy()

        seeds = [manifest.seed_for('evaluate', r) for r in range(repeats)]
        totals = np.array([evaluate(policy, problem, stepper, s).total for s in seeds])
        std = None
        if repeats > 1:
            # shifted by the first value so identical totals give exactly zero
            std = float(np.std(totals - totals[0], ddof=1))
        stats = EvaluationStats(
            repeats=repeats,
            mean=float(np.mean(totals)),
            std=std,
            totals=totals.tolist(),
            seeds=seeds,
            legacy_total=legacy_reevaluate(policy, problem).total
        )
        logger.info(f"Evaluated policy over {repeats} seed(s): mean={stats.mean:.6g} std={stats.std}")
        return stats
