import logging
from typing import Tuple

import pandas as pd

from engine.meanfield import Mechanism, Separatrix, bifurcation_scan, find_steady_states, trace_separatrix
from .config_service import ConfigService
from .models import RunConfig

logger = logging.getLogger(__name__)


class AnalysisService:
    """Steady-state structure of the mean-field models: bifurcation scans and the CO separatrix."""

    def __init__(self, config_service: ConfigService):
        self.config_service = config_service

    def bifurcation(
        self,
        config: RunConfig,
        param_name: str,
        value_range: Tuple[float, float],
        resolution: int = 201
    ) -> pd.DataFrame:
        params = self.config_service.build_params(config)
        table = bifurcation_scan(params, param_name, value_range, resolution)
        for lo, hi in table.folds:
            logger.info(f"Branch count changes between {param_name}={lo:.6g} and {hi:.6g}")
        return table.to_frame(config.mechanism)

    def steady_states(self, config: RunConfig) -> pd.DataFrame:
        params = self.config_service.build_params(config)
        columns = config.mechanism.coverage_columns
        records = []
        for steady in find_steady_states(params):
            record = dict(zip(columns, steady.state))
            record['stability'] = steady.stability.value
            records.append(record)
        return pd.DataFrame.from_records(records, columns=columns + ['stability'])

    def separatrix(self, config: RunConfig, delta: float = 1e-6, max_arc: float = 10.0) -> Separatrix:
        params = self.config_service.build_params(config)
        separatrix = trace_separatrix(params, delta=delta, max_arc=max_arc)
        logger.info(
            f"Separatrix through saddle {separatrix.saddle.state.round(5).tolist()} "
            f"with {len(separatrix.points)} points"
        )
        return separatrix

    def separatrix_frame(self, config: RunConfig, delta: float = 1e-6, max_arc: float = 10.0) -> pd.DataFrame:
        separatrix = self.separatrix(config, delta, max_arc)
        frame = separatrix.to_frame()
        frame.insert(0, 'index', range(len(frame)))
        return frame

    @staticmethod
    def crosses_separatrix(separatrix: Separatrix, path: pd.DataFrame) -> bool:
        """Whether a CO coverage path ends on the other side of the separatrix from where it starts."""
        columns = Mechanism.CO.coverage_columns
        states = path[columns].to_numpy()
        return separatrix.side(states[0]) != separatrix.side(states[-1])
