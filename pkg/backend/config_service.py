import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from engine.errors import ConfigError
from engine.meanfield import MechanismParams, params_for
from engine.objective import Policy, SwitchingProblem
from engine.policy_search import switching_warm_start
from engine.stepper import CoarseStepper, KMCStepper, LegacyStepper
from .models import InitialGuess, PolicyFile, RunConfig, StepperKind

logger = logging.getLogger(__name__)

ENV_PREFIX = "SWITCHOPT_"
ENV_NESTING = "__"


def _line_of(text: str, loc) -> Optional[int]:
    """Best-effort source line of the innermost named key in a validation error location."""
    keys = [part for part in loc if isinstance(part, str)]
    if not keys:
        return None
    needle = f'"{keys[-1]}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


def _parse_env_value(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _set_path(target: Dict[str, Any], path, value: Any) -> None:
    node = target
    for key in path[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[path[-1]] = value


class ConfigService:
    """Loads RunConfig from JSON with environment and command-line overrides,
    and builds the engine objects a run needs from it.

    Precedence: config file < SWITCHOPT_* environment < explicit overrides.
    """

    def __init__(self, environ: Optional[Mapping[str, str]] = None, dotenv_path: Optional[str] = None):
        if environ is None:
            load_dotenv(dotenv_path)
            environ = os.environ
        self.environ = environ

    def load(self, path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
        text, raw = self.read_raw(path)
        self.apply_environment(raw)
        for dotted, value in (overrides or {}).items():
            if value is not None:
                _set_path(raw, dotted.split('.'), value)
        try:
            config = RunConfig.model_validate(raw)
        except ValidationError as e:
            problems = []
            for error in e.errors():
                where = '.'.join(str(part) for part in error['loc']) or '<root>'
                line = _line_of(text, error['loc'])
                suffix = f" (line {line})" if line else ""
                problems.append(f"{where}: {error['msg']}{suffix}")
            logger.error(f"Invalid configuration {path}: {'; '.join(problems)}")
            raise ConfigError(f"Invalid configuration {path}: {'; '.join(problems)}") from None
        logger.info(f"Loaded {config.mechanism.value} configuration from {path}")
        return config

    def read_raw(self, path: Optional[str]):
        if path is None:
            return "", {}
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"Cannot read configuration {path}: {e}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return text, raw

    def apply_environment(self, raw: Dict[str, Any]) -> Dict[str, Any]:
        for name, value in sorted(self.environ.items()):
            if not name.startswith(ENV_PREFIX):
                continue
            path = [part.lower() for part in name[len(ENV_PREFIX):].split(ENV_NESTING)]
            if not all(path):
                logger.warning(f"Ignoring malformed override {name}")
                continue
            _set_path(raw, path, _parse_env_value(value))
            logger.debug(f"Environment override {'.'.join(path)} = {value}")
        return raw

    def build_params(self, config: RunConfig) -> MechanismParams:
        return params_for(config.mechanism, config.params)

    def build_problem(self, config: RunConfig) -> SwitchingProblem:
        block = config.problem
        return SwitchingProblem.from_params(
            self.build_params(config),
            config.manipulated,
            x_start=block.x_start,
            x_target=block.x_target,
            epsilon=block.epsilon,
            w_scale=block.w_scale,
            decay_amplitude=block.decay_amplitude,
            decay_rate=block.decay_rate,
            param_box=block.param_box
        )

    def build_stepper(self, config: RunConfig, threads: int = 1) -> CoarseStepper:
        params = self.build_params(config)
        if config.stepper.kind is StepperKind.KMC:
            return KMCStepper(params, config.manipulated, config.stepper.ensemble, threads=threads)
        return LegacyStepper(params, config.manipulated)

    def load_policy(self, path: str) -> PolicyFile:
        try:
            return PolicyFile.model_validate_json(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"Cannot read policy {path}: {e}") from None
        except ValidationError as e:
            raise ConfigError(f"Invalid policy file {path}: {e}") from None

    def initial_policy(self, config: RunConfig, problem: SwitchingProblem) -> Policy:
        """Warm start from config.policy.warm_start, else the configured initial guess."""
        block = config.policy
        if block.warm_start:
            stored = self.load_policy(block.warm_start)
            self.check_policy(stored, config)
            logger.info(f"Warm start from {block.warm_start} (T={stored.T}, N={stored.N})")
            return stored.to_policy()
        if block.initial_guess is InitialGuess.SWITCHING:
            return switching_warm_start(problem, block.T, block.N, block.switching_value)
        return Policy.constant(block.T, block.N, problem.p_ss)

    def check_policy(self, stored: PolicyFile, config: RunConfig) -> None:
        if stored.mechanism is not config.mechanism or stored.manipulated != config.manipulated:
            raise ConfigError(
                f"Policy for {stored.mechanism.value} {stored.manipulated} does not fit "
                f"a {config.mechanism.value} {config.manipulated} run"
            )
