import hashlib
import json
import logging
import time
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

from engine import __version__
from engine.objective import DIRAC_COMB_CONVENTION
from engine.seeding import derive_seed
from ..models import RunConfig, RunManifest

logger = logging.getLogger(__name__)


class ManifestService:
    """Collects what is needed to rerun a command bit-exactly: config, seeds, version, timing."""

    def __init__(self, command: str, config: RunConfig, snapshot: Optional[Dict[str, Any]] = None):
        self.command = command
        self.config = config
        self.snapshot = snapshot or {}
        self.stage_seeds: Dict[str, int] = {}
        self.started = time.perf_counter()

    def seed_for(self, stage: str, index: int = 0) -> int:
        seed = derive_seed(self.config.master_seed, stage, index)
        self.stage_seeds[f"{stage}:{index}"] = seed
        return seed

    def config_hash(self) -> str:
        resolved = self.config.model_dump(mode='json', by_alias=True)
        canonical = json.dumps(resolved, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def finish(self, outputs: List[str]) -> RunManifest:
        elapsed = time.perf_counter() - self.started
        logger.info(f"{self.command} finished in {elapsed:.2f}s")
        return RunManifest(
            command=self.command,
            created_at=datetime.now(timezone.utc),
            code_version=__version__,
            config_hash=self.config_hash(),
            config_snapshot=self.snapshot,
            resolved_config=self.config.model_dump(mode='json', by_alias=True),
            master_seed=self.config.master_seed,
            stage_seeds=dict(self.stage_seeds),
            timing_seconds=elapsed,
            dirac_comb_convention=DIRAC_COMB_CONVENTION,
            outputs=list(outputs)
        )
