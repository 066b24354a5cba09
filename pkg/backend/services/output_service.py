import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'


class OutputService:
    """Writes run artifacts under one output directory, each file atomically (temp file + rename)."""

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[str] = []

    def _atomic_write(self, name: str, write) -> Path:
        target = self.out_dir / name
        fd, temp_path = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix='.tmp')
        try:
            with os.fdopen(fd, 'w', newline='') as handle:
                write(handle)
            os.replace(temp_path, target)
        except Exception:
            Path(temp_path).unlink(missing_ok=True)
            logger.error(f"Failed to write {target}")
            raise
        if str(target) not in self.written:
            self.written.append(str(target))
        logger.info(f"Wrote {target}")
        return target

    def write_frame(self, name: str, frame: pd.DataFrame) -> Path:
        return self._atomic_write(name, lambda handle: frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT))

    def write_json(self, name: str, payload: Union[BaseModel, Dict[str, Any]]) -> Path:
        if isinstance(payload, BaseModel):
            text = payload.model_dump_json(indent=2, by_alias=True)
        else:
            text = json.dumps(payload, indent=2)
        return self._atomic_write(name, lambda handle: handle.write(text + '\n'))

    def write_jsonl(self, name: str, records: Iterable[Dict[str, Any]]) -> Path:
        lines = [json.dumps(record) for record in records]
        return self._atomic_write(name, lambda handle: handle.write(''.join(line + '\n' for line in lines)))

    def append_run_log(self, record: Dict[str, Any], name: str = 'runs.csv') -> Path:
        """Append one row to the run log, keeping the existing column order first."""
        path = self.out_dir / name
        row = pd.DataFrame([record])
        if path.exists():
            existing = pd.read_csv(path)
            columns = list(existing.columns) + [c for c in row.columns if c not in existing.columns]
            row = pd.concat([existing, row], ignore_index=True)[columns]
        return self.write_frame(name, row)
