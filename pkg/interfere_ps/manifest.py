"""Run manifests written next to every command's outputs."""

import json
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from . import __version__


def manifest_path(output: Union[str, Path]) -> Path:
    """``fit.json`` -> ``fit.manifest.json``."""
    output = Path(output)
    return output.with_name(output.stem + ".manifest.json")


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: Optional[int] = None
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    duration_seconds: float = 0.0
    status: str = "ok"
    _clock: float = field(default_factory=time.perf_counter, repr=False)

    def finish(self, status: str = "ok") -> "RunManifest":
        self.duration_seconds = time.perf_counter() - self._clock
        self.status = status
        return self

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload.pop("_clock")
        return payload

    def write(self, output: Union[str, Path]) -> Path:
        """Write the manifest beside ``output`` and return its path."""
        path = manifest_path(output)
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")
        return path
