import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Optional, Tuple

from pydantic import ValidationError

from .errors import ConfigurationError
from .models import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def to_json(manifest: RunManifest) -> str:
    """Canonical text: sorted keys, fixed indentation, trailing newline"""
    return json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


class ManifestStore:
    """Owns <output>/manifest.json; only the batch driver's main thread writes it"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.path = self.output_dir / MANIFEST_NAME

    def load(self) -> Optional[RunManifest]:
        if not self.path.is_file():
            return None
        try:
            return RunManifest.model_validate_json(self.path.read_text(encoding="utf-8"))
        except (OSError, ValidationError) as e:
            raise ConfigurationError(f"cannot read run manifest {self.path}: {e}") from e

    def open(self, run_id: str) -> Tuple[RunManifest, bool]:
        """Existing manifest (re-stamped with run_id) or a fresh one, plus whether run_id changed"""
        manifest = self.load()
        if manifest is None:
            return RunManifest(run_id=run_id), False
        if manifest.run_id == run_id:
            return manifest, False
        logger.warning(
            f"⚠️ Configuration changed since the last run ({manifest.run_id} -> {run_id}), "
            f"--resume will not skip completed stages"
        )
        return manifest.model_copy(update={"run_id": run_id}), True

    def save(self, manifest: RunManifest) -> Path:
        """Write to a temp file beside the manifest, then rename over it"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=str(self.output_dir), prefix=self.path.stem, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                handle.write(to_json(manifest))
            os.replace(tmp_path, self.path)
        except Exception:
            try:
                os.unlink(tmp_path)
            except OSError:
                pass
            raise
        return self.path
