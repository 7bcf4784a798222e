"""Run provenance: config digests and library versions.

Provenance records are the one artifact allowed to differ between reruns
(they carry a wall-clock timestamp); everything else the pipeline writes is
byte-identical for identical inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
import time


def config_to_dict(obj) -> dict:
    """JSON-safe dict of a config dataclass (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def config_sha256(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def versions() -> dict:
    import numpy
    import scipy
    import sklearn

    try:
        from importlib.metadata import version
        own = version("roostkit")
    except Exception:
        own = "unknown"
    return {
        "python": sys.version.split()[0],
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "roostkit": own,
    }


def provenance_record(command: str, config: dict, seed: int | None = None) -> dict:
    return {
        "schema_version": 1,
        "command": command,
        "config_sha256": config_sha256(config),
        "config": config,
        "seed": seed,
        "created_unix": time.time(),
        "versions": versions(),
    }
