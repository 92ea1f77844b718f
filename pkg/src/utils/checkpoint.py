from pathlib import Path
import logging
import pickle
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

from utils.errors import ConfigError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def save_checkpoint(path: Path, payload: dict[str, object]) -> Path:
    """Pickle the search state (agent, RNG, trace so far) with a version tag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as handle:
        pickle.dump({"version": CHECKPOINT_VERSION, **payload}, handle, protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(path)
    logger.debug("checkpoint written to %s", path)
    return path


def load_checkpoint(path: Path) -> dict[str, object]:
    with Path(path).open("rb") as handle:
        payload = pickle.load(handle)
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version') if isinstance(payload, dict) else None}")
    return payload
