from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parents[1]
NETWORKS_DIR = PROJECT_ROOT / "networks"
HARDWARE_DIR = PROJECT_ROOT / "hardware"
DATASETS_DIR = PROJECT_ROOT / "datasets"
DEFAULT_HARDWARE = HARDWARE_DIR / "default.json"

NETWORK_NAMES = (
    "tiny2x2",
    "tiny4x4",
    "toy_classifier",
)
DATASET_FILES = {
    "toy_classifier": "toy_classifier_samples.json",
}


def available_networks(base_path: Path = NETWORKS_DIR) -> list[str]:
    return [name for name in NETWORK_NAMES if (base_path / f"{name}.json").exists()]


def resolve_network(name_or_path: str, base_path: Path = NETWORKS_DIR) -> Path:
    """A bundled network name or a path to a network JSON file."""
    if name_or_path in NETWORK_NAMES:
        return base_path / f"{name_or_path}.json"
    return Path(name_or_path)


def dataset_for(name: str, base_path: Path = DATASETS_DIR) -> Path | None:
    filename = DATASET_FILES.get(name)
    return base_path / filename if filename else None
