from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
import math
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import pandas as pd

TRACE_COLUMNS: tuple[str, ...] = (
    "episode",
    "reward",
    "accuracy",
    "latency_s",
    "energy_j",
    "area",
    "avg_wqbn",
    "avg_aqbn",
)
LAYER_COLUMNS: tuple[str, ...] = ("episode", "layer", "avg_wqbn", "aqbn")
SUMMARY_COLUMNS: tuple[str, ...] = ("seed", "best_reward", "best_episode", "episodes")


@dataclass(frozen=True)
class TraceRow:
    episode: int
    reward: float
    accuracy: float
    latency_s: float
    energy_j: float
    area: float
    avg_wqbn: float
    avg_aqbn: float


@dataclass(frozen=True)
class LayerRow:
    episode: int
    layer: int
    avg_wqbn: float
    aqbn: int


def trace_frame(rows: Sequence[TraceRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in rows], columns=list(TRACE_COLUMNS))


def layer_frame(rows: Sequence[LayerRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in rows], columns=list(LAYER_COLUMNS))


def save_frame(df: pd.DataFrame, output_path: Path) -> Path:
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    if output_path.exists():
        output_path.unlink()
    df.to_csv(output_path, index=False)
    return output_path


def load_seed_traces(paths: Mapping[int, Path]) -> pd.DataFrame:
    """Concatenate per-seed trace CSVs, tagging each row with its seed and source file."""
    frames = []
    for seed, csv_path in sorted(paths.items()):
        if not Path(csv_path).exists():
            continue
        df = pd.read_csv(csv_path)
        df.insert(0, "seed", seed)
        df["source_path"] = str(csv_path)
        frames.append(df)
    if not frames:
        return pd.DataFrame(columns=["seed", *TRACE_COLUMNS, "source_path"])
    return pd.concat(frames, ignore_index=True, sort=False)


def summarize_seeds(merged: pd.DataFrame) -> pd.DataFrame:
    """Best reward per seed and the first episode that reached it."""
    rows = []
    for seed, group in merged.groupby("seed", sort=True):
        best = group["reward"].max()
        first = int(group.loc[group["reward"] == best, "episode"].min())
        rows.append({"seed": seed, "best_reward": float(best), "best_episode": first, "episodes": len(group)})
    return pd.DataFrame(rows, columns=list(SUMMARY_COLUMNS))


def episodes_to_fraction(trace: pd.DataFrame, optimum: float, fraction: float = 0.9) -> int | None:
    """First episode whose reward reaches ``fraction`` of ``optimum`` in exp-reward space."""
    threshold = optimum + math.log(fraction)
    hits = trace.loc[trace["reward"] >= threshold, "episode"]
    if hits.empty:
        return None
    return int(hits.min())
