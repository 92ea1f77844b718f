"""The hierarchical quantization MDP: goal and action mappings, rewards and budget clipping."""
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
import logging
import math
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np

from utils.accuracy import AccuracyModelParams, derive_sensitivities, proxy_accuracy
from utils.cost import (
    Budgets,
    CostReport,
    HardwareConfig,
    estimate_cost,
    min_remaining_cost,
    reference_report,
    smallest_work_report,
    within_budgets,
)
from utils.errors import BudgetInfeasibleError, ConfigError, EpisodeDoneError
from utils.model import (
    ACT_QBN_MIN,
    QBN_MAX,
    NetworkSpec,
    PartialPolicy,
    Phase,
    QbnPolicy,
    StateVector,
    encode_state,
)

logger = logging.getLogger(__name__)

REWARD_FLOOR = 1e-6
ROUNDING_SLACK = 1e-9
REWARD_TIMINGS: tuple[str, ...] = ("per-step", "episode-end")


class RewardMode(str, Enum):
    RESOURCE = "resource-constrained"
    ACCURACY = "accuracy-guaranteed"


@dataclass(frozen=True)
class RewardWeights:
    psi_acc: float
    psi_l: float
    psi_e: float
    psi_a: float
    mode: RewardMode

    def __post_init__(self) -> None:
        values = (self.psi_acc, self.psi_l, self.psi_e, self.psi_a)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ConfigError("reward exponents must be finite and non-negative")
        if self.mode is RewardMode.RESOURCE and values != (1.0, 0.0, 0.0, 0.0):
            raise ConfigError("resource-constrained search uses psi = (1, 0, 0, 0)")
        if self.mode is RewardMode.ACCURACY:
            if self.psi_acc != 2.0:
                raise ConfigError("accuracy-guaranteed search uses psi_acc = 2")
            if max(self.psi_l, self.psi_e, self.psi_a) >= 1.0:
                raise ConfigError("accuracy-guaranteed search needs psi_l, psi_e, psi_a < 1")

    @classmethod
    def resource_constrained(cls) -> "RewardWeights":
        return cls(1.0, 0.0, 0.0, 0.0, RewardMode.RESOURCE)

    @classmethod
    def accuracy_guaranteed(cls, psi_l: float = 0.1, psi_e: float = 0.1, psi_a: float = 0.1) -> "RewardWeights":
        return cls(2.0, psi_l, psi_e, psi_a, RewardMode.ACCURACY)

    @classmethod
    def from_mapping(cls, document: Mapping[str, object]) -> "RewardWeights":
        known = {item.name for item in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ConfigError(f"unknown reward keys: {', '.join(sorted(unknown))}")
        try:
            mode = RewardMode(document.get("mode", RewardMode.ACCURACY.value))
        except ValueError:
            raise ConfigError(f"unknown reward mode {document.get('mode')!r}") from None
        if mode is RewardMode.RESOURCE:
            return cls.resource_constrained()
        return cls.accuracy_guaranteed(
            psi_l=float(document.get("psi_l", 0.1)),
            psi_e=float(document.get("psi_e", 0.1)),
            psi_a=float(document.get("psi_a", 0.1)),
        )


def _check_raw(value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ValueError(f"raw controller output must lie in [0, 1], got {value}")
    return value


def _ceil(x: float) -> int:
    # products like (q / 8) * 8 may land just above q
    nearest = round(x)
    if nearest >= 1 and 0.0 <= x - nearest <= ROUNDING_SLACK:
        return nearest
    return math.ceil(x)


def map_goal_activation(g_raw: float) -> int:
    g = _check_raw(g_raw)
    return min(max(1 + _ceil(g * (QBN_MAX - 1)), ACT_QBN_MIN), QBN_MAX)


def map_goal_weight(g_raw: float) -> float:
    return 1.0 + _check_raw(g_raw) * (QBN_MAX - 1)


def map_action(ra: float) -> int:
    return min(max(_ceil(_check_raw(ra) * QBN_MAX), 0), QBN_MAX)


def raw_for_activation_qbn(qbn: int) -> float:
    return (qbn - ACT_QBN_MIN) / (QBN_MAX - ACT_QBN_MIN)


def raw_for_weight_qbn(qbn: int) -> float:
    return qbn / QBN_MAX


FULL_WEIGHT_QBNS: tuple[int, ...] = tuple(range(0, QBN_MAX + 1))
FULL_ACT_QBNS: tuple[int, ...] = tuple(range(ACT_QBN_MIN, QBN_MAX + 1))


@dataclass(frozen=True)
class QbnChoices:
    """QBNs the search may pick. Restricted sets split [0, 1] into equal bins, one per value."""

    weights: tuple[int, ...] = FULL_WEIGHT_QBNS
    acts: tuple[int, ...] = FULL_ACT_QBNS

    def __post_init__(self) -> None:
        if not self.weights or list(self.weights) != sorted(set(self.weights)):
            raise ConfigError("weight QBN set must be non-empty, sorted and without repeats")
        if not self.acts or list(self.acts) != sorted(set(self.acts)):
            raise ConfigError("activation QBN set must be non-empty, sorted and without repeats")
        if self.weights[0] < 0 or self.weights[-1] > QBN_MAX:
            raise ConfigError(f"weight QBN set must be a subset of [0, {QBN_MAX}]")
        if self.acts[0] < ACT_QBN_MIN or self.acts[-1] > QBN_MAX:
            raise ConfigError(f"activation QBN set must be a subset of [{ACT_QBN_MIN}, {QBN_MAX}]")

    @classmethod
    def from_sets(cls, qbn_set: Iterable[int], act_qbn_set: Iterable[int] | None = None) -> "QbnChoices":
        weights = tuple(sorted({int(q) for q in qbn_set}))
        source = weights if act_qbn_set is None else {int(q) for q in act_qbn_set}
        return cls(weights=weights, acts=tuple(sorted(q for q in source if q >= ACT_QBN_MIN)))

    @property
    def is_full(self) -> bool:
        return self.weights == FULL_WEIGHT_QBNS and self.acts == FULL_ACT_QBNS

    def weight_qbn(self, raw: float) -> int:
        if self.weights == FULL_WEIGHT_QBNS:
            return map_action(raw)
        return self.weights[_bin(raw, len(self.weights))]

    def act_qbn(self, raw: float) -> int:
        if self.acts == FULL_ACT_QBNS:
            return map_goal_activation(raw)
        return self.acts[_bin(raw, len(self.acts))]

    def raw_for_weight(self, qbn: int) -> float:
        if self.weights == FULL_WEIGHT_QBNS:
            return raw_for_weight_qbn(qbn)
        return (self.weights.index(qbn) + 1) / len(self.weights)

    def raw_for_act(self, qbn: int) -> float:
        if self.acts == FULL_ACT_QBNS:
            return raw_for_activation_qbn(qbn)
        return (self.acts.index(qbn) + 1) / len(self.acts)

    def goal_weight(self, raw: float) -> float:
        """Target average weight QBN, spread over the nonzero part of the set."""
        if self.weights == FULL_WEIGHT_QBNS:
            return map_goal_weight(raw)
        top = self.weights[-1]
        low = min(max(self.weights[0], 1), top)
        return low + _check_raw(raw) * (top - low)


def _bin(raw: float, count: int) -> int:
    return min(max(_ceil(_check_raw(raw) * count) - 1, 0), count - 1)


def normalize_report(report: CostReport, reference: CostReport, floor: CostReport | None = None) -> CostReport:
    """Divide costs by the reference; zero-work latency and energy are first raised to ``floor``."""
    latency, energy = report.latency_s, report.energy_j
    if floor is not None:
        latency = max(latency, floor.latency_s)
        energy = max(energy, floor.energy_j)
    return CostReport(
        accuracy=report.accuracy,
        latency_s=latency / reference.latency_s,
        energy_j=energy / reference.energy_j,
        area_units=report.area_units / reference.area_units,
    )


def extrinsic_reward(report: CostReport, weights: RewardWeights) -> float:
    """ln(acc^psi_acc / (lat^psi_l * en^psi_e * area^psi_a)) on a normalized report."""
    values = (report.accuracy, report.latency_s, report.energy_j, report.area_units)
    if any(not math.isfinite(v) for v in values):
        raise ValueError("extrinsic reward needs finite inputs")
    acc, lat, en, area = (max(v, REWARD_FLOOR) for v in values)
    return (
        weights.psi_acc * math.log(acc)
        - weights.psi_l * math.log(lat)
        - weights.psi_e * math.log(en)
        - weights.psi_a * math.log(area)
    )


def extrinsic_reward_batch(
    accuracy: np.ndarray,
    latency: np.ndarray,
    energy: np.ndarray,
    area: np.ndarray,
    weights: RewardWeights,
) -> np.ndarray:
    floor = REWARD_FLOOR
    return (
        weights.psi_acc * np.log(np.maximum(accuracy, floor))
        - weights.psi_l * np.log(np.maximum(latency, floor))
        - weights.psi_e * np.log(np.maximum(energy, floor))
        - weights.psi_a * np.log(np.maximum(area, floor))
    )


def _goal_term(goal_qbn: float, actions: Sequence[int]) -> float:
    c_out = len(actions)
    return -abs(goal_qbn * c_out - sum(actions)) / c_out


def _check_layer_inputs(actions: Sequence[int], erds: Sequence[float], zeta: float) -> None:
    if not 0.0 <= zeta <= 1.0:
        raise ValueError(f"zeta must lie in [0, 1], got {zeta}")
    if not actions or len(actions) != len(erds):
        raise ValueError("need one extrinsic reward per kernel action")


def intrinsic_reward_layer(goal_qbn: float, actions: Sequence[int], erds: Sequence[float], zeta: float) -> float:
    _check_layer_inputs(actions, erds, zeta)
    return (1.0 - zeta) * _goal_term(goal_qbn, actions) + zeta * sum(erds)


def intrinsic_step_rewards(goal_qbn: float, actions: Sequence[int], erds: Sequence[float], zeta: float) -> list[float]:
    """Per-kernel split of the layer's intrinsic reward; the goal term lands on the last kernel."""
    _check_layer_inputs(actions, erds, zeta)
    rewards = [zeta * erd for erd in erds]
    rewards[-1] += (1.0 - zeta) * _goal_term(goal_qbn, actions)
    return rewards


@dataclass
class EpisodeCursor:
    layer: int = 0
    phase: Phase = Phase.ACTIVATION
    kernel: int = 0
    partial: PartialPolicy | None = None
    goal_raw: float | None = None
    prev_goal: float = 0.0
    prev_action: float = 0.0
    steps: int = 0
    discount: float = 1.0
    discounted_return: float = 0.0
    done: bool = False
    rewards: list[float] = field(default_factory=list)


def clip_action_bound(
    cursor: EpisodeCursor,
    net: NetworkSpec,
    hw: HardwareConfig,
    budgets: Budgets | None,
    choices: QbnChoices | None = None,
) -> float:
    """Largest raw output whose QBN keeps the cheapest completion within every budget."""
    if budgets is None or budgets.is_empty:
        return 1.0
    choices = choices or QbnChoices()
    fill = {"fill_weight": choices.weights[0], "fill_act": choices.acts[0]}
    if cursor.phase is Phase.ACTIVATION:
        for qbn in reversed(choices.acts):
            trial = cursor.partial.with_act(cursor.layer, qbn)
            if within_budgets(min_remaining_cost(net, trial, hw, **fill), budgets):
                return choices.raw_for_act(qbn)
    else:
        for qbn in reversed(choices.weights):
            trial = cursor.partial.with_weight(net, cursor.layer, cursor.kernel, qbn)
            if within_budgets(min_remaining_cost(net, trial, hw, **fill), budgets):
                return choices.raw_for_weight(qbn)
    raise BudgetInfeasibleError(
        f"no legal QBN keeps layer {cursor.layer} ({cursor.phase.value}) within budget"
    )


@dataclass(frozen=True)
class StepResult:
    state: StateVector | None
    reward: float
    done: bool
    applied: float
    qbn: int
    layer_done: bool


class QuantizationEnv:
    def __init__(
        self,
        net: NetworkSpec,
        hw: HardwareConfig,
        weights: RewardWeights,
        accuracy: AccuracyModelParams | None = None,
        reward_timing: str = "per-step",
        gamma_erd: float = 0.99,
        choices: QbnChoices | None = None,
    ):
        if reward_timing not in REWARD_TIMINGS:
            raise ConfigError(f"reward_timing must be one of {REWARD_TIMINGS}")
        if not 0.0 <= gamma_erd < 1.0:
            raise ConfigError("gamma_erd must lie in [0, 1)")
        self.budgets = hw.budgets if weights.mode is RewardMode.RESOURCE else None
        if weights.mode is RewardMode.RESOURCE and (self.budgets is None or self.budgets.is_empty):
            raise ConfigError("resource-constrained search needs at least one budget")
        self.net = net
        self.hw = hw
        self.weights = weights
        self.accuracy = accuracy if accuracy is not None else derive_sensitivities(net)
        self.reward_timing = reward_timing
        self.gamma_erd = gamma_erd
        self.choices = choices or QbnChoices()
        self.reference = reference_report(net, hw)
        self.floor = smallest_work_report(net, hw)
        self.cursor: EpisodeCursor | None = None

    def evaluate(self, policy: QbnPolicy) -> tuple[CostReport, float]:
        report = estimate_cost(self.net, policy, self.hw, proxy_accuracy(self.accuracy, policy))
        return report, extrinsic_reward(normalize_report(report, self.reference, self.floor), self.weights)

    def reset(self) -> StateVector:
        partial = PartialPolicy.empty(self.net)
        if self.budgets is not None:
            floor = min_remaining_cost(
                self.net, partial, self.hw, fill_weight=self.choices.weights[0], fill_act=self.choices.acts[0]
            )
            if not within_budgets(floor, self.budgets):
                raise BudgetInfeasibleError(
                    f"budget infeasible even at the all-minimum policy "
                    f"(latency {floor.latency_s:.6g}s, energy {floor.energy_j:.6g}J, area {floor.area_units:.6g})"
                )
        self.cursor = EpisodeCursor(partial=partial)
        return self.state()

    def state(self) -> StateVector:
        cursor = self._live_cursor()
        return encode_state(
            self.net, cursor.layer, cursor.kernel, cursor.phase, cursor.prev_goal, cursor.prev_action
        )

    def action_bound(self) -> float:
        return clip_action_bound(self._live_cursor(), self.net, self.hw, self.budgets, self.choices)

    def set_goal(self, g_raw: float) -> StateVector:
        """Hand the layer's weight goal to the env; not an episode step."""
        cursor = self._live_cursor()
        if cursor.phase is not Phase.WEIGHT or cursor.kernel != 0:
            raise RuntimeError("the weight goal is set once, before the layer's first kernel")
        cursor.goal_raw = _check_raw(g_raw)
        cursor.prev_goal = cursor.goal_raw
        return self.state()

    def step(self, raw: float) -> StepResult:
        cursor = self._live_cursor()
        raw = _check_raw(raw)
        applied = min(raw, self.action_bound())
        if applied < raw:
            logger.debug("clipped layer %d %s output %.4f -> %.4f", cursor.layer, cursor.phase.value, raw, applied)

        net = self.net
        if cursor.phase is Phase.ACTIVATION:
            qbn = self.choices.act_qbn(applied)
            cursor.partial = cursor.partial.with_act(cursor.layer, qbn)
            cursor.goal_raw = applied
            cursor.prev_goal = applied
            cursor.phase = Phase.WEIGHT
            layer_done = False
        else:
            qbn = self.choices.weight_qbn(applied)
            cursor.partial = cursor.partial.with_weight(net, cursor.layer, cursor.kernel, qbn)
            cursor.prev_action = applied
            cursor.kernel += 1
            layer_done = cursor.kernel == net.layers[cursor.layer].c_out
            if layer_done:
                cursor.layer += 1
                cursor.kernel = 0
                cursor.phase = Phase.ACTIVATION
                cursor.goal_raw = None
        cursor.steps += 1
        cursor.done = cursor.layer == net.n_layer

        reward = self._reward(cursor)
        cursor.rewards.append(reward)
        cursor.discounted_return += cursor.discount * reward
        cursor.discount *= self.gamma_erd
        state = None if cursor.done else self.state()
        return StepResult(state=state, reward=reward, done=cursor.done, applied=applied, qbn=qbn, layer_done=layer_done)

    def _reward(self, cursor: EpisodeCursor) -> float:
        if self.reward_timing == "episode-end" and not cursor.done:
            return 0.0
        # undecided entries take the widest allowed QBN
        policy = cursor.partial.complete(self.net, fill_weight=self.choices.weights[-1], fill_act=self.choices.acts[-1])
        _, reward = self.evaluate(policy)
        return reward

    def _live_cursor(self) -> EpisodeCursor:
        if self.cursor is None:
            raise RuntimeError("call reset() before stepping the environment")
        if self.cursor.done:
            raise EpisodeDoneError("episode already finished; call reset()")
        return self.cursor

    def final_policy(self) -> QbnPolicy:
        if self.cursor is None or not self.cursor.done:
            raise RuntimeError("episode still running")
        return self.cursor.partial.complete(self.net, fill_weight=QBN_MAX, fill_act=QBN_MAX)
