"""Analytic latency, energy and area estimators for the temporal and spatial accelerators."""
from collections.abc import Mapping
from dataclasses import dataclass, fields
from pathlib import Path
import json
import logging
import math
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np

from utils.errors import ConfigError, ShapeMismatchError, SpecError
from utils.model import ACT_QBN_MIN, QBN_MAX, NetworkSpec, PartialPolicy, QbnPolicy

logger = logging.getLogger(__name__)

ACCELERATORS: tuple[str, ...] = ("temporal", "spatial")
FUSION_DIGITS: tuple[int, ...] = (1, 2, 4)


@dataclass(frozen=True)
class Budgets:
    latency_s: float | None = None
    energy_j: float | None = None
    area_units: float | None = None

    def __post_init__(self) -> None:
        for item in fields(self):
            value = getattr(self, item.name)
            if value is not None and (not math.isfinite(value) or value < 0):
                raise ConfigError(f"budget {item.name} must be a finite non-negative real")

    @property
    def is_empty(self) -> bool:
        return self.latency_s is None and self.energy_j is None and self.area_units is None


@dataclass(frozen=True)
class HardwareConfig:
    lanes: int = 8
    clock_hz: float = 100e6
    energy_per_bitop: float = 1e-12
    base_area: float = 10.0
    area_per_lane_bit: float = 1.0
    fusion_digit_bits: int = 2
    fusion_array_rows: int = 4
    fusion_array_cols: int = 4
    accelerator: str = "temporal"
    budgets: Budgets | None = None

    def __post_init__(self) -> None:
        for name in ("lanes", "fusion_array_rows", "fusion_array_cols"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("clock_hz", "energy_per_bitop", "base_area", "area_per_lane_bit"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ConfigError(f"{name} must be a positive real")
        if self.fusion_digit_bits not in FUSION_DIGITS:
            raise ConfigError(f"fusion_digit_bits must be one of {FUSION_DIGITS}")
        if self.accelerator not in ACCELERATORS:
            raise ConfigError(f"accelerator must be one of {ACCELERATORS}")

    @classmethod
    def from_mapping(cls, document: Mapping[str, object]) -> "HardwareConfig":
        known = {item.name for item in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise ConfigError(f"unknown hardware keys: {', '.join(sorted(unknown))}")
        values = dict(document)
        if values.get("budgets") is not None:
            budgets = values["budgets"]
            if not isinstance(budgets, Mapping):
                raise ConfigError("budgets must be an object")
            extra = set(budgets) - {item.name for item in fields(Budgets)}
            if extra:
                raise ConfigError(f"unknown budget keys: {', '.join(sorted(extra))}")
            values["budgets"] = Budgets(**budgets)
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_mapping(self) -> dict[str, object]:
        document = {item.name: getattr(self, item.name) for item in fields(self)}
        if self.budgets is not None:
            document["budgets"] = {item.name: getattr(self.budgets, item.name) for item in fields(Budgets)}
        return document


def load_hardware_config(path: Path) -> HardwareConfig:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: hardware config must be a JSON object")
    return HardwareConfig.from_mapping(document)


@dataclass(frozen=True)
class CostReport:
    accuracy: float
    latency_s: float
    energy_j: float
    area_units: float

    def __post_init__(self) -> None:
        for item in fields(self):
            value = getattr(self, item.name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{item.name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class SubkernelPolicy:
    """QBNs at sub-kernel granularity: layer -> kernel -> ((weight count, qbn), ...)."""

    parts: tuple[tuple[tuple[tuple[int, int], ...], ...], ...]
    act_qbn: tuple[int, ...]

    @classmethod
    def from_policy(cls, net: NetworkSpec, policy: QbnPolicy) -> "SubkernelPolicy":
        policy.check_matches(net)
        return cls(
            parts=tuple(
                tuple(((layer.weights_per_kernel, qbn),) for qbn in kernels)
                for layer, kernels in zip(net.layers, policy.weight_qbn)
            ),
            act_qbn=policy.act_qbn,
        )

    def check_matches(self, net: NetworkSpec) -> None:
        if len(self.parts) != net.n_layer or len(self.act_qbn) != net.n_layer:
            raise ShapeMismatchError("sub-kernel policy does not match the network layers")
        for layer, kernels in zip(net.layers, self.parts):
            if len(kernels) != layer.c_out:
                raise ShapeMismatchError("sub-kernel policy kernel count mismatch", field=f"layers[{layer.index}]")
            for kernel, partition in enumerate(kernels):
                where = f"layers[{layer.index}].kernels[{kernel}]"
                if not partition or any(size < 1 for size, _ in partition):
                    raise SpecError("invalid partition: empty sub-kernel", field=where)
                if sum(size for size, _ in partition) != layer.weights_per_kernel:
                    raise SpecError(
                        f"invalid partition: sizes must cover {layer.weights_per_kernel} weights",
                        field=where,
                    )
                if any(not 0 <= qbn <= QBN_MAX for _, qbn in partition):
                    raise SpecError("invalid partition: QBN out of range", field=where)
        if any(not ACT_QBN_MIN <= a <= QBN_MAX for a in self.act_qbn):
            raise SpecError("activation QBN out of range", field="act_qbn")

    def kernel_max_qbn(self) -> np.ndarray:
        return np.array([max(qbn for _, qbn in partition) for kernels in self.parts for partition in kernels], dtype=np.int64)


def _arrays(net: NetworkSpec, policy: QbnPolicy) -> tuple[np.ndarray, np.ndarray]:
    policy.check_matches(net)
    return policy.weight_array(), policy.act_array()


def total_work(net: NetworkSpec, policy: QbnPolicy) -> int:
    weights, acts = _arrays(net, policy)
    return int(np.sum(net.kernel_macs * weights * acts[net.kernel_layer]))


def temporal_cycles(net: NetworkSpec, policy: QbnPolicy, hw: HardwareConfig) -> int:
    return -(-total_work(net, policy) // hw.lanes)


def temporal_latency(net: NetworkSpec, policy: QbnPolicy, hw: HardwareConfig) -> float:
    return temporal_cycles(net, policy, hw) / hw.clock_hz


def temporal_energy(net: NetworkSpec, policy: QbnPolicy, hw: HardwareConfig) -> float:
    work = total_work(net, policy)
    cycles = -(-work // hw.lanes)
    if cycles == 0:
        return 0.0
    active = min(1.0, work / (cycles * hw.lanes))
    return cycles * active * hw.energy_per_bitop


def area_estimate(net: NetworkSpec, policy: QbnPolicy, hw: HardwareConfig) -> float:
    weights, _ = _arrays(net, policy)
    return hw.base_area + hw.area_per_lane_bit * hw.lanes * int(weights.max())


def _widest_arrays(net: NetworkSpec, policy: QbnPolicy | SubkernelPolicy) -> tuple[np.ndarray, np.ndarray]:
    # a whole-kernel policy is its own widest sub-kernel
    if isinstance(policy, QbnPolicy):
        return _arrays(net, policy)
    policy.check_matches(net)
    return policy.kernel_max_qbn(), np.array(policy.act_qbn, dtype=np.int64)


def spatial_slots(net: NetworkSpec, policy: QbnPolicy | SubkernelPolicy, hw: HardwareConfig) -> int:
    widest, acts = _widest_arrays(net, policy)
    digit = hw.fusion_digit_bits
    # the array allocation is sized by the widest sub-kernel of each kernel
    weight_digits = -(-widest // digit)
    act_digits = -(-acts // digit)
    return int(np.sum(net.kernel_macs * weight_digits * act_digits[net.kernel_layer]))


def spatial_latency(net: NetworkSpec, policy: QbnPolicy | SubkernelPolicy, hw: HardwareConfig) -> float:
    return spatial_slots(net, policy, hw) / (hw.fusion_array_rows * hw.fusion_array_cols) / hw.clock_hz


def spatial_energy(net: NetworkSpec, policy: QbnPolicy | SubkernelPolicy, hw: HardwareConfig) -> float:
    return spatial_slots(net, policy, hw) * hw.energy_per_bitop * hw.fusion_digit_bits ** 2


def estimate_cost(net: NetworkSpec, policy: QbnPolicy, hw: HardwareConfig, accuracy: float) -> CostReport:
    if hw.accelerator == "spatial":
        latency = spatial_latency(net, policy, hw)
        energy = spatial_energy(net, policy, hw)
    else:
        latency = temporal_latency(net, policy, hw)
        energy = temporal_energy(net, policy, hw)
    return CostReport(
        accuracy=accuracy,
        latency_s=latency,
        energy_j=energy,
        area_units=area_estimate(net, policy, hw),
    )


def cost_batch(
    net: NetworkSpec,
    hw: HardwareConfig,
    weights: np.ndarray,
    acts: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Latency, energy and area for policy matrices (N x kernels, N x layers)."""
    act_per_kernel = acts[:, net.kernel_layer]
    if hw.accelerator == "spatial":
        digit = hw.fusion_digit_bits
        slots = np.sum(net.kernel_macs * (-(-weights // digit)) * (-(-act_per_kernel // digit)), axis=1)
        latency = slots / (hw.fusion_array_rows * hw.fusion_array_cols) / hw.clock_hz
        energy = slots * hw.energy_per_bitop * digit ** 2
    else:
        work = np.sum(net.kernel_macs * weights * act_per_kernel, axis=1)
        cycles = -(-work // hw.lanes)
        latency = cycles / hw.clock_hz
        safe = np.maximum(cycles, 1)
        active = np.minimum(1.0, work / (safe * hw.lanes))
        energy = np.where(cycles > 0, cycles * active * hw.energy_per_bitop, 0.0)
    area = hw.base_area + hw.area_per_lane_bit * hw.lanes * weights.max(axis=1)
    return latency.astype(float), energy.astype(float), area.astype(float)


def min_remaining_cost(
    net: NetworkSpec,
    prefix: PartialPolicy,
    hw: HardwareConfig,
    fill_weight: int = 0,
    fill_act: int = ACT_QBN_MIN,
) -> CostReport:
    """Cost of the prefix completed with the cheapest allowed QBNs (by default weights 0, activations 1).

    Every estimator is coordinate-wise non-decreasing, so this bounds every
    completion of the prefix from below. The accuracy field is not evaluated (0.0).
    """
    completed = prefix.complete(net, fill_weight=fill_weight, fill_act=fill_act)
    return estimate_cost(net, completed, hw, accuracy=0.0)


def budget_violations(report: CostReport, budgets: Budgets | None) -> list[str]:
    if budgets is None:
        return []
    violations = []
    if budgets.latency_s is not None and report.latency_s > budgets.latency_s:
        violations.append(f"latency {report.latency_s:.6g}s > {budgets.latency_s:.6g}s")
    if budgets.energy_j is not None and report.energy_j > budgets.energy_j:
        violations.append(f"energy {report.energy_j:.6g}J > {budgets.energy_j:.6g}J")
    if budgets.area_units is not None and report.area_units > budgets.area_units:
        violations.append(f"area {report.area_units:.6g} > {budgets.area_units:.6g}")
    return violations


def within_budgets(report: CostReport, budgets: Budgets | None) -> bool:
    return not budget_violations(report, budgets)


def reference_report(net: NetworkSpec, hw: HardwareConfig, accuracy: float = 1.0) -> CostReport:
    """All-8-bit cost, the normalization point of the extrinsic reward."""
    policy = QbnPolicy.uniform(net, QBN_MAX, QBN_MAX)
    report = estimate_cost(net, policy, hw, accuracy)
    if report.latency_s <= 0 or report.energy_j <= 0:
        raise ValueError(f"empty network: {net.name!r} performs no work at 8 bits")
    return report


def smallest_work_report(net: NetworkSpec, hw: HardwareConfig) -> CostReport:
    """Cheapest policy that still computes: the lightest kernel at 1 bit, activations at 1 bit."""
    macs = net.kernel_macs
    working = np.flatnonzero(macs > 0)
    if working.size == 0:
        raise ValueError(f"empty network: {net.name!r} has no kernel with MACs")
    weights = np.zeros(net.n_kernels, dtype=np.int64)
    weights[working[np.argmin(macs[working])]] = 1
    policy = QbnPolicy.from_flat(net, weights, np.full(net.n_layer, ACT_QBN_MIN, dtype=np.int64))
    return estimate_cost(net, policy, hw, accuracy=0.0)
