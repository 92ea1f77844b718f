"""
Domain types for kernel-wise quantization: network descriptions, QBN policies,
the normalized observation handed to the controllers, and the file codecs for
network specs and policies.
"""
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from itertools import chain
from pathlib import Path
import json
import math
import struct
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np

from utils.errors import PolicyCodecError, ShapeMismatchError, SpecError

QBN_MAX = 8
ACT_QBN_MIN = 1
UNDECIDED = -1

POLICY_MAGIC = b"AUTOQPOL"
POLICY_VERSION = 1
POLICY_HEADER = struct.Struct("<8sHI")
POLICY_NAME_LENGTH = struct.Struct("<H")

STATE_FIELDS: tuple[str, ...] = (
    "layer",
    "kernel",
    "c_in",
    "c_out",
    "kernel_size",
    "stride",
    "feature",
    "depthwise",
    "weight_activation",
    "prev_goal",
    "prev_action",
)
STATE_DIM = len(STATE_FIELDS)


class LayerKind(str, Enum):
    CONV = "conv"
    DEPTHWISE = "depthwise-conv"
    FC = "fully-connected"


class Phase(str, Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: LayerKind
    c_in: int
    c_out: int
    kernel_w: int
    kernel_h: int
    stride: int
    feat_w: int
    feat_h: int
    macs_per_kernel: int

    def __post_init__(self) -> None:
        where = f"layers[{self.index}]"
        if self.index < 0:
            raise SpecError("layer index must be >= 0", field=where)
        for name in ("c_in", "c_out", "kernel_w", "kernel_h", "feat_w", "feat_h", "macs_per_kernel"):
            if getattr(self, name) < 1:
                raise SpecError(f"{name} must be a positive integer", field=f"{where}.{name}")
        if self.kind is LayerKind.FC:
            if self.kernel_w != 1 or self.kernel_h != 1:
                raise SpecError("fully-connected layers require kernel 1x1", field=f"{where}.kernel")
            if self.stride != 0:
                raise SpecError("fully-connected layers encode stride as 0", field=f"{where}.stride")
        elif self.stride < 1:
            raise SpecError("stride must be a positive integer", field=f"{where}.stride")
        if self.kind is LayerKind.DEPTHWISE and self.c_out != self.c_in:
            raise SpecError("depthwise-conv requires c_out == c_in", field=f"{where}.c_out")

    @property
    def is_depthwise(self) -> bool:
        return self.kind is LayerKind.DEPTHWISE

    @property
    def kernel_size(self) -> int:
        return max(self.kernel_w, self.kernel_h)

    @property
    def feature_size(self) -> int:
        return max(self.feat_w, self.feat_h)

    @property
    def weights_per_kernel(self) -> int:
        channels = 1 if self.is_depthwise else self.c_in
        return channels * self.kernel_w * self.kernel_h

    @property
    def out_w(self) -> int:
        if self.kind is LayerKind.FC:
            return 1
        return (self.feat_w - self.kernel_w) // self.stride + 1

    @property
    def out_h(self) -> int:
        if self.kind is LayerKind.FC:
            return 1
        return (self.feat_h - self.kernel_h) // self.stride + 1


@dataclass(frozen=True)
class KernelStats:
    variance: float
    sensitivity: float | None = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.variance) or self.variance < 0:
            raise SpecError("variance must be a finite non-negative real")
        if self.sensitivity is not None and (not math.isfinite(self.sensitivity) or self.sensitivity < 0):
            raise SpecError("sensitivity must be a finite non-negative real")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    kernel_stats: tuple[tuple[KernelStats, ...], ...]
    act_sensitivity: tuple[float, ...]
    acc_fp: float
    weights: tuple[tuple[tuple[float, ...], ...], ...] | None = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise SpecError("a network needs at least one layer", field="layers")
        if not 0.0 <= self.acc_fp <= 1.0:
            raise SpecError("acc_fp must lie in [0, 1]", field="acc_fp")
        if len(self.kernel_stats) != len(self.layers):
            raise SpecError("kernel_stats must have one entry per layer", field="kernels")
        if len(self.act_sensitivity) != len(self.layers):
            raise SpecError("act_sensitivity must have one entry per layer", field="act_sensitivity")
        for position, layer in enumerate(self.layers):
            where = f"layers[{position}]"
            if layer.index != position:
                raise SpecError(f"layer index {layer.index} out of order", field=where)
            if len(self.kernel_stats[position]) != layer.c_out:
                raise SpecError(
                    f"expected {layer.c_out} kernels, found {len(self.kernel_stats[position])}",
                    field=f"{where}.kernels",
                )
            value = self.act_sensitivity[position]
            if not math.isfinite(value) or value < 0:
                raise SpecError("act_sensitivity must be finite and non-negative", field=f"{where}.act_sensitivity")
        if self.weights is not None:
            self._check_weights()

    def _check_weights(self) -> None:
        if len(self.weights) != len(self.layers):
            raise SpecError("weights must have one entry per layer", field="weights")
        for position, layer in enumerate(self.layers):
            kernels = self.weights[position]
            if len(kernels) != layer.c_out:
                raise SpecError(f"expected {layer.c_out} weight kernels", field=f"weights[{position}]")
            for kernel_index, values in enumerate(kernels):
                if len(values) != layer.weights_per_kernel:
                    raise SpecError(
                        f"expected {layer.weights_per_kernel} weights, found {len(values)}",
                        field=f"weights[{position}][{kernel_index}]",
                    )

    @property
    def n_layer(self) -> int:
        return len(self.layers)

    @cached_property
    def n_kernels(self) -> int:
        return sum(layer.c_out for layer in self.layers)

    @cached_property
    def n_entries(self) -> int:
        return self.n_layer + self.n_kernels

    @cached_property
    def kernel_offsets(self) -> tuple[int, ...]:
        offsets = [0]
        for layer in self.layers:
            offsets.append(offsets[-1] + layer.c_out)
        return tuple(offsets)

    @cached_property
    def kernel_layer(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_layer), [layer.c_out for layer in self.layers])

    @cached_property
    def kernel_macs(self) -> np.ndarray:
        return np.repeat(
            np.array([layer.macs_per_kernel for layer in self.layers], dtype=np.int64),
            [layer.c_out for layer in self.layers],
        )

    @cached_property
    def kernel_variances(self) -> np.ndarray:
        return np.array([stats.variance for layer in self.kernel_stats for stats in layer], dtype=float)

    @cached_property
    def state_maxima(self) -> dict[str, float]:
        return {
            "layer": float(max(self.n_layer - 1, 1)),
            "c_in": float(max(layer.c_in for layer in self.layers)),
            "c_out": float(max(layer.c_out for layer in self.layers)),
            "kernel_size": float(max(layer.kernel_size for layer in self.layers)),
            "stride": float(max(layer.stride for layer in self.layers)),
            "feature": float(max(layer.feature_size for layer in self.layers)),
        }

    def flat_index(self, layer: int, kernel: int) -> int:
        return self.kernel_offsets[layer] + kernel


@dataclass(frozen=True)
class QbnPolicy:
    weight_qbn: tuple[tuple[int, ...], ...]
    act_qbn: tuple[int, ...]

    def __post_init__(self) -> None:
        for layer, kernels in enumerate(self.weight_qbn):
            for kernel, value in enumerate(kernels):
                if not 0 <= value <= QBN_MAX:
                    raise SpecError(f"weight QBN {value} outside [0, {QBN_MAX}]", field=f"weight_qbn[{layer}][{kernel}]")
        for layer, value in enumerate(self.act_qbn):
            if not ACT_QBN_MIN <= value <= QBN_MAX:
                raise SpecError(f"activation QBN {value} outside [{ACT_QBN_MIN}, {QBN_MAX}]", field=f"act_qbn[{layer}]")

    @classmethod
    def uniform(cls, net: NetworkSpec, weight: int, act: int) -> "QbnPolicy":
        return cls(
            weight_qbn=tuple((weight,) * layer.c_out for layer in net.layers),
            act_qbn=(act,) * net.n_layer,
        )

    @classmethod
    def from_flat(cls, net: NetworkSpec, weights: Sequence[int], acts: Sequence[int]) -> "QbnPolicy":
        offsets = net.kernel_offsets
        flat = [int(value) for value in weights]
        if len(flat) != net.n_kernels or len(acts) != net.n_layer:
            raise ShapeMismatchError("flat policy does not match the network shape")
        return cls(
            weight_qbn=tuple(tuple(flat[offsets[i]:offsets[i + 1]]) for i in range(net.n_layer)),
            act_qbn=tuple(int(value) for value in acts),
        )

    def check_matches(self, net: NetworkSpec) -> None:
        if len(self.act_qbn) != net.n_layer or len(self.weight_qbn) != net.n_layer:
            raise ShapeMismatchError(
                f"policy has {len(self.act_qbn)} layers, network {net.name!r} has {net.n_layer}"
            )
        for layer, kernels in zip(net.layers, self.weight_qbn):
            if len(kernels) != layer.c_out:
                raise ShapeMismatchError(
                    f"policy has {len(kernels)} kernels, network has {layer.c_out}",
                    field=f"weight_qbn[{layer.index}]",
                )

    @cached_property
    def _flat_weights(self) -> np.ndarray:
        return np.fromiter(chain.from_iterable(self.weight_qbn), dtype=np.int64)

    def weight_array(self) -> np.ndarray:
        return self._flat_weights.copy()

    def act_array(self) -> np.ndarray:
        return np.array(self.act_qbn, dtype=np.int64)

    def entries(self) -> list[int]:
        """Layer-major codec order: each layer's activation QBN, then its kernel QBNs."""
        values: list[int] = []
        for act, kernels in zip(self.act_qbn, self.weight_qbn):
            values.append(act)
            values.extend(kernels)
        return values


@dataclass(frozen=True, eq=False)
class PartialPolicy:
    """Policy under construction; undecided entries hold UNDECIDED."""

    weights: np.ndarray
    acts: np.ndarray

    @classmethod
    def empty(cls, net: NetworkSpec) -> "PartialPolicy":
        return cls(
            weights=np.full(net.n_kernels, UNDECIDED, dtype=np.int64),
            acts=np.full(net.n_layer, UNDECIDED, dtype=np.int64),
        )

    @classmethod
    def from_policy(cls, policy: QbnPolicy) -> "PartialPolicy":
        return cls(weights=policy.weight_array(), acts=policy.act_array())

    def with_weight(self, net: NetworkSpec, layer: int, kernel: int, qbn: int) -> "PartialPolicy":
        weights = self.weights.copy()
        weights[net.flat_index(layer, kernel)] = qbn
        return PartialPolicy(weights=weights, acts=self.acts.copy())

    def with_act(self, layer: int, qbn: int) -> "PartialPolicy":
        acts = self.acts.copy()
        acts[layer] = qbn
        return PartialPolicy(weights=self.weights.copy(), acts=acts)

    def complete(self, net: NetworkSpec, fill_weight: int, fill_act: int) -> QbnPolicy:
        if self.weights.shape != (net.n_kernels,) or self.acts.shape != (net.n_layer,):
            raise ShapeMismatchError("partial policy does not match the network shape")
        weights = np.where(self.weights == UNDECIDED, fill_weight, self.weights)
        acts = np.where(self.acts == UNDECIDED, fill_act, self.acts)
        return QbnPolicy.from_flat(net, weights, acts)

    @property
    def is_complete(self) -> bool:
        return bool((self.weights != UNDECIDED).all() and (self.acts != UNDECIDED).all())


@dataclass(frozen=True)
class StateVector:
    layer: float
    kernel: float
    c_in: float
    c_out: float
    kernel_size: float
    stride: float
    feature: float
    depthwise: float
    weight_activation: float
    prev_goal: float
    prev_action: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in STATE_FIELDS], dtype=float)


def encode_state(
    net: NetworkSpec,
    layer: int,
    kernel: int,
    phase: Phase,
    prev_goal: float,
    prev_action: float,
) -> StateVector:
    if not 0 <= layer < net.n_layer:
        raise IndexError(f"layer {layer} out of range for {net.n_layer} layers")
    spec = net.layers[layer]
    if not 0 <= kernel < spec.c_out:
        raise IndexError(f"kernel {kernel} out of range for layer {layer} with {spec.c_out} kernels")
    if not (0.0 <= prev_goal <= 1.0 and 0.0 <= prev_action <= 1.0):
        raise ValueError("prev_goal and prev_action must already be normalized to [0, 1]")

    maxima = net.state_maxima
    kernel_size = 1 if spec.kind is LayerKind.FC else spec.kernel_size
    stride = 0 if spec.kind is LayerKind.FC else spec.stride
    return StateVector(
        layer=layer / maxima["layer"],
        kernel=kernel / spec.c_out,
        c_in=spec.c_in / maxima["c_in"],
        c_out=spec.c_out / maxima["c_out"],
        kernel_size=kernel_size / maxima["kernel_size"],
        stride=stride / maxima["stride"] if maxima["stride"] > 0 else 0.0,
        feature=spec.feature_size / maxima["feature"],
        depthwise=1.0 if spec.is_depthwise else 0.0,
        weight_activation=1.0 if phase is Phase.ACTIVATION else 0.0,
        prev_goal=float(prev_goal),
        prev_action=float(prev_action),
    )


def avg_weight_qbn(net: NetworkSpec, policy: QbnPolicy) -> float:
    policy.check_matches(net)
    return float(policy.weight_array().sum() / net.n_kernels)


def avg_act_qbn(net: NetworkSpec, policy: QbnPolicy) -> float:
    policy.check_matches(net)
    return float(np.mean(policy.act_array()))


def layer_avg_weight_qbn(net: NetworkSpec, policy: QbnPolicy) -> list[float]:
    policy.check_matches(net)
    return [sum(kernels) / len(kernels) for kernels in policy.weight_qbn]


# network spec codec

def _as_pair(value: object, where: str) -> tuple[int, int]:
    if isinstance(value, bool):
        raise SpecError("expected an integer or [w, h] pair", field=where)
    if isinstance(value, int):
        return value, value
    if isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return value[0], value[1]
    raise SpecError("expected an integer or [w, h] pair", field=where)


def _require(mapping: Mapping, key: str, where: str, kind: type | tuple[type, ...]) -> object:
    if key not in mapping:
        raise SpecError("missing required key", field=f"{where}.{key}" if where else key)
    value = mapping[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise SpecError(f"expected {getattr(kind, '__name__', kind)}", field=f"{where}.{key}" if where else key)
    return value


def _parse_layer(index: int, raw: object) -> tuple[LayerSpec, tuple[KernelStats, ...], float]:
    where = f"layers[{index}]"
    if not isinstance(raw, dict):
        raise SpecError("layer entry must be an object", field=where)
    kind_token = _require(raw, "kind", where, str)
    try:
        kind = LayerKind(kind_token)
    except ValueError:
        raise SpecError(f"unknown layer kind {kind_token!r}", field=f"{where}.kind") from None
    kernel_w, kernel_h = _as_pair(raw.get("kernel", 1), f"{where}.kernel")
    feat_w, feat_h = _as_pair(raw.get("feature", 1), f"{where}.feature")
    stride = raw.get("stride", 0 if kind is LayerKind.FC else 1)
    if isinstance(stride, bool) or not isinstance(stride, int):
        raise SpecError("expected int", field=f"{where}.stride")
    kernels_raw = _require(raw, "kernels", where, list)
    stats: list[KernelStats] = []
    for kernel_index, entry in enumerate(kernels_raw):
        kernel_where = f"{where}.kernels[{kernel_index}]"
        if not isinstance(entry, dict):
            raise SpecError("kernel entry must be an object", field=kernel_where)
        variance = _require(entry, "variance", kernel_where, (int, float))
        sensitivity = entry.get("sensitivity")
        if sensitivity is not None and (isinstance(sensitivity, bool) or not isinstance(sensitivity, (int, float))):
            raise SpecError("expected a real", field=f"{kernel_where}.sensitivity")
        try:
            stats.append(KernelStats(float(variance), None if sensitivity is None else float(sensitivity)))
        except SpecError as exc:
            raise SpecError(str(exc), field=kernel_where) from None
    act_sensitivity = _require(raw, "act_sensitivity", where, (int, float))
    layer = LayerSpec(
        index=index,
        kind=kind,
        c_in=_require(raw, "c_in", where, int),
        c_out=_require(raw, "c_out", where, int),
        kernel_w=kernel_w,
        kernel_h=kernel_h,
        stride=stride,
        feat_w=feat_w,
        feat_h=feat_h,
        macs_per_kernel=_require(raw, "macs_per_kernel", where, int),
    )
    return layer, tuple(stats), float(act_sensitivity)


def parse_network_spec(text: str) -> NetworkSpec:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(exc.msg, line=exc.lineno) from None
    if not isinstance(document, dict):
        raise SpecError("network spec must be a JSON object")
    name = _require(document, "name", "", str)
    acc_fp = _require(document, "acc_fp", "", (int, float))
    layers_raw = _require(document, "layers", "", list)
    parsed = [_parse_layer(index, raw) for index, raw in enumerate(layers_raw)]

    weights = None
    if document.get("weights") is not None:
        raw_weights = document["weights"]
        if not isinstance(raw_weights, list):
            raise SpecError("weights must be a list per layer", field="weights")
        try:
            weights = tuple(
                tuple(tuple(float(value) for value in kernel) for kernel in layer)
                for layer in raw_weights
            )
        except (TypeError, ValueError):
            raise SpecError("weights must be nested lists of reals", field="weights") from None

    return NetworkSpec(
        name=name,
        layers=tuple(layer for layer, _, _ in parsed),
        kernel_stats=tuple(stats for _, stats, _ in parsed),
        act_sensitivity=tuple(act for _, _, act in parsed),
        acc_fp=float(acc_fp),
        weights=weights,
    )


def serialize_network(net: NetworkSpec) -> str:
    layers = []
    for layer, stats, act in zip(net.layers, net.kernel_stats, net.act_sensitivity):
        kernels = []
        for entry in stats:
            item: dict[str, float] = {"variance": entry.variance}
            if entry.sensitivity is not None:
                item["sensitivity"] = entry.sensitivity
            kernels.append(item)
        layers.append({
            "kind": layer.kind.value,
            "c_in": layer.c_in,
            "c_out": layer.c_out,
            "kernel": [layer.kernel_w, layer.kernel_h],
            "stride": layer.stride,
            "feature": [layer.feat_w, layer.feat_h],
            "macs_per_kernel": layer.macs_per_kernel,
            "act_sensitivity": act,
            "kernels": kernels,
        })
    document: dict[str, object] = {"name": net.name, "acc_fp": net.acc_fp, "layers": layers}
    if net.weights is not None:
        document["weights"] = [[list(kernel) for kernel in layer] for layer in net.weights]
    return json.dumps(document, indent=2)


def load_network_spec(path: Path) -> NetworkSpec:
    return parse_network_spec(Path(path).read_text(encoding="utf-8"))


# policy codec

def pack_policy(policy: QbnPolicy) -> bytes:
    entries = policy.entries()
    payload = bytearray((len(entries) + 1) // 2)
    for position, value in enumerate(entries):
        if not 0 <= value <= QBN_MAX:
            raise PolicyCodecError(f"nibble value {value} > {QBN_MAX}")
        payload[position // 2] |= value << (4 * (position % 2))
    return bytes(payload)


def unpack_policy(payload: bytes, net: NetworkSpec) -> QbnPolicy:
    count = net.n_entries
    if len(payload) != (count + 1) // 2:
        raise PolicyCodecError(f"payload holds {len(payload)} bytes, network needs {(count + 1) // 2}")
    nibbles = []
    for byte in payload:
        nibbles.extend((byte & 0x0F, byte >> 4))
    if count % 2 and nibbles[count] != 0:
        raise PolicyCodecError("non-zero padding nibble")
    nibbles = nibbles[:count]
    for position, value in enumerate(nibbles):
        if value > QBN_MAX:
            raise PolicyCodecError(f"nibble value {value} > {QBN_MAX}", field=f"entry[{position}]")

    acts: list[int] = []
    weights: list[tuple[int, ...]] = []
    cursor = 0
    for layer in net.layers:
        acts.append(nibbles[cursor])
        weights.append(tuple(nibbles[cursor + 1:cursor + 1 + layer.c_out]))
        cursor += 1 + layer.c_out
    try:
        return QbnPolicy(weight_qbn=tuple(weights), act_qbn=tuple(acts))
    except SpecError as exc:
        raise PolicyCodecError(str(exc)) from None


def encode_policy_file(policy: QbnPolicy, net: NetworkSpec) -> bytes:
    policy.check_matches(net)
    name = net.name.encode("utf-8")
    return b"".join((
        POLICY_HEADER.pack(POLICY_MAGIC, POLICY_VERSION, net.n_entries),
        pack_policy(policy),
        POLICY_NAME_LENGTH.pack(len(name)),
        name,
    ))


def decode_policy_file(data: bytes, net: NetworkSpec) -> QbnPolicy:
    if len(data) < POLICY_HEADER.size:
        raise PolicyCodecError("truncated policy header")
    magic, version, count = POLICY_HEADER.unpack_from(data)
    if magic != POLICY_MAGIC:
        raise PolicyCodecError("bad magic, not a policy file")
    if version != POLICY_VERSION:
        raise PolicyCodecError(f"unsupported policy version {version}")
    if count != net.n_entries:
        raise PolicyCodecError(f"policy has {count} entries, network {net.name!r} needs {net.n_entries}")
    payload_end = POLICY_HEADER.size + (count + 1) // 2
    if len(data) < payload_end + POLICY_NAME_LENGTH.size:
        raise PolicyCodecError("truncated policy payload")
    (name_length,) = POLICY_NAME_LENGTH.unpack_from(data, payload_end)
    name_start = payload_end + POLICY_NAME_LENGTH.size
    name = data[name_start:name_start + name_length].decode("utf-8", errors="replace")
    if len(data) != name_start + name_length:
        raise PolicyCodecError("trailing bytes after policy name")
    if name != net.name:
        raise PolicyCodecError(f"policy was packed for {name!r}, not {net.name!r}")
    return unpack_policy(data[POLICY_HEADER.size:payload_end], net)


def policy_to_json(policy: QbnPolicy, net: NetworkSpec) -> str:
    policy.check_matches(net)
    return json.dumps(
        {
            "network": net.name,
            "act_qbn": list(policy.act_qbn),
            "weight_qbn": [list(kernels) for kernels in policy.weight_qbn],
        },
        indent=2,
    )


def policy_from_json(text: str, net: NetworkSpec) -> QbnPolicy:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyCodecError(exc.msg, line=exc.lineno) from None
    if not isinstance(document, dict) or "act_qbn" not in document or "weight_qbn" not in document:
        raise PolicyCodecError("policy JSON needs act_qbn and weight_qbn")
    if document.get("network", net.name) != net.name:
        raise PolicyCodecError(f"policy was written for {document['network']!r}, not {net.name!r}")
    policy = QbnPolicy(
        weight_qbn=tuple(tuple(int(v) for v in kernels) for kernels in document["weight_qbn"]),
        act_qbn=tuple(int(v) for v in document["act_qbn"]),
    )
    policy.check_matches(net)
    return policy


def write_policy_file(path: Path, policy: QbnPolicy, net: NetworkSpec) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_policy_file(policy, net))
    return path


def read_policy_file(path: Path, net: NetworkSpec) -> QbnPolicy:
    path = Path(path)
    if path.suffix == ".json":
        return policy_from_json(path.read_text(encoding="utf-8"), net)
    return decode_policy_file(path.read_bytes(), net)
