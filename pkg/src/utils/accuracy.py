"""
Accuracy oracles.

``proxy_accuracy`` is the fast analytic stand-in for a finetuned quantized
network: every kernel and activation layer loses its sensitivity scaled by the
quantization noise power 2^(-2b). ``frozen_inference_accuracy`` runs the
bundled toy classifier with learned-basis quantized weights and fixed-point
activations, without any finetuning.
"""
from collections.abc import Sequence
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
import json
import logging
import math
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import ShapeMismatchError, SpecError
from utils.model import LayerKind, LayerSpec, NetworkSpec, QbnPolicy
from utils.quantize import dequantize, quantize_learned_basis

logger = logging.getLogger(__name__)

DEFAULT_KAPPA = 0.5
DEFAULT_KAPPA_ACT = 0.2
SENSITIVITY_CAP = 2.0
CALIBRATION_SAMPLES = 32
INFERENCE_MAX_ITERS = 20
PRUNING_PENALTY_MODES: tuple[str, ...] = ("full-sensitivity",)


@dataclass(frozen=True)
class AccuracyModelParams:
    acc_fp: float
    kernel_sensitivity: tuple[tuple[float, ...], ...]
    act_sensitivity: tuple[float, ...]
    pruning_penalty: str = "full-sensitivity"

    def __post_init__(self) -> None:
        if not 0.0 <= self.acc_fp <= 1.0:
            raise SpecError("acc_fp must lie in [0, 1]", field="acc_fp")
        if self.pruning_penalty not in PRUNING_PENALTY_MODES:
            raise SpecError(f"unknown pruning penalty mode {self.pruning_penalty!r}", field="pruning_penalty")
        values = [s for layer in self.kernel_sensitivity for s in layer] + list(self.act_sensitivity)
        if any(not math.isfinite(s) or s < 0 for s in values):
            raise SpecError("sensitivities must be finite and non-negative")
        if sum(values) > SENSITIVITY_CAP + 1e-12:
            raise SpecError(f"sensitivities sum to {sum(values):.4f}, above the cap of {SENSITIVITY_CAP}")

    @cached_property
    def kernel_array(self) -> np.ndarray:
        return np.array([s for layer in self.kernel_sensitivity for s in layer], dtype=float)

    @cached_property
    def act_array(self) -> np.ndarray:
        return np.array(self.act_sensitivity, dtype=float)

    def check_matches(self, policy: QbnPolicy) -> None:
        if len(policy.act_qbn) != len(self.act_sensitivity) or len(policy.weight_qbn) != len(self.kernel_sensitivity):
            raise ShapeMismatchError("policy and accuracy model disagree on the number of layers")
        for layer, (kernels, sensitivities) in enumerate(zip(policy.weight_qbn, self.kernel_sensitivity)):
            if len(kernels) != len(sensitivities):
                raise ShapeMismatchError("policy and accuracy model disagree on kernel count", field=f"layers[{layer}]")


def derive_sensitivities(
    net: NetworkSpec,
    kappa: float = DEFAULT_KAPPA,
    kappa_act: float = DEFAULT_KAPPA_ACT,
) -> AccuracyModelParams:
    """Spread ``kappa`` over kernels by variance x MACs, ``kappa_act`` over layers by act_sensitivity.

    A sensitivity written in the network spec replaces the derived value for that kernel.
    """
    explicit = [stats.sensitivity for layer in net.kernel_stats for stats in layer]
    mass = net.kernel_variances * net.kernel_macs
    total = float(mass.sum())
    if total == 0.0 and any(value is None for value in explicit):
        raise SpecError(f"network {net.name!r} has all-zero variances; give explicit sensitivities")
    derived = kappa * mass / total if total > 0 else np.zeros_like(mass)
    flat = [float(d) if e is None else e for d, e in zip(derived, explicit)]

    offsets = net.kernel_offsets
    kernel_sensitivity = tuple(tuple(flat[offsets[i]:offsets[i + 1]]) for i in range(net.n_layer))

    raw_act = np.array(net.act_sensitivity, dtype=float)
    act_total = float(raw_act.sum())
    act = kappa_act * raw_act / act_total if act_total > 0 else np.zeros_like(raw_act)
    return AccuracyModelParams(
        acc_fp=net.acc_fp,
        kernel_sensitivity=kernel_sensitivity,
        act_sensitivity=tuple(float(value) for value in act),
    )


def proxy_accuracy(params: AccuracyModelParams, policy: QbnPolicy) -> float:
    params.check_matches(policy)
    weights = policy.weight_array()
    acts = policy.act_array()
    loss = float(params.kernel_array @ np.exp2(-2.0 * weights)) + float(params.act_array @ np.exp2(-2.0 * acts))
    return min(max(params.acc_fp - loss, 0.0), 1.0)


def proxy_accuracy_batch(params: AccuracyModelParams, weights: np.ndarray, acts: np.ndarray) -> np.ndarray:
    """Row-wise proxy accuracy for policy matrices (N x kernels, N x layers)."""
    loss = np.exp2(-2.0 * weights) @ params.kernel_array + np.exp2(-2.0 * acts) @ params.act_array
    return np.clip(params.acc_fp - loss, 0.0, 1.0)


# frozen-weight inference

@dataclass(frozen=True)
class LabeledSample:
    features: tuple[float, ...]
    label: int


def parse_dataset(text: str) -> tuple[LabeledSample, ...]:
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(exc.msg, line=exc.lineno) from None
    if not isinstance(document, list):
        raise SpecError("dataset must be a JSON array of samples")
    samples = []
    for index, entry in enumerate(document):
        if not isinstance(entry, dict) or "features" not in entry or "label" not in entry:
            raise SpecError("sample needs features and label", field=f"[{index}]")
        samples.append(LabeledSample(tuple(float(v) for v in entry["features"]), int(entry["label"])))
    return tuple(samples)


def load_dataset(path: Path) -> tuple[LabeledSample, ...]:
    return parse_dataset(Path(path).read_text(encoding="utf-8"))


def _layer_forward(layer: LayerSpec, kernels: np.ndarray, x: np.ndarray) -> np.ndarray:
    if layer.kind is LayerKind.FC:
        flat = x.reshape(-1)
        if flat.size != layer.c_in:
            raise SpecError(f"layer expects {layer.c_in} inputs, got {flat.size}", field=f"layers[{layer.index}]")
        return kernels @ flat
    expected = layer.c_in * layer.feat_h * layer.feat_w
    if x.size != expected:
        raise SpecError(f"layer expects {expected} inputs, got {x.size}", field=f"layers[{layer.index}]")
    maps = x.reshape(layer.c_in, layer.feat_h, layer.feat_w)
    windows = sliding_window_view(maps, (layer.kernel_h, layer.kernel_w), axis=(1, 2))
    windows = windows[:, ::layer.stride, ::layer.stride]
    if layer.is_depthwise:
        return np.einsum("cyxij,cij->cyx", windows, kernels.reshape(layer.c_out, layer.kernel_h, layer.kernel_w))
    return np.einsum(
        "cyxij,kcij->kyx",
        windows,
        kernels.reshape(layer.c_out, layer.c_in, layer.kernel_h, layer.kernel_w),
    )


def _quantize_activations(x: np.ndarray, bits: int, scale: float) -> np.ndarray:
    if scale <= 0.0:
        return np.zeros_like(x)
    step = scale / ((1 << bits) - 1)
    return np.round(np.clip(x, 0.0, scale) / step) * step


def _layer_kernels(net: NetworkSpec, policy: QbnPolicy | None, max_iters: int) -> list[np.ndarray]:
    if net.weights is None:
        raise SpecError(f"network {net.name!r} carries no weights for inference", field="weights")
    layers = []
    for index, layer in enumerate(net.layers):
        kernels = np.array(net.weights[index], dtype=float)
        if policy is not None:
            for kernel, bits in enumerate(policy.weight_qbn[index]):
                if bits == 0:
                    kernels[kernel] = 0.0
                else:
                    kernels[kernel] = dequantize(quantize_learned_basis(kernels[kernel], bits, max_iters))
        layers.append(kernels)
    return layers


def _run(
    net: NetworkSpec,
    kernels: Sequence[np.ndarray],
    features: Sequence[float],
    act_qbn: Sequence[int] | None = None,
    scales: Sequence[float] | None = None,
    inputs: list[float] | None = None,
) -> np.ndarray:
    x = np.asarray(features, dtype=float)
    for index, layer in enumerate(net.layers):
        if inputs is not None:
            inputs[index] = max(inputs[index], float(np.max(x, initial=0.0)))
        if act_qbn is not None:
            x = _quantize_activations(x, act_qbn[index], scales[index])
        x = _layer_forward(layer, kernels[index], x)
        if index < net.n_layer - 1:
            x = np.maximum(x, 0.0)
    # global average pooling when the head is convolutional
    return x.reshape(net.layers[-1].c_out, -1).mean(axis=1)


def calibrate_activation_scales(
    net: NetworkSpec,
    samples: Sequence[LabeledSample],
    count: int = CALIBRATION_SAMPLES,
) -> list[float]:
    kernels = _layer_kernels(net, None, INFERENCE_MAX_ITERS)
    maxima = [0.0] * net.n_layer
    for sample in samples[:count]:
        _run(net, kernels, sample.features, inputs=maxima)
    return maxima


def predict_labels(
    net: NetworkSpec,
    policy: QbnPolicy | None,
    samples: Sequence[LabeledSample],
    max_iters: int = INFERENCE_MAX_ITERS,
) -> list[int]:
    """Top-1 labels; ``policy=None`` runs the full-precision network."""
    if policy is not None:
        policy.check_matches(net)
    kernels = _layer_kernels(net, policy, max_iters)
    scales = None if policy is None else calibrate_activation_scales(net, samples)
    act_qbn = None if policy is None else policy.act_qbn
    return [int(np.argmax(_run(net, kernels, s.features, act_qbn, scales))) for s in samples]


def frozen_inference_accuracy(
    net: NetworkSpec,
    policy: QbnPolicy,
    dataset: Sequence[LabeledSample],
    max_iters: int = INFERENCE_MAX_ITERS,
) -> float:
    if not dataset:
        raise ValueError("dataset is empty")
    predictions = predict_labels(net, policy, dataset, max_iters)
    hits = sum(int(p == s.label) for p, s in zip(predictions, dataset))
    accuracy = hits / len(dataset)
    logger.info("frozen inference accuracy on %d samples: %.4f", len(dataset), accuracy)
    return accuracy
