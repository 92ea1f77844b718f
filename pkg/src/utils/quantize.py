"""
Per-kernel weight quantizers.

Both quantizers express a kernel as ``w ~ codes @ basis`` where ``codes`` holds
one {-1, +1} sign per basis entry and weight. The uniform quantizer fixes the
basis to powers of two times a step size; the learned-basis quantizer
alternates between the optimal codes for a fixed basis and the least-squares
basis for fixed codes.
"""
from collections.abc import Sequence
from dataclasses import dataclass
from itertools import product
from pathlib import Path
import logging
import sys

SRC_PATH = Path(__file__).resolve().parents[1]
if str(SRC_PATH) not in sys.path:
    sys.path.append(str(SRC_PATH))

import numpy as np

from utils.model import QBN_MAX

logger = logging.getLogger(__name__)

EPS = 1e-12
MIN_BITS = 1
DEFAULT_MAX_ITERS = 50
REL_TOLERANCE = 1e-9

# every sign pattern for each bit width, first column most significant
SIGN_TABLES: dict[int, np.ndarray] = {
    bits: np.array(list(product((-1, 1), repeat=bits)), dtype=np.int8)
    for bits in range(MIN_BITS, QBN_MAX + 1)
}


@dataclass(frozen=True, eq=False)
class QuantizedKernel:
    bits: int
    basis: np.ndarray
    codes: np.ndarray

    def __post_init__(self) -> None:
        if not MIN_BITS <= self.bits <= QBN_MAX:
            raise ValueError(f"bits must lie in [{MIN_BITS}, {QBN_MAX}], got {self.bits}")
        if self.basis.shape != (self.bits,):
            raise ValueError("basis must hold one scaling factor per bit")
        if (self.basis <= 0).any() or (np.diff(self.basis) > 0).any():
            raise ValueError("basis must be strictly positive and sorted descending")
        if self.codes.ndim != 2 or self.codes.shape[1] != self.bits:
            raise ValueError("codes must hold one sign per bit and weight")
        if not np.isin(self.codes, (-1, 1)).all():
            raise ValueError("codes must be -1 or +1")


def _check_inputs(weights: Sequence[float], bits: int) -> np.ndarray:
    values = np.asarray(weights, dtype=float).reshape(-1)
    if values.size == 0:
        raise ValueError("cannot quantize an empty kernel")
    if not MIN_BITS <= bits <= QBN_MAX:
        raise ValueError(f"bits must lie in [{MIN_BITS}, {QBN_MAX}], got {bits}")
    return values


def dequantize(q: QuantizedKernel) -> np.ndarray:
    return q.codes.astype(float) @ q.basis


def quantization_mse(weights: Sequence[float], q: QuantizedKernel) -> float:
    values = np.asarray(weights, dtype=float).reshape(-1)
    residual = values - dequantize(q)
    return float(np.mean(residual * residual))


def quantize_uniform(weights: Sequence[float], bits: int) -> QuantizedKernel:
    """Symmetric uniform quantizer; every weight lands within one step of its level."""
    values = _check_inputs(weights, bits)
    top = (1 << bits) - 1
    step = max(float(np.max(np.abs(values))) / top, EPS)
    basis = step * np.power(2.0, np.arange(bits - 1, -1, -1))

    # levels are the odd multiples of step in [-top, top]
    odd = np.clip(2 * np.floor(values / (2 * step)) + 1, -top, top)
    index = ((odd + top) // 2).astype(np.int64)
    shifts = np.arange(bits - 1, -1, -1)
    codes = (2 * ((index[:, None] >> shifts) & 1) - 1).astype(np.int8)
    return QuantizedKernel(bits=bits, basis=basis, codes=codes)


def _optimal_codes(values: np.ndarray, basis: np.ndarray) -> np.ndarray:
    table = SIGN_TABLES[basis.size]
    levels = table.astype(float) @ basis
    choice = np.argmin(np.abs(values[:, None] - levels[None, :]), axis=1)
    return table[choice]


def _fit_basis(values: np.ndarray, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    solution, *_ = np.linalg.lstsq(codes.astype(float), values, rcond=None)
    signs = np.where(solution < 0, -1, 1).astype(np.int8)
    basis = np.maximum(np.abs(solution), EPS)
    codes = codes * signs[None, :]
    order = np.argsort(-basis, kind="stable")
    return basis[order], codes[:, order]


def _mse(values: np.ndarray, basis: np.ndarray, codes: np.ndarray) -> float:
    residual = values - codes.astype(float) @ basis
    return float(np.mean(residual * residual))


def _alternate(values: np.ndarray, basis: np.ndarray, max_iters: int) -> tuple[np.ndarray, np.ndarray, list[float]]:
    codes = _optimal_codes(values, basis)
    history = [_mse(values, basis, codes)]
    for _ in range(max_iters):
        new_basis, new_codes = _fit_basis(values, codes)
        new_codes = _optimal_codes(values, new_basis)
        mse = _mse(values, new_basis, new_codes)
        previous = history[-1]
        if mse > previous:
            # EPS floor on a vanishing basis entry
            break
        basis, codes = new_basis, new_codes
        history.append(mse)
        if previous == 0.0 or (previous - mse) / previous < REL_TOLERANCE:
            break
    return basis, codes, history


def quantize_learned_basis(
    weights: Sequence[float],
    bits: int,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> QuantizedKernel:
    """Alternating code/basis least-squares fit started from the uniform solution.

    For bits > 1 a second start extends the (bits - 1) solution with an
    EPS-sized basis entry, so the result is never worse than the next lower
    bit width.
    """
    values = _check_inputs(weights, bits)
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    starts = [quantize_uniform(values, bits).basis]
    if bits > MIN_BITS:
        lower = quantize_learned_basis(values, bits - 1, max_iters)
        starts.append(np.append(lower.basis, EPS))

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    for start in starts:
        basis, codes, history = _alternate(values, start, max_iters)
        logger.debug("learned basis bits=%d start=%s mse %s -> %s", bits, start[:2], history[0], history[-1])
        if best is None or history[-1] < best[0]:
            best = (history[-1], basis, codes)
    _, basis, codes = best
    return QuantizedKernel(bits=bits, basis=basis, codes=codes)


def learned_basis_history(weights: Sequence[float], bits: int, max_iters: int = DEFAULT_MAX_ITERS) -> list[float]:
    """MSE after every accepted alternating step from the uniform start."""
    values = _check_inputs(weights, bits)
    _, _, history = _alternate(values, quantize_uniform(values, bits).basis, max_iters)
    return history
