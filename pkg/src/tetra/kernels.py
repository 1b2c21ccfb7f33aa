"""Bit-packed ternary storage and integer matmul kernels.

Four ternary codes are packed per byte. Element i occupies bits
``2*(i % 4)`` of byte ``i // 4`` in row-major element order, encoded as

    0b00 -> 0      0b01 -> +1      0b11 -> -1      0b10 -> invalid

The unused 0b10 pattern makes corruption detectable; trailing pad fields in
the final byte are 0b00. One float32 scale rides along per tensor, so the
packed footprint is ``ceil(n / 4) + 4`` bytes against ``4 * n`` for float32.

The matmul accumulates weight codes against INT8 activation codes exactly in
integers (adds and subtracts only; the bound ``K <= 2^23`` keeps int32 exact)
and applies one scale multiply per output element at the end. A deliberately
naive add-only kernel pins the semantics; the fast kernel must agree with it
bit-exactly.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError, NumericError
from .quantize import QuantizedActivation, TernaryTensor, act_dequantize

# int32 accumulators stay exact while K * 127 < 2^31; enforced with margin.
MAX_INNER_DIM = 2**23

_FIELD_OF_CODE = {0: 0b00, 1: 0b01, -1: 0b11}
_CODE_OF_FIELD = np.array([0, 1, 127, -1], dtype=np.int8)  # index 2 is invalid


@dataclass
class PackedTernary:
    """A 2-bit packed ternary matrix with its float32 scale."""

    rows: int
    cols: int
    data: np.ndarray  # uint8, length ceil(rows * cols / 4)
    gamma: float

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        expected = (self.rows * self.cols + 3) // 4
        if self.data.shape != (expected,):
            raise ValueError(f"expected {expected} packed bytes, got {self.data.shape}")

    @property
    def nbytes(self) -> int:
        """Packed payload plus the 4-byte scale."""
        return self.data.nbytes + 4

    def __eq__(self, other) -> bool:
        if not isinstance(other, PackedTernary):
            return NotImplemented
        return (
            (self.rows, self.cols) == (other.rows, other.cols)
            and self.gamma == other.gamma
            and np.array_equal(self.data, other.data)
        )


def pack(t: TernaryTensor) -> PackedTernary:
    """Pack ternary codes at 2 bits per element, 4 per byte."""
    if len(t.shape) == 1:
        rows, cols = 1, t.shape[0]
    elif len(t.shape) == 2:
        rows, cols = t.shape
    else:
        raise ValueError("only 1-D or 2-D ternary tensors can be packed")
    flat = t.codes.ravel()
    n = flat.size
    fields = np.zeros(((n + 3) // 4) * 4, dtype=np.uint8)
    fields[:n] = flat.view(np.uint8) & 0b11  # two's complement: -1 -> 0b11
    data = fields[0::4] | (fields[1::4] << 2) | (fields[2::4] << 4) | (fields[3::4] << 6)
    return PackedTernary(rows=rows, cols=cols, data=data, gamma=float(np.float32(t.gamma)))


def unpack(p: PackedTernary) -> TernaryTensor:
    """Inverse of :func:`pack`; raises on any 0b10 field.

    Always returns a (rows, cols) tensor; 1-D inputs to pack come back (1, n).
    """
    codes = unpack_codes(p)
    shape = (p.rows, p.cols)
    return TernaryTensor(shape=shape, codes=codes.reshape(shape), gamma=p.gamma)


def unpack_codes(p: PackedTernary) -> np.ndarray:
    """Decode the packed buffer to a flat int8 code array of length rows*cols."""
    n = p.rows * p.cols
    fields = np.empty((p.data.size, 4), dtype=np.uint8)
    for k in range(4):
        fields[:, k] = (p.data >> (2 * k)) & 0b11
    fields = fields.ravel()
    if np.any(fields == 0b10):
        raise DataFormatError("corrupt packed ternary data: 0b10 field encountered")
    return _CODE_OF_FIELD[fields[:n]]


def _accumulate_fast(wcodes: np.ndarray, acodes: np.ndarray) -> np.ndarray:
    # float64 matmul is exact for these integer ranges and uses BLAS; the
    # result is cast back to the int32 accumulator domain.
    acc = wcodes.astype(np.float64) @ acodes.T.astype(np.float64)
    return acc.astype(np.int32)


def _accumulate_reference(wcodes: np.ndarray, acodes: np.ndarray) -> np.ndarray:
    # Semantics oracle: per weight row, add activations where the code is +1,
    # subtract where it is -1, skip zeros. No multiply anywhere.
    m = wcodes.shape[0]
    n = acodes.shape[0]
    acc = np.zeros((m, n), dtype=np.int32)
    for i in range(m):
        plus = wcodes[i] == 1
        minus = wcodes[i] == -1
        acc[i] = acodes[:, plus].sum(axis=1, dtype=np.int32) - acodes[:, minus].sum(
            axis=1, dtype=np.int32
        )
    return acc


def ternary_matmul(p: PackedTernary, a: QuantizedActivation, kernel: str = "fast") -> np.ndarray:
    """Multiply packed ternary weights (M, K) by quantized tokens (N, K).

    Returns the (M, N) real matrix ``gamma * s_n * sum_k w[m,k] * a[n,k]``.
    ``kernel`` selects the fast integer path or the add-only reference.
    """
    if p.cols != a.shape[1]:
        raise ValueError(f"inner dimensions disagree: weights K={p.cols}, activations C={a.shape[1]}")
    if p.cols > MAX_INNER_DIM:
        raise NumericError(f"inner dimension {p.cols} exceeds the int32 overflow bound {MAX_INNER_DIM}")
    wcodes = unpack_codes(p).reshape(p.rows, p.cols)
    if kernel == "fast":
        acc = _accumulate_fast(wcodes, a.codes)
    elif kernel == "reference":
        acc = _accumulate_reference(wcodes, a.codes)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    return acc.astype(np.float64) * (p.gamma * a.scales)[None, :]


def ternary_accumulate(p: PackedTernary, a: QuantizedActivation, kernel: str = "fast") -> np.ndarray:
    """The raw int32 accumulator, exposed for kernel-equivalence testing."""
    wcodes = unpack_codes(p).reshape(p.rows, p.cols)
    if kernel == "fast":
        return _accumulate_fast(wcodes, a.codes)
    return _accumulate_reference(wcodes, a.codes)


# ---------------------------------------------------------------------------
# benchmark harness
# ---------------------------------------------------------------------------

BENCH_MATMUL_COLUMNS = ["kernel", "m", "k", "n", "median_ns", "p10_ns", "p90_ns", "bytes_weights"]


def _time_ns(fn, repeats: int) -> tuple[float, float, float]:
    fn()  # warm-up
    samples = np.empty(repeats, dtype=np.float64)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    return (
        float(np.median(samples)),
        float(np.percentile(samples, 10)),
        float(np.percentile(samples, 90)),
    )


def benchmark_matmul(sizes, repeats: int, seed: int = 0) -> list[dict]:
    """Time the ternary integer matmul against float32 matmul at equal shapes.

    ``sizes`` is an iterable of (m, k, n); returns one record per kernel per
    size with median/p10/p90 wall times and the weight-bytes footprint.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    from .quantize import act_quantize, ternary_quantize

    rng = np.random.default_rng(seed)
    records = []
    for m, k, n in sizes:
        if min(m, k, n) < 1:
            raise ValueError("matmul sizes must be positive")
        w = rng.standard_normal((m, k))
        x = rng.standard_normal((n, k))
        packed = pack(ternary_quantize(w))
        qa = act_quantize(x)
        wf = (packed.gamma * unpack_codes(packed).reshape(m, k)).astype(np.float32)
        xf = act_dequantize(qa).astype(np.float32)

        med, p10, p90 = _time_ns(lambda: ternary_matmul(packed, qa), repeats)
        records.append(
            dict(kernel="ternary", m=m, k=k, n=n, median_ns=med, p10_ns=p10,
                 p90_ns=p90, bytes_weights=packed.nbytes)
        )
        med, p10, p90 = _time_ns(lambda: wf @ xf.T, repeats)
        records.append(
            dict(kernel="float32", m=m, k=k, n=n, median_ns=med, p10_ns=p10,
                 p90_ns=p90, bytes_weights=wf.nbytes)
        )
    return records


def bench_records_to_csv(records: list[dict], columns: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow({c: _fmt_cell(rec[c]) for c in columns})
    return buf.getvalue()


def _fmt_cell(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v
