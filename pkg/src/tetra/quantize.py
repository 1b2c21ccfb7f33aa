"""Quantization primitives.

Ternary weight quantization with an abs-mean scale, symmetric per-token INT8
activation quantization, sign binarization of embeddings, the straight-through
weight gradient, and the sigmoid progressive-quantization schedule.

All functions are pure; rounding is half-away-from-zero everywhere so results
are identical across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Offset added to the abs-mean scale before dividing, so exact zeros stay zero.
TERNARY_EPS = 1e-6


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero (unlike np.round)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ---------------------------------------------------------------------------
# ternary weights
# ---------------------------------------------------------------------------


@dataclass
class TernaryTensor:
    """Ternary codes in {-1, 0, +1} plus a single nonnegative scale.

    The dequantized value of element i is exactly ``gamma * codes[i]``.
    ``gamma`` is kept at float32 precision so packed files round-trip
    bit-exactly.
    """

    shape: tuple[int, ...]
    codes: np.ndarray  # int8, logical values in {-1, 0, +1}
    gamma: float

    def __post_init__(self):
        self.shape = tuple(self.shape)
        self.codes = np.asarray(self.codes, dtype=np.int8).reshape(self.shape)
        self.gamma = float(self.gamma)
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        bad = np.setdiff1d(np.unique(self.codes), [-1, 0, 1])
        if bad.size:
            raise ValueError(f"non-ternary codes present: {bad.tolist()}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, TernaryTensor):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.gamma == other.gamma
            and np.array_equal(self.codes, other.codes)
        )


def ternary_quantize(w) -> TernaryTensor:
    """Quantize a weight matrix to {-1, 0, +1} times its abs-mean scale.

    gamma is the mean absolute value of ``w``; codes are
    ``round(clamp(w / (gamma + eps), -1, 1))`` with half-away rounding.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot quantize an empty matrix")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    gamma = float(np.float32(np.mean(np.abs(w))))
    codes = round_half_away(np.clip(w / (gamma + TERNARY_EPS), -1.0, 1.0))
    return TernaryTensor(shape=w.shape, codes=codes.astype(np.int8), gamma=gamma)


def ternary_dequantize(t: TernaryTensor) -> np.ndarray:
    """Exact inverse map: element i -> gamma * codes[i]."""
    return t.gamma * t.codes.astype(np.float64)


# ---------------------------------------------------------------------------
# int8 activations
# ---------------------------------------------------------------------------


@dataclass
class QuantizedActivation:
    """Per-token symmetric INT8 codes: one scale per token row."""

    codes: np.ndarray  # int8, shape (tokens, channels)
    scales: np.ndarray  # float64, shape (tokens,)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int8)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.codes.ndim != 2:
            raise ValueError("codes must be 2-D (tokens, channels)")
        if self.scales.shape != (self.codes.shape[0],):
            raise ValueError("need exactly one scale per token row")
        if np.any(self.scales < 0):
            raise ValueError("scales must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


def act_quantize(x, bits: int = 8) -> QuantizedActivation:
    """Quantize activations row-wise to signed ``bits``-bit integers.

    Each token row j gets scale ``s_j = max|x_j| / (2^(bits-1) - 1)``;
    codes are ``round(x_j / s_j)`` clamped to the signed range. An all-zero
    row gets s_j = 0 and zero codes.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("activations must be 2-D (tokens, channels)")
    if not np.all(np.isfinite(x)):
        raise ValueError("activations must be finite")
    if not 2 <= bits <= 8:
        raise ValueError(f"bit-width must be in [2, 8], got {bits}")
    qmax = 2 ** (bits - 1) - 1
    scales = np.max(np.abs(x), axis=1) / qmax
    safe = np.where(scales > 0, scales, 1.0)
    codes = round_half_away(x / safe[:, None])
    codes = np.clip(codes, -qmax, qmax).astype(np.int8)
    codes[scales == 0] = 0
    return QuantizedActivation(codes=codes, scales=scales)


def act_dequantize(q: QuantizedActivation) -> np.ndarray:
    """Reconstruct activations: element = s_j * code (error at most s_j/2)."""
    return q.scales[:, None] * q.codes.astype(np.float64)


# ---------------------------------------------------------------------------
# progressive schedule
# ---------------------------------------------------------------------------


@dataclass
class QuantSchedule:
    """Sigmoid blend schedule lambda(t) = sigmoid(alpha * t - beta)."""

    alpha: float
    beta: float
    step: int = 0

    def at(self, step: int) -> "QuantSchedule":
        return QuantSchedule(alpha=self.alpha, beta=self.beta, step=step)

    @staticmethod
    def from_endpoints(total_steps: int, lam0: float = 0.01, lam_hi: float = 0.99,
                       hi_fraction: float = 0.6) -> "QuantSchedule":
        """Schedule that starts at lam0 and reaches lam_hi at
        ``hi_fraction * total_steps``."""
        if not 0 < lam0 < lam_hi < 1:
            raise ValueError("need 0 < lam0 < lam_hi < 1")
        beta = np.log(1.0 / lam0 - 1.0)
        t_hi = max(1.0, hi_fraction * total_steps)
        alpha = (beta + np.log(lam_hi / (1.0 - lam_hi))) / t_hi
        return QuantSchedule(alpha=float(alpha), beta=float(beta))


def lambda_schedule(sched: QuantSchedule) -> float:
    """Evaluate the blend fraction at the schedule's current step."""
    if sched.alpha <= 0:
        raise ValueError("alpha must be positive")
    z = sched.alpha * sched.step - sched.beta
    # numerically stable sigmoid; exact 0.5 at z == 0
    if z >= 0:
        return float(1.0 / (1.0 + np.exp(-z)))
    ez = np.exp(z)
    return float(ez / (1.0 + ez))


def blend_weights(w, lam: float) -> np.ndarray:
    """Progressive effective weights: (1 - lam) * w + lam * dequant(quant(w))."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    w = np.asarray(w, dtype=np.float64)
    return (1.0 - lam) * w + lam * ternary_dequantize(ternary_quantize(w))


def ste_weight_grad(grad_out, w, gamma: float) -> np.ndarray:
    """Straight-through weight gradient: pass where |w| <= gamma, else zero."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if grad_out.shape != w.shape:
        raise ValueError(f"shape mismatch: {grad_out.shape} vs {w.shape}")
    return grad_out * (np.abs(w) <= gamma)


# ---------------------------------------------------------------------------
# binary embeddings
# ---------------------------------------------------------------------------


@dataclass
class BinaryEmbedding:
    """A D-bit sign vector packed into 64-bit words.

    Bit i lives in word i // 64 at position i % 64; bit 1 means sign +1 and
    bit 0 means sign -1. Trailing bits of the last word are zero.
    """

    dim: int
    words: np.ndarray = field(repr=False)  # uint64, length ceil(dim / 64)

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype=np.uint64)
        n_words = (self.dim + 63) // 64
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.words.shape != (n_words,):
            raise ValueError(f"expected {n_words} words for dim {self.dim}")
        pad = n_words * 64 - self.dim
        if pad and int(self.words[-1]) >> (64 - pad) != 0:
            raise ValueError("trailing pad bits must be zero")

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BinaryEmbedding":
        bits = np.asarray(bits, dtype=np.uint8)
        packed = np.packbits(bits, bitorder="little")
        padded = np.zeros(((bits.size + 63) // 64) * 8, dtype=np.uint8)
        padded[: packed.size] = packed
        return cls(dim=bits.size, words=padded.view("<u8"))

    def to_bits(self) -> np.ndarray:
        as_bytes = self.words.astype("<u8").view(np.uint8)
        return np.unpackbits(as_bytes, bitorder="little")[: self.dim]

    def to_signs(self) -> np.ndarray:
        """The +-1.0 vector this embedding encodes."""
        return self.to_bits().astype(np.float64) * 2.0 - 1.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryEmbedding):
            return NotImplemented
        return self.dim == other.dim and np.array_equal(self.words, other.words)


def sign_binarize(y) -> BinaryEmbedding:
    """Binarize a real vector by sign: bit i is 1 iff y_i > 0 (0 maps to -1)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("cannot binarize an empty vector")
    if not np.all(np.isfinite(y)):
        raise ValueError("embedding must be finite")
    return BinaryEmbedding.from_bits(y > 0)
