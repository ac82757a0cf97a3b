"""Dense vector/matrix primitives, activations and a deterministic RNG.

Everything downstream (model, training, retrieval) is built on the small
set of operations in this module.  Vectors and matrices are plain numpy
arrays: float64 by default, float32 as an opt-in speed mode.  Gradient
checking requires float64.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

SCALED_TANH_GAIN = 1.7159
SCALED_TANH_SLOPE = 2.0 / 3.0


class Rng:
    """Counter-based splitmix64 generator.

    The same seed yields the same stream on every platform, whether values
    are drawn one at a time or in bulk, which is what makes training runs
    and synthetic corpora byte-reproducible.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = 0

    @staticmethod
    def _mix(z: np.ndarray) -> np.ndarray:
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def next_u64_array(self, n: int) -> np.ndarray:
        """Next n raw 64-bit values as a uint64 array."""
        base = np.uint64(self.seed)
        ks = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return self._mix(base + ks * _GOLDEN)

    def next_u64(self) -> int:
        return int(self.next_u64_array(1)[0])

    def random(self) -> float:
        """Uniform float in [0, 1) with 53-bit resolution."""
        return (self.next_u64() >> 11) * 2.0 ** -53

    def random_array(self, n: int) -> np.ndarray:
        return (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform(self, low: float, high: float, n: int | None = None):
        if n is None:
            return low + (high - low) * self.random()
        return low + (high - low) * self.random_array(n)

    def randint(self, n: int) -> int:
        """Integer in [0, n).  Modulo bias is negligible for n << 2**64."""
        if n <= 0:
            raise ValueError("randint bound must be positive")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items, k: int) -> list:
        """k items sampled without replacement, order deterministic."""
        if k > len(items):
            raise ValueError("cannot sample %d items from %d" % (k, len(items)))
        pool = list(items)
        self.shuffle(pool)
        return pool[:k]

    def spawn(self) -> "Rng":
        """Derive an independent child generator from this stream."""
        return Rng(self.next_u64())


def assert_finite(arr: np.ndarray, name: str = "array") -> None:
    """Raise if any entry is NaN or infinite."""
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Matrix-vector product with an explicit dimension check."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"matvec shape mismatch: {m.shape} x {v.shape}")
    return m @ v


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(v, 0)


def sigmoid(v: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def scaled_tanh(v: np.ndarray) -> np.ndarray:
    """1.7159 * tanh(2x/3), the multimodal-layer activation."""
    return SCALED_TANH_GAIN * np.tanh(SCALED_TANH_SLOPE * v)


def scaled_tanh_grad_from_output(out: np.ndarray) -> np.ndarray:
    """Derivative of scaled_tanh expressed through its output value."""
    t = out / SCALED_TANH_GAIN
    return (SCALED_TANH_GAIN * SCALED_TANH_SLOPE) * (1.0 - t * t)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Probability vector from logits, max-subtracted for overflow safety."""
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - math.log(np.exp(shifted).sum())


def init_matrix(rows: int, cols: int, scheme: str, rng: Rng,
                scale: float | None = None, dtype=np.float64) -> np.ndarray:
    """Fresh (rows, cols) weight matrix drawn from a named scheme.

    ``zeros``    all-zero matrix (used for biases and ablations).
    ``uniform``  i.i.d. uniform on [-a, a]; a defaults to
                 sqrt(6 / (rows + cols)), the variance-preserving choice.
    """
    if rows <= 0 or cols <= 0:
        raise ValueError("matrix dims must be positive")
    if scheme == "zeros":
        return np.zeros((rows, cols), dtype=dtype)
    if scheme == "uniform":
        a = scale if scale is not None else math.sqrt(6.0 / (rows + cols))
        flat = rng.uniform(-a, a, rows * cols)
        return flat.reshape(rows, cols).astype(dtype)
    raise ValueError(f"unknown init scheme: {scheme!r}")
