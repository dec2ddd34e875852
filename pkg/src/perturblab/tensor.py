"""Tensor kernels and the counter-based random stream.

Tensors are plain ``numpy.float32`` arrays.  Reductions accumulate in
float64 and cast back, so results do not drift with tensor size.

The generator is SplitMix64 used in counter mode: draw ``i`` of a stream
with key ``k`` is ``mix64(k + i * GOLDEN)``.  Any draw can be computed
without producing the ones before it, so independent streams are derived
from (seed, index...) tuples instead of being handed between workers.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a Python int."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _mix64_array(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def derive_seed(seed: int, *indices: int) -> int:
    """Fold indices into a seed; order matters, values are 64-bit."""
    h = mix64((seed & MASK64) ^ GOLDEN)
    for i in indices:
        h = mix64((h + GOLDEN + (i & MASK64) * 0xD1B54A32D192ED03) & MASK64)
    return h


class Rng:
    """Counter-based generator; one owner per instance.

    >>> Rng(7).uniform(2).tolist() == Rng(7).uniform(2).tolist()
    True
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self._key = mix64(self.seed)
        self.counter = 0

    def spawn(self, *indices: int) -> "Rng":
        """Independent child stream keyed by ``indices``; does not advance self."""
        return Rng(derive_seed(self.seed, *indices))

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            x = np.uint64(self._key) + idx * np.uint64(GOLDEN)
            return _mix64_array(x)

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation of ``range(n)`` (sort of random keys)."""
        return np.argsort(self.next_u64(n), kind="stable")


def sample_gaussian(rng: Rng, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
    """``n`` float32 draws from N(mu, sigma) by Box-Muller.

    Consumes ``2 * ceil(n / 2)`` uniforms regardless of ``sigma`` so the
    stream position depends only on the call sequence.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    pairs = (n + 1) // 2
    u = rng.uniform(2 * pairs)
    if sigma == 0:
        return np.full(n, mu, dtype=np.float32)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return (mu + sigma * z[:n]).astype(np.float32)


def tensor_std(t: np.ndarray) -> float:
    """Population standard deviation (divisor N) over the flattened tensor."""
    flat = np.asarray(t, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty tensor")
    mean = flat.sum() / flat.size
    return float(np.sqrt(np.sum((flat - mean) ** 2) / flat.size))


def _check_shapes(cond: bool, a: np.ndarray, b: np.ndarray, what: str) -> None:
    if not cond:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_shapes(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], a, b, "matmul")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[n, h, w, c] -> [n*h*w, k*k*c] patches, zero padded to keep h and w.

    Column order is (dy, dx, c), matching a (k, k, cin, cout) kernel reshaped
    to (k*k*cin, cout).
    """
    p = k // 2
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # [n, h, w, c, k, k] view
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back to the input."""
    p = k // 2
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, k * k * c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for j in range(k * k):
        dy, dx = divmod(j, k)
        out[:, dy:dy + h, dx:dx + w, :] += cols[..., j * c:(j + 1) * c]
    return out[:, p:p + h, p:p + w, :]


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Stride 1, 'same' zero padding.  x: [n, h, w, cin], w: [k, k, cin, cout]."""
    _check_shapes(
        x.ndim == 4 and w.ndim == 4 and w.shape[0] == w.shape[1] and x.shape[3] == w.shape[2],
        x, w, "conv2d",
    )
    k, _, cin, cout = w.shape
    n, h, wd, _ = x.shape
    cols = im2col(x.astype(np.float64), k)
    out = cols @ w.reshape(k * k * cin, cout).astype(np.float64)
    if b is not None:
        out += b.astype(np.float64)
    return out.reshape(n, h, wd, cout).astype(x.dtype)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(np.asarray(x).dtype)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """[n, h, w, c] -> [n, c]"""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [n, h, w, c], got {tuple(x.shape)}")
    return x.astype(np.float64).mean(axis=(1, 2)).astype(x.dtype)


def softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis."""
    x = np.asarray(x)
    z = x.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype)
