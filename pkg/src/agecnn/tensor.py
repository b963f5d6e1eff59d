"""Dense float32 tensors and the primitive numeric operations layers build on.

Tensors are plain numpy arrays in row-major order. Activations use the
N x C x H x W layout (batch, channels, height, width); convolution weights use
OutC x InC x kH x kW. Arrays are treated as immutable once written: operations
return new arrays and never modify their inputs in place.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError

DTYPE = np.float32


class Rng:
    """Deterministic, seedable random stream (PCG64 behind numpy Generator).

    The same seed always reproduces the same stream, independent of platform.
    ``derive`` builds statistically independent child streams from integer
    keys, so one top-level seed can drive every random component of a run.
    """

    def __init__(self, seed, _key=None):
        if _key is None:
            seed = int(seed)
            if seed < 0 or seed >= 2**64:
                raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
            _key = (seed,)
        self.key = _key
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(_key)))

    def derive(self, *subkeys: int) -> "Rng":
        """Child stream keyed by (this stream's key, *subkeys)."""
        return Rng(None, _key=self.key + tuple(int(k) for k in subkeys))

    def normal(self, shape, mean=0.0, std=1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int) -> int:
        """One integer drawn uniformly from [low, high)."""
        return int(self._gen.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _check_shape(shape):
    shape = tuple(int(e) for e in shape)
    if len(shape) == 0:
        raise ShapeError("tensor shape must have at least one extent")
    for e in shape:
        if e < 1:
            raise ShapeError(f"tensor extents must be >= 1, got shape {shape}")
    return shape


def create(shape, fill: float = 0.0) -> np.ndarray:
    """New float32 tensor of the given shape with every element equal to fill."""
    return np.full(_check_shape(shape), fill, dtype=DTYPE)


def gaussian_fill(t: np.ndarray, mean: float, std: float, rng: Rng) -> np.ndarray:
    """Tensor with t's shape whose elements are i.i.d. normal(mean, std^2).

    std = 0 degenerates to a constant fill with mean. Deterministic given the
    rng's seed.
    """
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    return rng.normal(t.shape, mean, std).astype(DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D matrix product c[i,j] = sum_p a[i,p] * b[p,j]."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def pad2d(t: np.ndarray, pad: int) -> np.ndarray:
    """Zero border of width pad on the two trailing (spatial) axes of NxCxHxW."""
    if t.ndim != 4:
        raise ShapeError(f"pad2d expects a 4-D tensor, got shape {t.shape}")
    if pad < 0:
        raise ParameterError(f"pad must be >= 0, got {pad}")
    if pad == 0:
        return t
    return np.pad(t, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def argmax(v: np.ndarray) -> int:
    """Index of the maximum of a 1-D tensor; ties break to the lowest index."""
    if v.ndim != 1 or v.shape[0] < 1:
        raise ShapeError(f"argmax expects a nonempty 1-D tensor, got shape {v.shape}")
    return int(np.argmax(v))
