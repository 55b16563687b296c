"""Dense real and complex array types plus the shared numerical kernels.

``Tensor`` holds a row-major float64 array; ``ComplexTensor`` holds the
(re, im) pair produced by the 2-D FFT. Both are immutable views in spirit:
nothing in the package mutates a value after construction, so instances
are safe to share across threads.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels as K
from .errors import ConfigError, NumericError, ShapeError


class Tensor:
    """A float64 array with validated shape.

    Invariants: every shape entry is >= 1 and the flat data length equals
    the product of the shape.
    """

    __slots__ = ("array",)

    def __init__(self, array) -> None:
        arr = K.as_f64(array)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the payload."""
        return self.array.reshape(-1)

    @classmethod
    def zeros(cls, shape: Sequence[int]) -> "Tensor":
        return cls(np.zeros(shape))

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "Tensor":
        return cls(np.full(shape, float(value)))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class ComplexTensor:
    """Real/imaginary pair of equal-shape float64 arrays."""

    __slots__ = ("_z",)

    def __init__(self, re, im) -> None:
        re = K.as_f64(re)
        im = K.as_f64(im)
        if re.shape != im.shape:
            raise ShapeError(f"re/im shapes differ: {re.shape} vs {im.shape}")
        self._z = re + 1j * im

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexTensor":
        out = cls.__new__(cls)
        out._z = np.ascontiguousarray(z, dtype=np.complex128)
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self._z.shape

    @property
    def re(self) -> np.ndarray:
        return np.ascontiguousarray(self._z.real)

    @property
    def im(self) -> np.ndarray:
        return np.ascontiguousarray(self._z.imag)

    @property
    def complex(self) -> np.ndarray:
        return self._z

    def __repr__(self) -> str:
        return f"ComplexTensor(shape={self.shape})"


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c[m, n] = sum_k a[m, k] b[k, n]."""
    return Tensor(K.matmul(a.array, b.array))


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    return Tensor(K.softmax(v.array, axis=axis))


def relu(x: Tensor) -> Tensor:
    return Tensor(K.relu(x.array))


def gelu(x: Tensor) -> Tensor:
    return Tensor(K.gelu(x.array))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    y, _, _ = K.layer_norm(x.array, gamma.array, beta.array, eps)
    return Tensor(y)


def global_avg_pool(x: Tensor) -> Tensor:
    return Tensor(K.global_avg_pool(x.array))


def fft2(x: Tensor, axes=(-2, -1)) -> ComplexTensor:
    """Unnormalized forward 2-D DFT over ``axes`` (power-of-two sizes)."""
    return ComplexTensor.from_complex(K.fft2(x.array, axes=axes))


def ifft2(X: ComplexTensor, axes=(-2, -1), check_real: bool = False) -> Tensor:
    """Inverse 2-D DFT with the 1/(H*W) factor; returns the real part.

    With ``check_real`` the residual imaginary part is asserted tiny, which
    is the right mode for spectra known conjugate-symmetric (roundtrips).
    """
    z = K.ifft2(X.complex, axes=axes)
    if check_real:
        worst = float(np.max(np.abs(z.imag))) if z.size else 0.0
        if worst >= 1e-9:
            raise NumericError(f"ifft2 imaginary residue {worst:.3e} exceeds 1e-9")
    return Tensor(z.real.copy())
