"""Complex fields carried as (real, imaginary) tensor pairs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, neg, sumsq


@dataclass
class ComplexPair:
    re: Tensor
    im: Tensor

    def __post_init__(self):
        self.re = as_tensor(self.re)
        self.im = as_tensor(self.im)
        if self.re.shape != self.im.shape:
            raise ShapeError("ComplexPair", self.re.shape, self.im.shape)

    @classmethod
    def from_numpy(cls, z: np.ndarray) -> "ComplexPair":
        return cls(Tensor(z.real), Tensor(z.imag))

    def numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    @property
    def shape(self) -> tuple:
        return self.re.shape

    def conj(self) -> "ComplexPair":
        return ComplexPair(self.re, neg(self.im))

    def __add__(self, other: "ComplexPair") -> "ComplexPair":
        return ComplexPair(self.re + other.re, self.im + other.im)

    def __sub__(self, other: "ComplexPair") -> "ComplexPair":
        return ComplexPair(self.re - other.re, self.im - other.im)

    def __mul__(self, other) -> "ComplexPair":
        if isinstance(other, ComplexPair):
            return ComplexPair(self.re * other.re - self.im * other.im,
                               self.re * other.im + self.im * other.re)
        return ComplexPair(self.re * other, self.im * other)

    __rmul__ = __mul__

    def __getitem__(self, index) -> "ComplexPair":
        return ComplexPair(self.re[index], self.im[index])

    def reshape(self, *shape) -> "ComplexPair":
        return ComplexPair(self.re.reshape(*shape), self.im.reshape(*shape))

    def abs2(self) -> Tensor:
        return self.re * self.re + self.im * self.im

    def sumsq(self, axis=None) -> Tensor:
        """Sum of |z|^2 along ``axis``."""
        return sumsq(self.re, axis) + sumsq(self.im, axis)
