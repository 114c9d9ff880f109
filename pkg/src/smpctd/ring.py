"""Arithmetic modulo 2**64 and the fixed-point codec that rides on it.

Ring tensors are plain ``numpy.uint64`` arrays; numpy array arithmetic
wraps silently, which is exactly the ring semantics we want.  Scalars go
through :class:`RingElement` or Python ints so that numpy's scalar
overflow warnings never fire.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import RangeError

MOD = 1 << 64
MASK = MOD - 1
DTYPE = np.uint64
WIRE_DTYPE = np.dtype("<u8")


@dataclass(frozen=True)
class RingElement:
    value: int

    def __post_init__(self):
        object.__setattr__(self, "value", int(self.value) & MASK)

    def __add__(self, other):
        return RingElement(self.value + _as_int(other))

    __radd__ = __add__

    def __sub__(self, other):
        return RingElement(self.value - _as_int(other))

    def __rsub__(self, other):
        return RingElement(_as_int(other) - self.value)

    def __mul__(self, other):
        return RingElement(self.value * _as_int(other))

    __rmul__ = __mul__

    def __neg__(self):
        return RingElement(-self.value)

    def signed(self) -> int:
        return self.value - MOD if self.value >> 63 else self.value

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(8, "little")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "RingElement":
        if len(raw) != 8:
            raise ValueError("ring elements are exactly 8 bytes")
        return cls(int.from_bytes(raw, "little"))


def ring_op(fn):
    """Decorator: silence numpy's overflow warning, since wrapping is the point.

    Arrays wrap silently already; 0-d results become numpy scalars, which warn.
    """
    @functools.wraps(fn)
    def inner(*args, **kwargs):
        with np.errstate(over="ignore"):
            return fn(*args, **kwargs)
    return inner


def _as_int(x) -> int:
    return x.value if isinstance(x, RingElement) else int(x)


def to_signed(x):
    """Reinterpret ring values as two's-complement int64 (no copy for arrays)."""
    if isinstance(x, np.ndarray):
        return x.view(np.int64)
    v = _as_int(x) & MASK
    return v - MOD if v >> 63 else v


def from_signed(x):
    if isinstance(x, np.ndarray):
        return x.astype(np.int64, copy=False).view(DTYPE)
    return int(x) & MASK


def shift_right_signed(x, bits: int):
    """Arithmetic right shift of the signed interpretation."""
    if isinstance(x, np.ndarray):
        return (x.view(np.int64) >> np.int64(bits)).view(DTYPE)
    return (to_signed(x) >> bits) & MASK


def uniform(rng: np.random.Generator, shape) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
    return rng.bit_generator.random_raw(n).astype(DTYPE, copy=False).reshape(shape)


def to_wire(x: np.ndarray) -> bytes:
    return np.ascontiguousarray(x, dtype=WIRE_DTYPE).tobytes()


def from_wire(raw: bytes | memoryview) -> np.ndarray:
    if len(raw) % 8:
        raise ValueError(f"payload of {len(raw)} bytes is not a whole number of ring elements")
    return np.frombuffer(raw, dtype=WIRE_DTYPE).astype(DTYPE)


@dataclass(frozen=True)
class FixedPointCodec:
    """Reals r with |r| < 2**(63 - f) stored as round(r * 2**f) in the ring."""

    frac_bits: int = 20

    def __post_init__(self):
        if not 8 <= self.frac_bits <= 30:
            raise RangeError(f"frac_bits must be in [8, 30], got {self.frac_bits}")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    @property
    def ulp(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def max_abs(self) -> float:
        return 2.0 ** (63 - self.frac_bits)

    def encode(self, r):
        scaled = np.rint(np.asarray(r, dtype=np.float64) * self.scale)
        if not np.all(np.abs(scaled) < 2.0**63):
            raise RangeError(f"value out of fixed-point range for f={self.frac_bits}")
        out = scaled.astype(np.int64).view(DTYPE)
        if out.ndim == 0 and not isinstance(r, np.ndarray):
            return int(out)
        return out

    def decode(self, x):
        if isinstance(x, np.ndarray):
            return x.astype(DTYPE, copy=False).view(np.int64) / self.scale
        return to_signed(x) / self.scale

    def truncate(self, x, bits: int | None = None):
        """Rescale a value from scale 2f (or f + bits) back down to scale f."""
        return shift_right_signed(x, self.frac_bits if bits is None else bits)


def encode(r, codec: FixedPointCodec):
    return codec.encode(r)


def decode(x, codec: FixedPointCodec):
    return codec.decode(x)


def truncate(x, codec: FixedPointCodec, bits: int | None = None):
    return codec.truncate(x, bits)
