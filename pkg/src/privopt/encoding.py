"""Signed fixed-point codec between reals and Paillier plaintexts.

A real ``x`` is stored as ``round(x * 10**sigma) mod n``. Residues in the
lower half of ``[0, n)`` decode as non-negative values and residues in the
upper half as negative ones, so sums of encodings decode to sums of reals as
long as the total stays inside the representable range.
"""
from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction
from numbers import Integral, Rational

import numpy as np

DEFAULT_SIGMA = 4


class EncodingRangeError(ValueError):
    """Value does not fit the codec's symmetric range."""

    def __init__(self, message, value=None, index=None):
        super().__init__(message)
        self.value = value
        self.index = index


def _scaled_round(x, sigma: int) -> int:
    """``round(x * 10**sigma)`` with ties away from zero, on the decimal value of ``x``."""
    if isinstance(x, Integral):
        return int(x) * 10**sigma
    if isinstance(x, Rational):
        f = Fraction(x) * 10**sigma
        q, r = divmod(abs(f.numerator), f.denominator)
        q += 2 * r >= f.denominator
        return q if f >= 0 else -q
    if isinstance(x, (float, np.floating)):
        if not np.isfinite(x):
            raise EncodingRangeError(f"cannot encode non-finite value {x!r}", value=x)
        # repr() is the shortest decimal string that round-trips the float
        d = Decimal(repr(float(x)))
    else:
        d = Decimal(x)
    with localcontext() as ctx:
        ctx.prec = max(28, len(d.as_tuple().digits) + sigma + 2)
        return int(d.scaleb(sigma).quantize(Decimal(1), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class FixedPointCodec:
    sigma: int
    n: int

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.n < 3 or self.n % 2 == 0:
            raise ValueError("the modulus must be an odd integer >= 3")

    @property
    def scale(self) -> int:
        return 10**self.sigma

    @property
    def max_int(self) -> int:
        """Largest magnitude of a representable scaled integer, ``(n - 1) // 2``."""
        return (self.n - 1) // 2

    @property
    def max_value(self) -> float:
        return self.max_int / self.scale

    def to_int(self, x) -> int:
        """Signed scaled integer for ``x``, range-checked but not reduced mod n."""
        m = _scaled_round(x, self.sigma)
        if abs(m) > self.max_int:
            raise EncodingRangeError(
                f"{x!r} exceeds the representable magnitude {self.max_value!r} "
                f"at sigma={self.sigma}", value=x)
        return m

    def encode(self, x) -> int:
        return self.to_int(x) % self.n

    def signed(self, m: int) -> int:
        """Map a plaintext residue to its signed representative."""
        if not 0 <= m < self.n:
            raise EncodingRangeError(f"plaintext {m} outside [0, n)", value=m)
        return m if m <= self.max_int else m - self.n

    def decode(self, m: int) -> float:
        # int / int true division is correctly rounded even for huge moduli
        return self.signed(m) / self.scale

    def decode_exact(self, m: int) -> Fraction:
        return Fraction(self.signed(m), self.scale)

    def encode_vector(self, v) -> list[int]:
        out = []
        for i, x in enumerate(v):
            try:
                out.append(self.encode(x))
            except EncodingRangeError as exc:
                raise EncodingRangeError(f"coordinate {i}: {exc}", value=x, index=i) from None
        return out

    def decode_vector(self, ms) -> np.ndarray:
        out = np.empty(len(ms))
        for i, m in enumerate(ms):
            try:
                out[i] = self.decode(m)
            except EncodingRangeError as exc:
                raise EncodingRangeError(f"coordinate {i}: {exc}", value=m, index=i) from None
        return out
