import random
from decimal import Decimal
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

import oracles
from privopt.encoding import EncodingRangeError, FixedPointCodec

N = 1_000_000_007 * 998_244_353   # odd, roughly 2**60
codec = FixedPointCodec(4, N)


def test_examples():
    assert codec.encode(1.0) == 10000
    assert codec.encode(-1.5) == N - 15000
    assert codec.encode(0.52583) == 5258
    assert codec.decode(0) == 0.0
    assert codec.decode(N - 15000) == -1.5


def test_ties_round_away_from_zero():
    assert codec.encode(0.00005) == 1
    assert codec.encode(-0.00005) == N - 1
    assert codec.encode(2.5e-5) == 0
    assert codec.encode(Fraction(1, 20000)) == 1
    assert codec.encode("-0.00015") == N - 2
    # 1.00005 is stored as 1.0000499999...; the decimal string decides
    assert codec.encode(1.00005) == 10001


def test_accepts_integers_and_decimals():
    assert codec.encode(3) == 30000
    assert codec.encode(np.float64(0.25)) == 2500
    assert codec.encode(Decimal("-0.1")) == N - 1000


def test_range_limits():
    small = FixedPointCodec(2, 201)           # symmetric range is [-1.00, 1.00]
    assert small.max_int == 100
    assert small.encode(1.0) == 100 and small.encode(-1.0) == 101
    with pytest.raises(EncodingRangeError) as exc:
        small.encode(1.01)
    assert exc.value.value == 1.01
    with pytest.raises(EncodingRangeError):
        small.encode(float("nan"))
    with pytest.raises(EncodingRangeError):
        small.decode(201)


def test_codec_validation():
    with pytest.raises(ValueError):
        FixedPointCodec(-1, 35)
    with pytest.raises(ValueError):
        FixedPointCodec(4, 36)


def test_both_decode_branches_exhaustively():
    small = FixedPointCodec(1, 35)
    for m in range(35):
        expected = m / 10 if m <= 17 else (m - 35) / 10
        assert small.decode(m) == expected
        assert abs(small.decode(m)) <= 17 / 10
        assert small.encode(small.decode(m)) == m


def test_vectors():
    assert codec.encode_vector([]) == []
    assert list(codec.decode_vector(codec.encode_vector([1.0, -1.5]))) == [1.0, -1.5]
    with pytest.raises(EncodingRangeError) as exc:
        FixedPointCodec(0, 11).encode_vector([1, 2, 9])
    assert exc.value.index == 2
    with pytest.raises(EncodingRangeError) as exc:
        FixedPointCodec(0, 11).decode_vector([1, 11])
    assert exc.value.index == 1


def test_roundtrip_1000_sigma_digit_values():
    rng = random.Random(0)
    for _ in range(1000):
        x = rng.randrange(-10**9, 10**9) / 10**4
        assert codec.decode(codec.encode(x)) == x


@settings(max_examples=500)
@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_matches_decimal_oracle(x):
    assert codec.encode(x) == oracles.decimal_encode(x, 4, N)


@settings(max_examples=500)
@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_quantization_bound(x):
    assert abs(codec.decode_exact(codec.encode(x)) - Fraction(repr(x))) <= Fraction(1, 2 * 10**4)


@given(st.integers(-10**8, 10**8), st.integers(-10**8, 10**8))
def test_additive_compatibility(a, b):
    x, y = a / 10**4, b / 10**4
    assert codec.decode((codec.encode(x) + codec.encode(y)) % N) == (a + b) / 10**4


@given(st.lists(st.integers(-10**9, 10**9), min_size=4, max_size=4))
def test_vector_roundtrip_property(ints):
    v = [i / 10**4 for i in ints]
    assert list(codec.decode_vector(codec.encode_vector(v))) == v


@given(st.integers(0, N - 1))
def test_branch_consistency(m):
    x = codec.decode_exact(m)
    assert abs(x) <= Fraction(N - 1, 2 * 10**4)
    assert codec.encode(x) == m


@given(st.integers(0, 12), st.integers(3, 10**30))
def test_any_sigma_roundtrip(sigma, n):
    assume(n % 2 == 1)
    c = FixedPointCodec(sigma, n)
    m = n // 3
    assert c.encode(c.decode_exact(m)) == m
