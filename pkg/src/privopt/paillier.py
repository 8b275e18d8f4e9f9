"""Paillier cryptosystem over arbitrary-precision integers.

Keys and ciphertexts are immutable values. Every function that needs
randomness takes an explicit ``rng`` (anything with the ``random.Random``
interface); pass a seeded ``random.Random`` for reproducible runs and leave it
as ``None`` to draw from the operating system's CSPRNG.

Multiplying two ciphertexts adds their plaintexts modulo ``n``; raising a
ciphertext to a plaintext power multiplies the plaintext by that scalar.
"""
from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field

import gmpy2

DEFAULT_BITS = 2048
MIN_BITS = 16
MR_ROUNDS = 64
PRIME_SEARCH_LIMIT = 100_000

# Deterministic Miller-Rabin witnesses, exact for every n < 3.3e24.
_DETERMINISTIC_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
_SMALL_PRIMES = tuple(p for p in range(3, 2000, 2) if all(p % d for d in range(3, int(p**0.5) + 1, 2)))

_sysrand = random.SystemRandom()


class PaillierError(Exception):
    pass


class KeyMismatchError(PaillierError):
    """Ciphertexts or keys from different keypairs were combined."""


class PlaintextRangeError(PaillierError, ValueError):
    pass


class IntegrityError(PaillierError):
    """A ciphertext is not a unit modulo n**2."""


class KeyGenerationError(PaillierError):
    pass


def powmod(base: int, exp: int, mod: int) -> int:
    return int(gmpy2.powmod(base, exp, mod))


def _L(u: int, n: int) -> int:
    return (u - 1) // n


def key_id_for(n: int) -> str:
    return hashlib.sha256(format(n, "x").encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PublicKey:
    n: int
    g: int
    bit_length: int
    nsquare: int = field(init=False, repr=False, compare=False)
    key_id: str = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nsquare", self.n * self.n)
        object.__setattr__(self, "key_id", key_id_for(self.n))

    def to_dict(self) -> dict:
        return {"n": to_hex(self.n), "g": to_hex(self.g), "bit_length": self.bit_length}

    @classmethod
    def from_dict(cls, doc: dict) -> "PublicKey":
        return cls(from_hex(doc["n"]), from_hex(doc["g"]), int(doc["bit_length"]))


@dataclass(frozen=True)
class PrivateKey:
    eta: int
    mu: int
    p: int = field(repr=False)
    q: int = field(repr=False)

    def to_dict(self) -> dict:
        return {k: to_hex(getattr(self, k)) for k in ("eta", "mu", "p", "q")}

    @classmethod
    def from_dict(cls, doc: dict) -> "PrivateKey":
        return cls(*(from_hex(doc[k]) for k in ("eta", "mu", "p", "q")))


@dataclass(frozen=True)
class Ciphertext:
    value: int
    key_id: str


def to_hex(x: int) -> str:
    """Big-endian hexadecimal text of a non-negative integer."""
    if x < 0:
        raise ValueError("only non-negative integers are serialized")
    return format(x, "x")


def from_hex(s: str) -> int:
    return int(s, 16)


# -- primes -------------------------------------------------------------------

def is_probable_prime(n: int, rng=None, rounds: int = MR_ROUNDS) -> bool:
    """Miller-Rabin test; deterministic below 2**64, ``rounds`` random bases above."""
    if n < 2:
        return False
    if n in (2, 3):
        return True
    if n % 2 == 0:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1

    def witness(a: int) -> bool:
        x = powmod(a, d, n)
        if x == 1 or x == n - 1:
            return False
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                return False
        return True

    if n < 2**64:
        bases = [a % n for a in _DETERMINISTIC_BASES if a % n]
    else:
        rng = rng or _sysrand
        bases = [rng.randrange(2, n - 1) for _ in range(rounds)]
    return not any(witness(a) for a in bases)


def random_prime(bits: int, rng=None) -> int:
    """Uniform-ish probable prime with exactly ``bits`` bits and its top two bits set."""
    if bits < 3:
        raise KeyGenerationError("primes need at least 3 bits")
    rng = rng or _sysrand
    top = 0b11 << (bits - 2)
    for _ in range(PRIME_SEARCH_LIMIT):
        candidate = rng.getrandbits(bits) | top | 1
        candidate &= (1 << bits) - 1
        if is_probable_prime(candidate, rng):
            return candidate
    raise KeyGenerationError(f"no {bits}-bit prime found in {PRIME_SEARCH_LIMIT} draws")


# -- keys ---------------------------------------------------------------------

def keypair_from_primes(p: int, q: int) -> tuple[PublicKey, PrivateKey]:
    """Build the keypair for modulus ``p*q`` with generator ``n + 1``."""
    if p == q:
        raise KeyGenerationError("primes must be distinct")
    if not (is_probable_prime(p) and is_probable_prime(q)) or p == 2 or q == 2:
        raise KeyGenerationError("both factors must be odd primes")
    n = p * q
    if math.gcd(n, (p - 1) * (q - 1)) != 1:
        raise KeyGenerationError("gcd(n, phi(n)) != 1")
    g = n + 1
    eta = math.lcm(p - 1, q - 1)
    u = powmod(g, eta, n * n)
    mu = pow(_L(u, n), -1, n)
    return PublicKey(n, g, n.bit_length()), PrivateKey(eta, mu, p, q)


def keygen(bit_length: int = DEFAULT_BITS, rng=None) -> tuple[PublicKey, PrivateKey]:
    """Generate a keypair whose modulus has exactly ``bit_length`` bits.

    Parameters
    ----------
    bit_length : int
        Size of the public modulus. 2048 is the production default; anything
        below 1024 is only meant for tests.
    rng : random.Random, optional
        Source of randomness. ``None`` uses ``random.SystemRandom``.
    """
    if bit_length < MIN_BITS:
        raise KeyGenerationError(f"bit_length must be >= {MIN_BITS}")
    rng = rng or _sysrand
    half = bit_length // 2
    for _ in range(PRIME_SEARCH_LIMIT):
        p = random_prime(half, rng)
        q = random_prime(bit_length - half, rng)
        if p == q:
            continue
        n = p * q
        if n.bit_length() != bit_length or math.gcd(n, (p - 1) * (q - 1)) != 1:
            continue
        return keypair_from_primes(p, q)
    raise KeyGenerationError("could not find a suitable prime pair")


def check_keypair(pk: PublicKey, sk: PrivateKey) -> None:
    """Raise ``KeyMismatchError`` unless ``sk`` decrypts under ``pk``."""
    n = pk.n
    if sk.p * sk.q != n or sk.eta != math.lcm(sk.p - 1, sk.q - 1):
        raise KeyMismatchError("private key does not belong to this public key")
    if sk.mu * _L(powmod(pk.g, sk.eta, pk.nsquare), n) % n != 1:
        raise KeyMismatchError("mu is not the inverse of L(g^eta mod n^2)")


# -- operations ---------------------------------------------------------------

def _check_key(pk: PublicKey, ct: Ciphertext) -> None:
    if ct.key_id != pk.key_id:
        raise KeyMismatchError(f"ciphertext bound to key {ct.key_id}, expected {pk.key_id}")


def random_nonce(pk: PublicKey, rng=None) -> int:
    rng = rng or _sysrand
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            return r


def encrypt(pk: PublicKey, m: int, rng=None, *, nonce: int | None = None) -> Ciphertext:
    """Encrypt ``m`` in ``[0, n)`` as ``g**m * r**n mod n**2`` with a fresh nonce ``r``."""
    if not 0 <= m < pk.n:
        raise PlaintextRangeError(f"plaintext {m} outside [0, n)")
    r = random_nonce(pk, rng) if nonce is None else nonce
    if not 0 < r < pk.n or math.gcd(r, pk.n) != 1:
        raise ValueError("nonce must be a unit in [1, n)")
    n2 = pk.nsquare
    if pk.g == pk.n + 1:
        gm = (1 + m * pk.n) % n2
    else:
        gm = powmod(pk.g, m, n2)
    return Ciphertext(gm * powmod(r, pk.n, n2) % n2, pk.key_id)


def validate(pk: PublicKey, ct: Ciphertext) -> None:
    _check_key(pk, ct)
    if not 0 < ct.value < pk.nsquare or math.gcd(ct.value, pk.nsquare) != 1:
        raise IntegrityError("ciphertext is not a unit modulo n^2")


def decrypt(pk: PublicKey, sk: PrivateKey, ct: Ciphertext) -> int:
    """Recover the plaintext in ``[0, n)``.

    Computed through the CRT split over the prime factors; the result is
    identical to ``L(c**eta mod n**2) * mu mod n`` (see ``decrypt_direct``).
    """
    validate(pk, ct)
    p, q = sk.p, sk.q
    hp, hq = _crt_constants(pk.n, p, q)
    mp = _L(powmod(ct.value, p - 1, p * p), p) * hp % p
    mq = _L(powmod(ct.value, q - 1, q * q), q) * hq % q
    # Garner recombination
    return (mq + q * ((mp - mq) * pow(q, -1, p) % p)) % pk.n


def decrypt_direct(pk: PublicKey, sk: PrivateKey, ct: Ciphertext) -> int:
    validate(pk, ct)
    return _L(powmod(ct.value, sk.eta, pk.nsquare), pk.n) * sk.mu % pk.n


_crt_cache: dict[tuple[int, int], tuple[int, int]] = {}


def _crt_constants(n: int, p: int, q: int) -> tuple[int, int]:
    key = (p, q)
    if key not in _crt_cache:
        g = n + 1
        hp = pow(_L(powmod(g % (p * p), p - 1, p * p), p), -1, p)
        hq = pow(_L(powmod(g % (q * q), q - 1, q * q), q), -1, q)
        _crt_cache[key] = (hp, hq)
    return _crt_cache[key]


def hom_add(a: Ciphertext, b: Ciphertext, pk: PublicKey) -> Ciphertext:
    """Ciphertext of ``(m_a + m_b) mod n``."""
    _check_key(pk, a)
    _check_key(pk, b)
    return Ciphertext(a.value * b.value % pk.nsquare, pk.key_id)


def hom_sum(cts, pk: PublicKey) -> Ciphertext:
    """Fold ``hom_add`` over a non-empty iterable of ciphertexts."""
    it = iter(cts)
    try:
        acc = next(it)
    except StopIteration:
        raise ValueError("hom_sum of an empty sequence") from None
    _check_key(pk, acc)
    for ct in it:
        acc = hom_add(acc, ct, pk)
    return acc


def hom_scale(a: Ciphertext, k: int, pk: PublicKey) -> Ciphertext:
    """Ciphertext of ``(m_a * k) mod n`` for a plaintext scalar ``k`` in ``[0, n)``."""
    _check_key(pk, a)
    if not 0 <= k < pk.n:
        raise PlaintextRangeError(f"scalar {k} outside [0, n)")
    return Ciphertext(powmod(a.value, k, pk.nsquare), pk.key_id)
