"""Paillier additively homomorphic encryption with a signed fixed-point codec.

Uses the ``g = n + 1`` variant, so ``lambda = phi(n)`` and
``mu = phi(n)^-1 mod n``. Real numbers travel as ring elements of ``Z_n``:
``x`` is stored as ``round(x * 2**F) mod n`` and negative values live in the
upper half of the ring.

Randomness comes from a ``random.Random``-compatible object. Pass a seeded
``random.Random`` for reproducible transcripts; the default is
``random.SystemRandom``.
"""

from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass, field
from typing import Optional

import gmpy2
import numpy as np

from .numeric import InputError, ShapeError, as_matrix

logger = logging.getLogger(__name__)

DEFAULT_KEY_BITS = 2048
TEST_KEY_BITS = 512
DEFAULT_FRACTION_BITS = 20
_KEYGEN_ATTEMPTS = 64


class CryptoError(ValueError):
    """Malformed ciphertext, key mismatch or key-generation failure."""


class CodecError(ValueError):
    """Fixed-point encoding overflow or scale mismatch."""


def default_rng() -> random.Random:
    return random.SystemRandom()


@dataclass(frozen=True)
class PaillierPublicKey:
    n: int

    @property
    def g(self) -> int:
        return self.n + 1

    @property
    def n_sq(self) -> int:
        return self.n * self.n

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def ring_bytes(self) -> int:
        """Fixed width of a serialized ring element."""
        return (self.n.bit_length() + 7) // 8

    @property
    def cipher_bytes(self) -> int:
        return (self.n_sq.bit_length() + 7) // 8

    def to_bytes(self) -> bytes:
        raw = self.n.to_bytes(self.ring_bytes, "big")
        return struct.pack(">I", len(raw)) + raw

    @classmethod
    def from_bytes(cls, data: bytes) -> "PaillierPublicKey":
        (length,) = struct.unpack(">I", data[:4])
        return cls(int.from_bytes(data[4 : 4 + length], "big"))


@dataclass(frozen=True)
class PaillierSecretKey:
    public: PaillierPublicKey
    lam: int
    mu: int


@dataclass(frozen=True)
class PaillierKeypair:
    public: PaillierPublicKey
    secret: PaillierSecretKey


def _random_prime(bits: int, rng: random.Random) -> int:
    # top two bits set so that p*q has exactly 2*bits bits
    candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
    return int(gmpy2.next_prime(candidate))


def keygen(bits: int = DEFAULT_KEY_BITS, rng: Optional[random.Random] = None) -> PaillierKeypair:
    if bits < TEST_KEY_BITS:
        raise ValueError(f"key size must be at least {TEST_KEY_BITS} bits, got {bits}")
    if bits < DEFAULT_KEY_BITS:
        logger.warning("generating an INSECURE %d-bit Paillier key (test mode)", bits)
    rng = rng or default_rng()
    half = bits // 2
    for _ in range(_KEYGEN_ATTEMPTS):
        p = _random_prime(half, rng)
        q = _random_prime(bits - half, rng)
        n = p * q
        if p == q or n.bit_length() != bits:
            continue
        lam = (p - 1) * (q - 1)
        if gmpy2.gcd(lam, n) != 1:
            continue
        mu = int(gmpy2.invert(lam, n))
        pk = PaillierPublicKey(n)
        return PaillierKeypair(pk, PaillierSecretKey(pk, lam, mu))
    raise CryptoError(f"could not generate a {bits}-bit key in {_KEYGEN_ATTEMPTS} attempts")


@dataclass(frozen=True)
class Ciphertext:
    value: int
    scale_exp: int
    public_key: PaillierPublicKey = field(repr=False)

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(self.public_key.cipher_bytes, "big")


def _nonce(pk: PaillierPublicKey, rng: random.Random) -> int:
    while True:
        r = rng.randrange(1, pk.n)
        if gmpy2.gcd(r, pk.n) == 1:
            return r


def _raw_encrypt(pk: PaillierPublicKey, m: int, rng: random.Random) -> int:
    n, n_sq = pk.n, pk.n_sq
    # g^m = 1 + m*n (mod n^2) when g = n + 1
    gm = (1 + m * n) % n_sq
    return int(gm * gmpy2.powmod(_nonce(pk, rng), n, n_sq) % n_sq)


def encrypt(
    pk: PaillierPublicKey, m: int, scale_exp: int = 0, rng: Optional[random.Random] = None
) -> Ciphertext:
    m = int(m)
    if not 0 <= m < pk.n:
        raise InputError("plaintext must lie in [0, n)")
    return Ciphertext(_raw_encrypt(pk, m, rng or default_rng()), scale_exp, pk)


def _raw_decrypt(sk: PaillierSecretKey, c: int) -> int:
    pk = sk.public
    n, n_sq = pk.n, pk.n_sq
    if not 0 < c < n_sq or gmpy2.gcd(c, n) != 1:
        raise CryptoError("malformed ciphertext")
    u = gmpy2.powmod(c, sk.lam, n_sq)
    return int((u - 1) // n * sk.mu % n)


def decrypt(sk, ct: Ciphertext) -> int:
    if isinstance(sk, PaillierKeypair):
        sk = sk.secret
    if ct.public_key != sk.public:
        raise CryptoError("ciphertext was not formed under this key")
    return _raw_decrypt(sk, ct.value)


def ct_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    if a.public_key != b.public_key:
        raise CryptoError("ciphertexts under different keys")
    if a.scale_exp != b.scale_exp:
        raise CodecError(f"scale mismatch: 2^{a.scale_exp} vs 2^{b.scale_exp}")
    return Ciphertext(a.value * b.value % a.public_key.n_sq, a.scale_exp, a.public_key)


def ct_mul_plain(a: Ciphertext, k: int, plain_scale: int = 0) -> Ciphertext:
    pk = a.public_key
    k = int(k) % pk.n
    return Ciphertext(
        _pow_ring(a.value, None, k, pk), a.scale_exp + plain_scale, pk
    )


def _pow_ring(c: int, c_inv: Optional[int], k: int, pk: PaillierPublicKey) -> int:
    """c^k in Z_{n^2}, with k read as a ring element of Z_n.

    Upper-half ``k`` (negative reals) use ``(c^-1)^(n-k)``, which decrypts to
    the same plaintext with a much shorter exponent.
    """
    n, n_sq = pk.n, pk.n_sq
    if k == 0:
        return 1
    if k > n // 2:
        if c_inv is None:
            c_inv = gmpy2.invert(c, n_sq)
        return int(gmpy2.powmod(c_inv, n - k, n_sq))
    return int(gmpy2.powmod(c, k, n_sq))


@dataclass(frozen=True)
class FixedPointCodec:
    n: int
    fraction_bits: int = DEFAULT_FRACTION_BITS

    @property
    def product_scale(self) -> int:
        return 2 * self.fraction_bits

    def encode(self, x: float, scale_exp: Optional[int] = None) -> int:
        s = self.fraction_bits if scale_exp is None else scale_exp
        x = float(x)
        if not np.isfinite(x):
            raise CodecError(f"cannot encode non-finite value {x}")
        v = int(round(x * (1 << s)))
        if 2 * abs(v) >= self.n:
            raise CodecError(f"{x} overflows the ring at scale 2^{s}")
        return v % self.n

    def lift(self, m: int) -> int:
        """Centered lift of a ring element to (-n/2, n/2]."""
        m = int(m)
        if not 0 <= m < self.n:
            raise CodecError("value is not a ring element")
        return m - self.n if m > self.n // 2 else m

    def decode(self, m: int, scale_exp: Optional[int] = None) -> float:
        s = self.fraction_bits if scale_exp is None else scale_exp
        v = self.lift(m)
        # exact rational division keeps ~2^471 lifts finite and correctly rounded
        return v / (1 << s)

    def encode_matrix(self, x, scale_exp: Optional[int] = None) -> np.ndarray:
        s = self.fraction_bits if scale_exp is None else scale_exp
        x = as_matrix(x)
        if not np.all(np.isfinite(x)):
            raise CodecError("cannot encode non-finite values")
        scaled = np.rint(x * float(1 << s))
        if scaled.size and np.max(np.abs(scaled)) < 2.0**62:
            ints = scaled.astype(np.int64)
            out = np.empty(x.shape, dtype=object)
            n = self.n
            for idx, v in np.ndenumerate(ints):
                out[idx] = int(v) % n
            return out
        out = np.empty(x.shape, dtype=object)
        for idx, v in np.ndenumerate(x):
            out[idx] = self.encode(v, s)
        return out

    def decode_matrix(self, m: np.ndarray, scale_exp: Optional[int] = None) -> np.ndarray:
        s = self.fraction_bits if scale_exp is None else scale_exp
        out = np.empty(m.shape, dtype=np.float64)
        for idx, v in np.ndenumerate(m):
            out[idx] = self.decode(v, s)
        return out

    def lift_matrix(self, m: np.ndarray) -> np.ndarray:
        out = np.empty(m.shape, dtype=object)
        for idx, v in np.ndenumerate(m):
            out[idx] = self.lift(v)
        return out


def encode(x: float, codec: FixedPointCodec) -> int:
    return codec.encode(x)


def decode(m: int, scale_exp: int, codec: FixedPointCodec) -> float:
    return codec.decode(m, scale_exp)


class EncryptedMatrix:
    """A 2-D grid of ciphertexts sharing one key and one fixed-point scale."""

    def __init__(self, values, scale_exp: int, public_key: PaillierPublicKey):
        self.values = np.asarray(values, dtype=object)
        if self.values.ndim != 2:
            raise ShapeError("encrypted matrix must be 2-D")
        self.scale_exp = scale_exp
        self.public_key = public_key
        self._inverses = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __getitem__(self, idx) -> Ciphertext:
        return Ciphertext(int(self.values[idx]), self.scale_exp, self.public_key)

    def inverses(self) -> np.ndarray:
        if self._inverses is None:
            n_sq = self.public_key.n_sq
            inv = np.empty(self.values.shape, dtype=object)
            for idx, c in np.ndenumerate(self.values):
                inv[idx] = int(gmpy2.invert(c, n_sq))
            self._inverses = inv
        return self._inverses


def encrypt_matrix(
    pk: PaillierPublicKey, ring: np.ndarray, scale_exp: int, rng: Optional[random.Random] = None
) -> EncryptedMatrix:
    rng = rng or default_rng()
    out = np.empty(ring.shape, dtype=object)
    for idx, m in np.ndenumerate(ring):
        m = int(m)
        if not 0 <= m < pk.n:
            raise InputError("plaintext must lie in [0, n)")
        out[idx] = _raw_encrypt(pk, m, rng)
    return EncryptedMatrix(out, scale_exp, pk)


def decrypt_matrix(sk, enc: EncryptedMatrix) -> np.ndarray:
    if isinstance(sk, PaillierKeypair):
        sk = sk.secret
    if enc.public_key != sk.public:
        raise CryptoError("matrix was not encrypted under this key")
    out = np.empty(enc.shape, dtype=object)
    for idx, c in np.ndenumerate(enc.values):
        out[idx] = _raw_decrypt(sk, int(c))
    return out


def enc_add(a: EncryptedMatrix, b: EncryptedMatrix) -> EncryptedMatrix:
    if a.public_key != b.public_key:
        raise CryptoError("matrices under different keys")
    if a.scale_exp != b.scale_exp:
        raise CodecError(f"scale mismatch: 2^{a.scale_exp} vs 2^{b.scale_exp}")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    n_sq = a.public_key.n_sq
    out = np.empty(a.shape, dtype=object)
    for idx, c in np.ndenumerate(a.values):
        out[idx] = int(c) * int(b.values[idx]) % n_sq
    return EncryptedMatrix(out, a.scale_exp, a.public_key)


def enc_matmul(enc_w: EncryptedMatrix, x, codec: FixedPointCodec) -> EncryptedMatrix:
    """Encrypted product ``x @ W.T`` for an encrypted ``W`` of shape (m, k).

    ``x`` is a plaintext float batch of shape (batch, k), encoded at the
    codec's base scale. Entry (i, j) of the result decrypts to
    ``sum_t enc(W[j, t]) * enc(x[i, t]) mod n`` at twice the base scale.
    """
    x = as_matrix(x)
    m, k = enc_w.shape
    if x.shape[1] != k:
        raise ShapeError(f"batch has {x.shape[1]} features, mask expects {k}")
    if enc_w.scale_exp != codec.fraction_bits:
        raise CodecError("weight mask must be encrypted at the base scale")
    pk = enc_w.public_key
    n_sq = pk.n_sq
    xs = codec.encode_matrix(x)
    cw = enc_w.values
    cw_inv = enc_w.inverses()
    batch = x.shape[0]
    out = np.empty((batch, m), dtype=object)
    for i in range(batch):
        row = xs[i]
        active = [(t, int(row[t])) for t in range(k) if row[t] != 0]
        for j in range(m):
            acc = gmpy2.mpz(1)
            for t, e in active:
                acc = acc * _pow_ring(cw[j, t], cw_inv[j, t], e, pk) % n_sq
            out[i, j] = int(acc)
    return EncryptedMatrix(out, enc_w.scale_exp + codec.fraction_bits, pk)
