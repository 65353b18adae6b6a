"""VRF evaluation, seed-keyed PRNG streams, permutations and audit index sampling.

The VRF is a unique-signature construction: the proof is a deterministic
Ed25519 signature over the tagged transcript and the randomness is the hash
of that proof. Anyone holding the public key can check both.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import SampleTooLarge

VRF_TAG = b"vinfer.vrf.v1\x00"
VRF_OUT_TAG = b"vinfer.vrf.out.v1\x00"
STREAM_INFO = b"vinfer.stream.v1"


@dataclass(frozen=True)
class VrfKeypair:
    secret: bytes
    public: bytes

    @classmethod
    def from_secret(cls, secret: bytes) -> "VrfKeypair":
        if len(secret) != 32:
            raise ValueError("VRF secret must be 32 bytes")
        sk = Ed25519PrivateKey.from_private_bytes(secret)
        pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(bytes(secret), pk)

    @classmethod
    def derive(cls, label: str | bytes, seed: int = 0) -> "VrfKeypair":
        """Deterministic keypair for simulations."""
        if isinstance(label, str):
            label = label.encode()
        return cls.from_secret(hashlib.sha256(b"vinfer.key" + struct.pack("<q", seed) + label).digest())


@dataclass(frozen=True)
class VrfOutput:
    randomness: bytes
    proof: bytes
    input_transcript: bytes

    def to_json(self) -> dict:
        return {"randomness": self.randomness.hex(), "proof": self.proof.hex(),
                "transcript": self.input_transcript.hex()}

    @classmethod
    def from_json(cls, obj: dict) -> "VrfOutput":
        return cls(bytes.fromhex(obj["randomness"]), bytes.fromhex(obj["proof"]),
                   bytes.fromhex(obj["transcript"]))


def vrf_eval(secret: bytes, transcript: bytes) -> VrfOutput:
    if not transcript:
        raise ValueError("VRF transcript must be non-empty")
    proof = Ed25519PrivateKey.from_private_bytes(secret).sign(VRF_TAG + transcript)
    randomness = hashlib.sha256(VRF_OUT_TAG + proof).digest()
    return VrfOutput(randomness, proof, bytes(transcript))


def vrf_verify(public: bytes, transcript: bytes, output: VrfOutput) -> bool:
    if output.input_transcript != transcript:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(output.proof, VRF_TAG + transcript)
    except (InvalidSignature, ValueError):
        return False
    return hashlib.sha256(VRF_OUT_TAG + output.proof).digest() == output.randomness


# transcripts -----------------------------------------------------------------

def _lp(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def assignment_transcript(task_hash: bytes, stage: int, group_size: int) -> bytes:
    """Encoding of <h, i, L_i>."""
    return b"assign" + _lp(task_hash) + struct.pack("<II", stage, group_size)


def sampling_transcript(task_hash: bytes, stage: int, roots: Sequence[bytes]) -> bytes:
    """Encoding of <h, i, {gamma_j}>: length-prefixed roots in committee order."""
    body = b"".join(_lp(r) for r in roots)
    return b"sample" + _lp(task_hash) + struct.pack("<II", stage, len(roots)) + body


def dispute_transcript(task_hash: bytes, stage: int, size: int, round_id: int) -> bytes:
    return b"dispute" + _lp(task_hash) + struct.pack("<III", stage, size, round_id)


# PRNG --------------------------------------------------------------------------

class KeyedStream:
    """Counter-mode SHA-256 stream keyed through HKDF from 32 bytes of randomness."""

    def __init__(self, randomness: bytes, info: bytes = STREAM_INFO):
        self.key = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(randomness)
        self.counter = 0
        self._buf = b""

    def _block(self) -> bytes:
        out = hashlib.sha256(self.key + struct.pack("<Q", self.counter)).digest()
        self.counter += 1
        return out

    def next_u64(self) -> int:
        if len(self._buf) < 8:
            self._buf += self._block()
        v, self._buf = int.from_bytes(self._buf[:8], "little"), self._buf[8:]
        return v

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.next_u64()
            if v < limit:
                return v % n

    def uniform(self) -> float:
        return (self.next_u64() >> 11) / float(1 << 53)


def permutation(randomness: bytes, n: int) -> list[int]:
    """Fisher-Yates permutation of 1..n."""
    if n < 1:
        raise ValueError("n must be at least 1")
    stream = KeyedStream(randomness, STREAM_INFO + b".perm")
    perm = list(range(1, n + 1))
    for i in range(n - 1, 0, -1):
        j = stream.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def sample_indices(randomness: bytes, n: int, q: int) -> list[int]:
    """q distinct indices in [0, n), drawn by a partial Fisher-Yates shuffle, sorted."""
    if q > n:
        raise SampleTooLarge(f"cannot draw {q} distinct indices from {n}")
    if q < 0:
        raise ValueError("q must be non-negative")
    stream = KeyedStream(randomness, STREAM_INFO + b".sample")
    pool = list(range(n))
    for i in range(q):
        j = i + stream.below(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:q])


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (for per-trial RNGs)."""
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def select_roles(members: Sequence[str], randomness: bytes, k: int) -> tuple[str, list[str]]:
    """Inferencer = members[sigma(1)], verifiers = members[sigma(2..k+1)]."""
    if len(members) < k + 1:
        raise ValueError(f"need {k + 1} members, have {len(members)}")
    sigma = permutation(randomness, len(members))
    return members[sigma[0] - 1], [members[sigma[j] - 1] for j in range(1, k + 1)]
