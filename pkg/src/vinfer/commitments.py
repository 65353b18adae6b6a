"""Canonical tensor serialization, Merkle commitments and salted verdict commitments."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyLeafSet, IndexOutOfRange, MalformedSalt, NonFiniteScalar, ShapeMismatch

HASH_NAME = "sha256"
DIGEST_SIZE = 32
LEAF_TAG = b"vinfer.leaf.v1\x00"
NODE_TAG = b"vinfer.node.v1\x00"
VERDICT_TAG = b"vinfer.verdict.v1\x00"

# Header version encodes the odd-layer padding rule (1 = duplicate last digest).
SERIAL_VERSION = 1
_HEADER = struct.Struct("<BII")
CHUNK_SCALARS = 256
CHUNK_THRESHOLD = 1 << 20

LEFT, RIGHT = 0, 1


def _h(*parts: bytes) -> bytes:
    h = hashlib.new(HASH_NAME)
    for p in parts:
        h.update(p)
    return h.digest()


def leaf_hash(data: bytes) -> bytes:
    return _h(LEAF_TAG, data)


def node_hash(left: bytes, right: bytes) -> bytes:
    return _h(NODE_TAG, left, right)


@dataclass(frozen=True, eq=False)
class HiddenState:
    """Boundary activation for one token step: ``values`` has shape (token_count, hidden_dim)."""

    task_id: str
    segment_index: int
    token_index: int
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2:
            raise ShapeMismatch(f"hidden state must be 2-D, got {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteScalar("hidden state contains NaN or Inf")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, HiddenState):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.segment_index == other.segment_index
            and self.token_index == other.token_index
            and self.values.shape == other.values.shape
            and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32))
        )

    def __hash__(self):
        return hash((self.task_id, self.segment_index, self.token_index, self.values.tobytes()))

    def last_row(self) -> np.ndarray:
        return self.values[-1]


def canonical_serialize(hs: HiddenState | np.ndarray) -> bytes:
    values = hs.values if isinstance(hs, HiddenState) else np.asarray(hs, dtype=np.float32)
    if values.ndim == 1:
        values = values.reshape(1, -1)
    if not np.isfinite(values).all():
        raise NonFiniteScalar("cannot serialize NaN or Inf")
    rows, cols = values.shape
    body = np.ascontiguousarray(values, dtype="<f4").tobytes()
    return _HEADER.pack(SERIAL_VERSION, rows, cols) + body


def canonical_deserialize(data: bytes) -> np.ndarray:
    version, rows, cols = _HEADER.unpack_from(data)
    if version != SERIAL_VERSION:
        raise ValueError(f"unsupported serialization version {version}")
    body = data[_HEADER.size:]
    if len(body) != 4 * rows * cols:
        raise ShapeMismatch("payload length does not match header shape")
    return np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(rows, cols)


def scalar_leaves(values: np.ndarray, chunked: bool = False) -> list[bytes]:
    """Leaf payloads for a tensor: one 4-byte scalar each, or 256-scalar chunks."""
    flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    if not np.isfinite(flat).all():
        raise NonFiniteScalar("cannot commit NaN or Inf")
    raw = flat.tobytes()
    step = 4 * (CHUNK_SCALARS if chunked else 1)
    return [raw[i:i + step] for i in range(0, len(raw), step)]


@dataclass(frozen=True)
class MerkleCommitment:
    root: bytes
    leaf_count: int

    def to_record(self, task_id: str, segment: int, token: int) -> dict:
        return {"task_id": task_id, "segment": segment, "token": token,
                "root": self.root.hex(), "leaf_count": self.leaf_count}


@dataclass(frozen=True)
class InclusionProof:
    leaf_index: int
    leaf_value: bytes
    path: tuple[tuple[bytes, int], ...]

    @property
    def scalar(self) -> np.float32:
        return np.frombuffer(self.leaf_value, dtype="<f4")[0]

    def to_json(self) -> dict:
        return {"index": self.leaf_index, "value": self.leaf_value.hex(),
                "path": [[d.hex(), s] for d, s in self.path]}

    @classmethod
    def from_json(cls, obj: dict) -> "InclusionProof":
        return cls(int(obj["index"]), bytes.fromhex(obj["value"]),
                   tuple((bytes.fromhex(d), int(s)) for d, s in obj["path"]))


class MerkleTree:
    """Binary tree over tagged leaf hashes; odd layers duplicate their last digest."""

    def __init__(self, leaves: Sequence[bytes]):
        if len(leaves) == 0:
            raise EmptyLeafSet("a Merkle tree needs at least one leaf")
        self.leaves = list(leaves)
        level = [leaf_hash(x) for x in self.leaves]
        self.levels = [level]
        while len(level) > 1:
            if len(level) % 2:
                level = level + [level[-1]]
                self.levels[-1] = level
            level = [node_hash(level[i], level[i + 1]) for i in range(0, len(level), 2)]
            self.levels.append(level)

    @classmethod
    def from_values(cls, values: np.ndarray, chunked: bool = False) -> "MerkleTree":
        return cls(scalar_leaves(values, chunked))

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    def commitment(self) -> MerkleCommitment:
        return MerkleCommitment(self.root, self.leaf_count)

    def open(self, index: int) -> InclusionProof:
        if not 0 <= index < self.leaf_count:
            raise IndexOutOfRange(f"leaf {index} outside [0, {self.leaf_count})")
        path = []
        i = index
        for level in self.levels[:-1]:
            if i % 2:
                path.append((level[i - 1], LEFT))
            else:
                path.append((level[i + 1], RIGHT))
            i //= 2
        return InclusionProof(index, self.leaves[index], tuple(path))


def merkle_build(leaves: Sequence[bytes]) -> MerkleCommitment:
    return MerkleTree(leaves).commitment()


def merkle_open(tree: MerkleTree, index: int) -> InclusionProof:
    return tree.open(index)


def merkle_verify(root: bytes, proof: InclusionProof, leaf_count: int | None = None) -> bool:
    """Check ``proof`` against ``root``; sibling sides must match the index bits."""
    if leaf_count is not None:
        if not 0 <= proof.leaf_index < leaf_count:
            return False
        if len(proof.path) != proof_length(leaf_count):
            return False
    node = leaf_hash(proof.leaf_value)
    i = proof.leaf_index
    for sibling, side in proof.path:
        if side == LEFT and i % 2 == 1:
            node = node_hash(sibling, node)
        elif side == RIGHT and i % 2 == 0:
            node = node_hash(node, sibling)
        else:
            return False
        i //= 2
    return i == 0 and node == root


def proof_length(leaf_count: int) -> int:
    return max(leaf_count - 1, 0).bit_length()


def commit_state(values: np.ndarray) -> MerkleCommitment:
    return MerkleTree.from_values(values).commitment()


@dataclass(frozen=True)
class VerdictCommitment:
    digest: bytes


def _check_salt(salt: bytes) -> None:
    if not isinstance(salt, (bytes, bytearray)) or len(salt) != 32:
        raise MalformedSalt("salt must be exactly 32 bytes")


def commit_verdict(b: int, salt: bytes) -> VerdictCommitment:
    if b not in (0, 1):
        raise ValueError("verdict must be 0 or 1")
    _check_salt(salt)
    return VerdictCommitment(_h(VERDICT_TAG, bytes([b]), bytes(salt)))


def open_verdict(commitment: VerdictCommitment | bytes, b: int, salt: bytes) -> bool:
    _check_salt(salt)
    if b not in (0, 1):
        return False
    digest = commitment.digest if isinstance(commitment, VerdictCommitment) else commitment
    return _h(VERDICT_TAG, bytes([b]), bytes(salt)) == digest


# trace files ----------------------------------------------------------------

TRACE_MAGIC = b"VTRC"
_TRACE_HEAD = struct.Struct("<4sBI")
_REC_HEAD = struct.Struct("<II")


def write_trace(path: str | Path, states: Iterable[HiddenState]) -> None:
    """One file per (task, segment): magic, version, task id, then length-prefixed states."""
    states = list(states)
    if not states:
        raise ValueError("no states to write")
    task = states[0].task_id.encode()
    seg = states[0].segment_index
    if any(s.task_id != states[0].task_id or s.segment_index != seg for s in states):
        raise ValueError("a trace file holds a single (task, segment)")
    out = bytearray(_TRACE_HEAD.pack(TRACE_MAGIC, SERIAL_VERSION, seg))
    out += struct.pack("<H", len(task)) + task
    for s in states:
        blob = canonical_serialize(s)
        out += _REC_HEAD.pack(s.token_index, len(blob)) + blob
    Path(path).write_bytes(bytes(out))


def read_trace(path: str | Path) -> list[HiddenState]:
    data = Path(path).read_bytes()
    magic, version, seg = _TRACE_HEAD.unpack_from(data)
    if magic != TRACE_MAGIC or version != SERIAL_VERSION:
        raise ValueError(f"{path}: not a trace file")
    off = _TRACE_HEAD.size
    (tlen,) = struct.unpack_from("<H", data, off)
    off += 2
    task = data[off:off + tlen].decode()
    off += tlen
    states = []
    while off < len(data):
        token, blen = _REC_HEAD.unpack_from(data, off)
        off += _REC_HEAD.size
        states.append(HiddenState(task, seg, token, canonical_deserialize(data[off:off + blen])))
        off += blen
    return states


def commitment_record_json(commitment: MerkleCommitment, task_id: str, segment: int, token: int) -> str:
    return json.dumps(commitment.to_record(task_id, segment, token), sort_keys=True)
