"""Node registry, stake ledger and the signature primitive for relay records."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .errors import (
    DuplicateKey,
    InsufficientGroupSize,
    InsufficientStake,
    NotActive,
    UncoveredSlice,
    UnknownNode,
    WithdrawalLocked,
)
from .randomness import VrfKeypair

SIG_TAG = b"vinfer.sig.v1\x00"

KeyPair = VrfKeypair  # same Ed25519 key material serves signing and VRF evaluation


@dataclass(frozen=True)
class Signature:
    signer: str
    digest: bytes
    sig: bytes

    def to_json(self) -> dict:
        return {"signer": self.signer, "digest": self.digest.hex(), "sig": self.sig.hex()}

    @classmethod
    def from_json(cls, obj: dict) -> "Signature":
        return cls(obj["signer"], bytes.fromhex(obj["digest"]), bytes.fromhex(obj["sig"]))


def message_digest(message: bytes) -> bytes:
    return hashlib.sha256(SIG_TAG + message).digest()


def relay_message(task_hash: bytes, stage: int, token: int, root: bytes) -> bytes:
    """Byte encoding of the relay tuple (h, i, t, root) that both parties sign."""
    return b"relay" + struct.pack("<I", len(task_hash)) + task_hash + struct.pack("<II", stage, token) + root


def sign(secret: bytes, message: bytes, signer: str = "") -> Signature:
    digest = message_digest(message)
    sig = Ed25519PrivateKey.from_private_bytes(secret).sign(digest)
    return Signature(signer, digest, sig)


def verify(public: bytes, message: bytes, sig: Signature) -> bool:
    digest = message_digest(message)
    if digest != sig.digest:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig.sig, digest)
    except (InvalidSignature, ValueError):
        return False
    return True


# ledger ----------------------------------------------------------------------

class Ledger:
    """Integer token accounts. Every mutation is a move, so the total never changes."""

    TREASURY = "treasury"

    def __init__(self, balances: dict[str, int] | None = None):
        self.accounts: dict[str, int] = {self.TREASURY: 0}
        for k, v in (balances or {}).items():
            self.accounts[k] = self.accounts.get(k, 0) + int(v)

    def balance(self, account: str) -> int:
        return self.accounts.get(account, 0)

    def move(self, src: str, dst: str, amount: int) -> int:
        """Move up to ``amount`` tokens; returns what actually moved (capped by the source)."""
        amount = int(amount)
        if amount <= 0:
            return 0
        have = self.accounts.get(src, 0)
        if src != self.TREASURY:
            amount = min(amount, have)
        if amount <= 0:
            return 0
        self.accounts[src] = have - amount
        self.accounts[dst] = self.accounts.get(dst, 0) + amount
        return amount

    def total(self) -> int:
        return sum(self.accounts.values())

    def snapshot(self) -> dict[str, int]:
        return dict(sorted(self.accounts.items()))


def stake_account(node_id: str) -> str:
    return f"stake:{node_id}"


def wallet(node_id: str) -> str:
    return f"wallet:{node_id}"


# registry --------------------------------------------------------------------

class Status(str, Enum):
    ACTIVE = "active"
    WITHDRAWING = "withdrawing"
    EXITED = "exited"


@dataclass
class NodeRecord:
    node_id: str
    public_key: bytes
    model_id: str
    slice: tuple[int, int]
    endpoint: str = ""
    role: str = "worker"  # or "scheduler"
    status: Status = Status.ACTIVE
    until_round: int | None = None

    def to_json(self) -> dict:
        return {"node_id": self.node_id, "public_key": self.public_key.hex(), "model_id": self.model_id,
                "slice": list(self.slice), "endpoint": self.endpoint, "role": self.role,
                "status": self.status.value, "until_round": self.until_round}


@dataclass(frozen=True)
class RegistryConfig:
    min_stake: int = 1000
    withdrawal_delay: int = 10
    k_min: int = 1


@dataclass(frozen=True)
class Group:
    model_id: str
    slice: tuple[int, int]
    members: tuple[str, ...]


class Registry:
    """Event-sourced node registry backed by a :class:`Ledger`."""

    def __init__(self, config: RegistryConfig | None = None, ledger: Ledger | None = None):
        self.config = config or RegistryConfig()
        self.ledger = ledger if ledger is not None else Ledger()
        self.nodes: dict[str, NodeRecord] = {}
        self._keys: set[bytes] = set()
        self.round = 0
        self.events: list[dict] = []

    def _emit(self, kind: str, **payload) -> None:
        self.events.append({"round": self.round, "kind": kind, **payload})

    def node(self, node_id: str) -> NodeRecord:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id) from None

    def stake(self, node_id: str) -> int:
        return self.ledger.balance(stake_account(node_id))

    def register(self, node_id: str, public_key: bytes, model_id: str, slice_: tuple[int, int],
                 stake: int, endpoint: str = "", role: str = "worker") -> str:
        lo, hi = slice_
        if lo > hi:
            raise ValueError("slice range must be non-empty")
        if stake < self.config.min_stake:
            raise InsufficientStake(f"stake {stake} below minimum {self.config.min_stake}")
        if public_key in self._keys or node_id in self.nodes:
            raise DuplicateKey(f"key or id already registered: {node_id}")
        if self.ledger.balance(wallet(node_id)) < stake:
            raise InsufficientStake(f"{node_id} wallet cannot cover stake {stake}")
        self.ledger.move(wallet(node_id), stake_account(node_id), stake)
        self.nodes[node_id] = NodeRecord(node_id, bytes(public_key), model_id, (lo, hi), endpoint, role)
        self._keys.add(bytes(public_key))
        self._emit("register", node_id=node_id, public_key=public_key.hex(), model_id=model_id,
                   slice=[lo, hi], stake=stake, endpoint=endpoint, role=role)
        return node_id

    def deregister(self, node_id: str) -> int:
        rec = self.node(node_id)
        if rec.status is not Status.ACTIVE:
            raise NotActive(f"{node_id} is {rec.status.value}")
        rec.status = Status.WITHDRAWING
        rec.until_round = self.round + self.config.withdrawal_delay
        self._emit("deregister", node_id=node_id, until_round=rec.until_round)
        return rec.until_round

    def penalize(self, node_id: str, amount: int, reason: str = "", to: str = Ledger.TREASURY) -> int:
        """Slash stake; penalties always apply while the node is still withdrawing."""
        rec = self.node(node_id)
        if rec.status is Status.EXITED:
            return 0
        taken = self.ledger.move(stake_account(node_id), to, amount)
        self._emit("penalty", node_id=node_id, amount=taken, reason=reason, to=to)
        return taken

    def withdraw(self, node_id: str) -> int:
        rec = self.node(node_id)
        if rec.status is not Status.WITHDRAWING:
            raise NotActive(f"{node_id} has not deregistered")
        if self.round < rec.until_round:
            raise WithdrawalLocked(f"{node_id} locked until round {rec.until_round}")
        amount = self.ledger.move(stake_account(node_id), wallet(node_id), self.stake(node_id))
        rec.status = Status.EXITED
        self._emit("withdraw", node_id=node_id, amount=amount)
        return amount

    def advance(self, rounds: int = 1) -> int:
        self.round += rounds
        self._emit("advance", rounds=rounds)
        return self.round

    def is_active(self, node_id: str) -> bool:
        rec = self.nodes.get(node_id)
        return rec is not None and rec.status is Status.ACTIVE and self.stake(node_id) >= self.config.min_stake

    def group_snapshot(self, model_id: str, k_min: int | None = None) -> list[Group]:
        """Ordered groups covering the model's layers; members in registration order."""
        k_min = self.config.k_min if k_min is None else k_min
        by_slice: dict[tuple[int, int], list[str]] = {}
        for nid, rec in self.nodes.items():
            if rec.role == "worker" and rec.model_id == model_id and self.is_active(nid):
                by_slice.setdefault(rec.slice, []).append(nid)
        if not by_slice:
            raise UncoveredSlice(f"no active nodes serve model {model_id}")
        slices = sorted(by_slice)
        expect = slices[0][0]
        if expect != 1:
            raise UncoveredSlice(f"layers 1..{expect - 1} uncovered")
        for lo, hi in slices:
            if lo != expect:
                kind = "overlap" if lo < expect else "gap"
                raise UncoveredSlice(f"slice ({lo},{hi}) leaves a {kind} at layer {expect}")
            expect = hi + 1
        groups = []
        for s in slices:
            members = by_slice[s]
            if len(members) < 1 + k_min:
                raise InsufficientGroupSize(f"slice {s} has {len(members)} nodes, needs {1 + k_min}")
            groups.append(Group(model_id, s, tuple(members)))
        return groups

    def conservation_total(self) -> int:
        return self.ledger.total()

    # replay -------------------------------------------------------------------

    @classmethod
    def replay(cls, events: Iterable[dict], config: RegistryConfig | None = None,
               balances: dict[str, int] | None = None) -> "Registry":
        reg = cls(config, Ledger(balances))
        for ev in events:
            kind = ev["kind"]
            reg.round = ev["round"] - (ev["rounds"] if kind == "advance" else 0)
            if kind == "register":
                reg.register(ev["node_id"], bytes.fromhex(ev["public_key"]), ev["model_id"],
                             tuple(ev["slice"]), ev["stake"], ev.get("endpoint", ""), ev.get("role", "worker"))
            elif kind == "deregister":
                reg.deregister(ev["node_id"])
            elif kind == "penalty":
                reg.penalize(ev["node_id"], ev["amount"], ev.get("reason", ""), ev.get("to", Ledger.TREASURY))
            elif kind == "withdraw":
                reg.withdraw(ev["node_id"])
            elif kind == "advance":
                reg.advance(ev["rounds"])
            else:
                raise ValueError(f"unknown registry event {kind!r}")
        return reg

    def dump_events(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)
