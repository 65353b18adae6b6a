"""On-chain verification state machine with a replayable event log.

Every public operation is executed through :meth:`Contract._call`, which
appends one line-JSON event ``{seq, op, args, result, error, state_root}``.
Replaying the log against a fresh contract re-runs every VRF, signature and
Merkle check and must reproduce each result and state root.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import errors
from .bitstats import ON_CHAIN, accept, compare_arrays, mantissa_diffs
from .clustering import cluster
from .commitments import InclusionProof, merkle_verify, open_verdict
from .errors import (
    CommitMismatch,
    CommitPhaseOpen,
    CommitteeTooSmall,
    DoubleCommit,
    EvidenceInvalid,
    InsufficientEscrow,
    MerkleInvalid,
    MissingTailToken,
    NotInCommittee,
    NotRejected,
    SignatureInvalid,
    VinferError,
    VrfInvalid,
    WrongPhase,
)
from .identity import Ledger, Registry, RegistryConfig, Signature, relay_message, stake_account, verify, wallet
from .identity import sign as _sign
from .randomness import (
    VrfKeypair,
    VrfOutput,
    assignment_transcript,
    dispute_transcript,
    permutation,
    sample_indices,
    sampling_transcript,
    select_roles,
    vrf_verify,
)

# Three times the spread of honest per-scalar significand drift (see experiments.estimate_delta).
DEFAULT_DELTA = 1e-6
ZK_TAG = b"vinfer.zk.v1\x00"


class Phase(str, Enum):
    COMMIT = "commit"
    SAMPLED = "sampled"
    REVEAL = "reveal"
    ADJUDICATED = "adjudicated"
    DISPUTED = "disputed"
    FINAL = "final"


class Verdict(str, Enum):
    ACCEPT = "accept_inferencer"
    REJECT = "reject_inferencer"
    AMBIGUOUS = "ambiguous"


@dataclass(frozen=True)
class Economics:
    r_inf: int = 100
    verify_cost: int = 10
    r_ver: int | None = None  # committee pool; default 1.5 * m * verify_cost
    slash: int | None = None  # per verifier; default 2 * pool / m
    slash_inf: int = 200
    slash_scheduler: int = 500
    complaint_share: float = 0.5

    def pool(self, m: int) -> int:
        return self.r_ver if self.r_ver is not None else math.ceil(1.5 * m * self.verify_cost)

    def verifier_slash(self, m: int) -> int:
        return self.slash if self.slash is not None else (2 * self.pool(m)) // m

    def fee(self, m: int) -> int:
        return self.pool(m) // m


@dataclass(frozen=True)
class ContractConfig:
    economics: Economics = field(default_factory=Economics)
    registry: RegistryConfig = field(default_factory=RegistryConfig)
    tau: float = 0.7
    delta: float = DEFAULT_DELTA
    commit_window: int = 2
    reveal_window: int = 2
    sample_size: int = 16
    oracle_public: bytes = b""

    def to_json(self) -> dict:
        d = asdict(self)
        d["oracle_public"] = self.oracle_public.hex()
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ContractConfig":
        return cls(Economics(**obj["economics"]), RegistryConfig(**obj["registry"]), obj["tau"], obj["delta"],
                   obj["commit_window"], obj["reveal_window"], obj["sample_size"],
                   bytes.fromhex(obj["oracle_public"]))


def cluster_quorum(tau: float, m: int) -> int:
    """ceil(tau * m) computed exactly on the decimal value of tau."""
    return math.ceil(Fraction(str(tau)) * m)


# messages ---------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPackage:
    round_id: int
    vrf: VrfOutput
    indices: tuple[int, ...]
    values: tuple[bytes, ...]
    inf_root: bytes
    inf_sig: Signature
    proofs: tuple[InclusionProof, ...]

    def to_json(self) -> dict:
        return {"round_id": self.round_id, "vrf": self.vrf.to_json(), "indices": list(self.indices),
                "values": [v.hex() for v in self.values], "inf_root": self.inf_root.hex(),
                "inf_sig": self.inf_sig.to_json(), "proofs": [p.to_json() for p in self.proofs]}

    @classmethod
    def from_json(cls, obj: dict) -> "SamplingPackage":
        return cls(obj["round_id"], VrfOutput.from_json(obj["vrf"]), tuple(obj["indices"]),
                   tuple(bytes.fromhex(v) for v in obj["values"]), bytes.fromhex(obj["inf_root"]),
                   Signature.from_json(obj["inf_sig"]), tuple(InclusionProof.from_json(p) for p in obj["proofs"]))


@dataclass(frozen=True)
class RelayEvidence:
    """Scheduler countersignature and a conflicting signed root for the same (h, i, t)."""

    task_hash: bytes
    stage: int
    token: int
    scheduler_id: str
    scheduler_root: bytes
    scheduler_sig: Signature
    signer_id: str
    signer_root: bytes
    signer_sig: Signature

    def to_json(self) -> dict:
        return {"task_hash": self.task_hash.hex(), "stage": self.stage, "token": self.token,
                "scheduler_id": self.scheduler_id, "scheduler_root": self.scheduler_root.hex(),
                "scheduler_sig": self.scheduler_sig.to_json(), "signer_id": self.signer_id,
                "signer_root": self.signer_root.hex(), "signer_sig": self.signer_sig.to_json()}

    @classmethod
    def from_json(cls, o: dict) -> "RelayEvidence":
        return cls(bytes.fromhex(o["task_hash"]), o["stage"], o["token"], o["scheduler_id"],
                   bytes.fromhex(o["scheduler_root"]), Signature.from_json(o["scheduler_sig"]),
                   o["signer_id"], bytes.fromhex(o["signer_root"]), Signature.from_json(o["signer_sig"]))


def zk_statement(task_hash: bytes, stage: int, root: bytes) -> bytes:
    return ZK_TAG + task_hash + stage.to_bytes(4, "little") + root


class ZkOracle:
    """Stand-in for a zero-knowledge proof of incorrect execution.

    It knows the simulator's ground truth and attests only to real deviations.
    """

    def __init__(self, keypair: VrfKeypair):
        self.keypair = keypair

    @property
    def public(self) -> bytes:
        return self.keypair.public

    def prove(self, task_hash: bytes, stage: int, root: bytes, output_is_honest: bool) -> Signature | None:
        if output_is_honest:
            return None
        return _sign(self.keypair.secret, zk_statement(task_hash, stage, root), "zk-oracle")


# JSON codec for the event log -------------------------------------------------------

def enc(o):
    if isinstance(o, (bytes, bytearray)):
        return {"$bytes": bytes(o).hex()}
    if isinstance(o, InclusionProof):
        return {"$proof": o.to_json()}
    if isinstance(o, VrfOutput):
        return {"$vrf": o.to_json()}
    if isinstance(o, Signature):
        return {"$sig": o.to_json()}
    if isinstance(o, SamplingPackage):
        return {"$package": o.to_json()}
    if isinstance(o, RelayEvidence):
        return {"$evidence": o.to_json()}
    if isinstance(o, Enum):
        return o.value
    if isinstance(o, (list, tuple)):
        return [enc(x) for x in o]
    if isinstance(o, dict):
        return {str(k): enc(v) for k, v in o.items()}
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    return o


_DECODERS = {
    "$bytes": bytes.fromhex,
    "$proof": InclusionProof.from_json,
    "$vrf": VrfOutput.from_json,
    "$sig": Signature.from_json,
    "$package": SamplingPackage.from_json,
    "$evidence": RelayEvidence.from_json,
}


def dec(o):
    if isinstance(o, dict):
        if len(o) == 1:
            (k, v), = o.items()
            if k in _DECODERS:
                return _DECODERS[k](v)
        return {k: dec(v) for k, v in o.items()}
    if isinstance(o, list):
        return [dec(x) for x in o]
    return o


# round state ------------------------------------------------------------------

@dataclass
class RevealRecord:
    b: int
    values: np.ndarray
    tail_token: int | None

    def to_json(self) -> dict:
        return {"b": self.b, "values": self.values.astype("<f4").tobytes().hex(), "tail_token": self.tail_token}


@dataclass
class Outcome:
    verdict: Verdict
    deltas: dict[str, int]
    evidence: dict[str, str]
    b_count: int = 0
    cluster: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"verdict": self.verdict.value, "deltas": dict(sorted(self.deltas.items())),
                "evidence": dict(sorted(self.evidence.items())), "B": self.b_count, "cluster": list(self.cluster)}


@dataclass
class VerificationRound:
    round_id: int
    task_hash: bytes
    stage: int
    model_id: str
    is_tail: bool
    scheduler: str
    inferencer: str
    committee: tuple[str, ...]
    inf_root: bytes
    leaf_count: int
    final_step: int
    claimed_token: int | None
    commit_deadline: int
    phase: Phase = Phase.COMMIT
    commitments: dict[str, bytes] = field(default_factory=dict)
    state_roots: dict[str, tuple[bytes, int]] = field(default_factory=dict)
    indices: tuple[int, ...] = ()
    inf_values: np.ndarray | None = None
    reveal_deadline: int = 0
    reveals: dict[str, RevealRecord] = field(default_factory=dict)
    outcome: Outcome | None = None
    parent: int | None = None
    child: int | None = None
    escrow: int = 0
    inf_slashed: int = 0

    @property
    def m(self) -> int:
        return len(self.committee)

    def to_json(self) -> dict:
        return {
            "round_id": self.round_id, "task_hash": self.task_hash.hex(), "stage": self.stage,
            "phase": self.phase.value, "inferencer": self.inferencer, "committee": list(self.committee),
            "inf_root": self.inf_root.hex(), "claimed_token": self.claimed_token,
            "commitments": {k: v.hex() for k, v in sorted(self.commitments.items())},
            "state_roots": {k: [r.hex(), n] for k, (r, n) in sorted(self.state_roots.items())},
            "indices": list(self.indices),
            "inf_values": None if self.inf_values is None else self.inf_values.astype("<f4").tobytes().hex(),
            "reveals": {k: v.to_json() for k, v in sorted(self.reveals.items())},
            "outcome": None if self.outcome is None else self.outcome.to_json(),
            "parent": self.parent, "child": self.child, "escrow": self.escrow, "inf_slashed": self.inf_slashed,
        }


def opening_point(values: np.ndarray, token: int | None) -> np.ndarray:
    """Cluster point: sampled float32 values followed by the tail token (-1 off the tail)."""
    return np.concatenate([np.asarray(values, dtype=np.float64), [-1.0 if token is None else float(token)]])


def opening_distance(a: np.ndarray, b: np.ndarray) -> float:
    if a[-1] != b[-1]:
        return math.inf
    return float(np.mean(np.abs(mantissa_diffs(a[:-1].astype(np.float32), b[:-1].astype(np.float32)))))


# contract ---------------------------------------------------------------------

class Contract:
    def __init__(self, config: ContractConfig | None = None, balances: dict[str, int] | None = None):
        self.config = config or ContractConfig()
        self.ledger = Ledger(balances)
        self.registry = Registry(self.config.registry, self.ledger)
        self.rounds: dict[int, VerificationRound] = {}
        self.complaints: set[tuple[str, int, int]] = set()
        self.now = 0
        self.events: list[dict] = []
        self._genesis_balances = dict(balances or {})
        self._record("genesis", {"config": self.config.to_json(), "balances": self._genesis_balances},
                     None, None)

    # log plumbing ---------------------------------------------------------------

    def state_root(self) -> bytes:
        state = {
            "now": self.now,
            "ledger": self.ledger.snapshot(),
            "nodes": {k: v.to_json() for k, v in sorted(self.registry.nodes.items())},
            "rounds": {str(k): r.to_json() for k, r in sorted(self.rounds.items())},
            "complaints": sorted([h, i, t] for h, i, t in self.complaints),
        }
        return hashlib.sha256(json.dumps(state, sort_keys=True).encode()).digest()

    def _record(self, op: str, args: dict, result, error) -> dict:
        ev = {"seq": len(self.events), "op": op, "args": enc(args), "result": enc(result),
              "error": error, "state_root": self.state_root().hex()}
        self.events.append(ev)
        return ev

    def _call(self, op: str, args: dict):
        fn = getattr(self, "_op_" + op)
        try:
            result = fn(**args)
        except VinferError as exc:
            self._record(op, args, None, {"type": type(exc).__name__, "message": str(exc)})
            raise
        self._record(op, args, result, None)
        return result

    def dump_log(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.dump_log())

    # helpers ---------------------------------------------------------------------

    def round(self, round_id: int) -> VerificationRound:
        try:
            return self.rounds[round_id]
        except KeyError:
            raise WrongPhase(f"unknown round {round_id}") from None

    def _pay(self, node_id: str, amount: int) -> int:
        return self.ledger.move(Ledger.TREASURY, wallet(node_id), amount)

    def _slash(self, node_id: str, amount: int, reason: str) -> int:
        return self.registry.penalize(node_id, amount, reason)

    def _public(self, node_id: str) -> bytes:
        return self.registry.node(node_id).public_key

    # registry and clock -----------------------------------------------------------

    def register(self, node_id: str, public_key: bytes, model_id: str, slice_: Sequence[int], stake: int,
                 endpoint: str = "", role: str = "worker") -> str:
        return self._call("register", dict(node_id=node_id, public_key=public_key, model_id=model_id,
                                           slice_=list(slice_), stake=stake, endpoint=endpoint, role=role))

    def _op_register(self, node_id, public_key, model_id, slice_, stake, endpoint, role):
        return self.registry.register(node_id, public_key, model_id, tuple(slice_), stake, endpoint, role)

    def deregister(self, node_id: str) -> int:
        return self._call("deregister", dict(node_id=node_id))

    def _op_deregister(self, node_id):
        return self.registry.deregister(node_id)

    def withdraw(self, node_id: str) -> int:
        return self._call("withdraw", dict(node_id=node_id))

    def _op_withdraw(self, node_id):
        return self.registry.withdraw(node_id)

    def advance(self, ticks: int = 1) -> int:
        return self._call("advance", dict(ticks=ticks))

    def _op_advance(self, ticks):
        if ticks < 1:
            raise errors.VinferError("ticks must be positive")
        self.now += ticks
        self.registry.advance(ticks)
        for rnd in self.rounds.values():
            if rnd.phase is Phase.COMMIT and self.now >= rnd.commit_deadline and rnd.commitments:
                rnd.phase = Phase.SAMPLED
        return self.now

    # rounds --------------------------------------------------------------------------

    def open_round(self, task_hash: bytes, stage: int, model_id: str, k: int, scheduler: str,
                   assignment_vrf: VrfOutput, inf_root: bytes, leaf_count: int, final_step: int,
                   inf_sig: Signature, claimed_token: int | None = None) -> int:
        return self._call("open_round", dict(
            task_hash=task_hash, stage=stage, model_id=model_id, k=k, scheduler=scheduler,
            assignment_vrf=assignment_vrf, inf_root=inf_root, leaf_count=leaf_count, final_step=final_step,
            inf_sig=inf_sig, claimed_token=claimed_token))

    def _op_open_round(self, task_hash, stage, model_id, k, scheduler, assignment_vrf, inf_root,
                       leaf_count, final_step, inf_sig, claimed_token):
        sched = self.registry.node(scheduler)
        if sched.role != "scheduler":
            raise SignatureInvalid(f"{scheduler} is not a registered scheduler")
        groups = self.registry.group_snapshot(model_id, k_min=k)
        group = groups[stage - 1]
        transcript = assignment_transcript(task_hash, stage, len(group.members))
        if not vrf_verify(sched.public_key, transcript, assignment_vrf):
            raise VrfInvalid(f"assignment proof for stage {stage} does not verify")
        inferencer, committee = select_roles(group.members, assignment_vrf.randomness, k)
        msg = relay_message(task_hash, stage, final_step, inf_root)
        if inf_sig.signer != inferencer or not verify(self._public(inferencer), msg, inf_sig):
            raise SignatureInvalid(f"root signature is not from the selected inferencer {inferencer}")
        is_tail = stage == len(groups)
        if is_tail and claimed_token is None:
            raise MissingTailToken("tail round needs the claimed final token")
        rid = len(self.rounds)
        self.rounds[rid] = VerificationRound(
            rid, task_hash, stage, model_id, is_tail, scheduler, inferencer, tuple(committee), inf_root,
            leaf_count, final_step, claimed_token if is_tail else None, self.now + self.config.commit_window)
        return rid

    def submit_verdict_commitment(self, round_id: int, verifier: str, digest: bytes, state_root: bytes,
                                  leaf_count: int) -> str:
        return self._call("submit_verdict_commitment", dict(
            round_id=round_id, verifier=verifier, digest=digest, state_root=state_root, leaf_count=leaf_count))

    def _op_submit_verdict_commitment(self, round_id, verifier, digest, state_root, leaf_count):
        rnd = self.round(round_id)
        if rnd.phase is not Phase.COMMIT or self.now >= rnd.commit_deadline:
            raise WrongPhase(f"round {round_id} is not accepting commitments")
        if verifier not in rnd.committee:
            raise NotInCommittee(f"{verifier} is not on round {round_id}'s committee")
        if verifier in rnd.commitments:
            raise DoubleCommit(f"{verifier} already committed")
        rnd.commitments[verifier] = bytes(digest)
        rnd.state_roots[verifier] = (bytes(state_root), int(leaf_count))
        if len(rnd.commitments) == rnd.m:
            rnd.phase = Phase.SAMPLED
        return rnd.phase.value

    def close_commit(self, round_id: int) -> str:
        return self._call("close_commit", dict(round_id=round_id))

    def _op_close_commit(self, round_id):
        rnd = self.round(round_id)
        if rnd.phase is not Phase.COMMIT or self.now < rnd.commit_deadline:
            raise CommitPhaseOpen(f"round {round_id} commit window still open")
        rnd.phase = Phase.SAMPLED
        return rnd.phase.value

    def sampling_roots(self, round_id: int) -> list[bytes]:
        rnd = self.round(round_id)
        return [rnd.state_roots[v][0] for v in rnd.committee if v in rnd.state_roots]

    def check_sampling_package(self, round_id: int, package: SamplingPackage) -> tuple[int, ...]:
        return self._call("check_sampling_package", dict(round_id=round_id, package=package))

    def _op_check_sampling_package(self, round_id, package):
        rnd = self.round(round_id)
        if rnd.phase is Phase.COMMIT:
            raise CommitPhaseOpen(f"round {round_id}: commitments are not final yet")
        if rnd.phase is not Phase.SAMPLED:
            raise WrongPhase(f"round {round_id} is {rnd.phase.value}")
        transcript = sampling_transcript(rnd.task_hash, rnd.stage, self.sampling_roots(round_id))
        if not vrf_verify(self._public(rnd.scheduler), transcript, package.vrf):
            raise VrfInvalid("sampling VRF does not verify over the posted commitments")
        if package.inf_root != rnd.inf_root or package.inf_sig.signer != rnd.inferencer or not verify(
                self._public(rnd.inferencer), relay_message(rnd.task_hash, rnd.stage, rnd.final_step, rnd.inf_root),
                package.inf_sig):
            raise SignatureInvalid("inferencer signature on the final root does not verify")
        size = min(self.config.sample_size, rnd.leaf_count)
        expected = sample_indices(package.vrf.randomness, rnd.leaf_count, size)
        if len(package.indices) != size or len(package.proofs) != size or len(package.values) != size:
            raise MerkleInvalid("sample size mismatch", -1)
        for idx, want, val, proof in zip(package.indices, expected, package.values, package.proofs):
            if (idx != want or proof.leaf_index != want or proof.leaf_value != val
                    or not merkle_verify(rnd.inf_root, proof, rnd.leaf_count)):
                raise MerkleInvalid(f"inclusion proof fails at index {idx}", idx)
        rnd.indices = tuple(expected)
        rnd.inf_values = np.frombuffer(b"".join(package.values), dtype="<f4").astype(np.float32)
        rnd.phase = Phase.REVEAL
        rnd.reveal_deadline = self.now + self.config.reveal_window
        return tuple(expected)

    def reveal(self, round_id: int, verifier: str, b: int, salt: bytes, openings: Sequence[InclusionProof],
               tail_token: int | None = None) -> str:
        return self._call("reveal", dict(round_id=round_id, verifier=verifier, b=b, salt=salt,
                                         openings=list(openings), tail_token=tail_token))

    def _op_reveal(self, round_id, verifier, b, salt, openings, tail_token):
        rnd = self.round(round_id)
        if rnd.phase is not Phase.REVEAL or self.now >= rnd.reveal_deadline:
            raise WrongPhase(f"round {round_id} is not accepting reveals")
        if verifier not in rnd.commitments:
            raise NotInCommittee(f"{verifier} has no commitment in round {round_id}")
        if verifier in rnd.reveals:
            raise DoubleCommit(f"{verifier} already revealed")
        if not open_verdict(rnd.commitments[verifier], b, salt):
            raise CommitMismatch(f"{verifier}'s verdict and salt do not open the commitment")
        root, count = rnd.state_roots[verifier]
        if len(openings) != len(rnd.indices):
            raise MerkleInvalid("wrong number of openings", -1)
        for idx, proof in zip(rnd.indices, openings):
            if proof.leaf_index != idx or not merkle_verify(root, proof, count):
                raise MerkleInvalid(f"{verifier}'s opening fails at index {idx}", idx)
        if rnd.is_tail and tail_token is None:
            raise MissingTailToken(f"{verifier} must report its decoded tail token")
        values = np.frombuffer(b"".join(p.leaf_value for p in openings), dtype="<f4").astype(np.float32)
        rnd.reveals[verifier] = RevealRecord(int(b), values, int(tail_token) if rnd.is_tail else None)
        return verifier

    def _agrees_with_inferencer(self, rnd: VerificationRound, rec: RevealRecord) -> bool:
        if rnd.is_tail and rec.tail_token != rnd.claimed_token:
            return False
        if rec.values.size == 0:
            return True
        return accept(compare_arrays(rnd.inf_values, rec.values, ON_CHAIN), ON_CHAIN)

    def adjudicate(self, round_id: int) -> dict:
        return self._call("adjudicate", dict(round_id=round_id))

    def _op_adjudicate(self, round_id):
        rnd = self.round(round_id)
        if rnd.phase is not Phase.REVEAL:
            raise WrongPhase(f"round {round_id} is {rnd.phase.value}, not reveal")
        if len(rnd.reveals) < len(rnd.commitments) and self.now < rnd.reveal_deadline:
            raise WrongPhase(f"round {round_id}: reveal window still open")
        econ = self.config.economics
        before = self.ledger.snapshot()
        m = rnd.m
        pool = econ.pool(m)
        slash_v = econ.verifier_slash(m)
        evidence: dict[str, str] = {}
        b_count = sum(r.b for r in rnd.reveals.values())
        penalize: list[str] = [v for v in rnd.committee if v not in rnd.reveals]
        for v in penalize:
            evidence[v] = "no valid reveal"
        winners: list[str] = []
        if 2 * b_count >= m:
            verdict = Verdict.ACCEPT
            for v in rnd.committee:
                rec = rnd.reveals.get(v)
                if rec is None:
                    continue
                if rec.b == 1 and self._agrees_with_inferencer(rnd, rec):
                    winners.append(v)
                else:
                    penalize.append(v)
                    evidence[v] = "voted False" if rec.b == 0 else "opening disagrees with accepted output"
        else:
            false_voters = [v for v in rnd.committee if v in rnd.reveals and rnd.reveals[v].b == 0]
            q = cluster_quorum(self.config.tau, m)
            result = None
            if false_voters:
                pts = [opening_point(rnd.reveals[v].values, rnd.reveals[v].tail_token) for v in false_voters]
                inf_pt = opening_point(rnd.inf_values, rnd.claimed_token)
                # the quorum may exceed the number of False-voters; cluster() only needs q for labelling
                result = cluster(pts, self.config.delta, max(q, len(pts) // 2 + 1), opening_distance, inf_pt)
            proper = result.proper_cluster if result is not None else None
            if proper is not None and len(proper) >= q and not result.inferencer_accepted:
                verdict = Verdict.REJECT
                winners = [false_voters[i] for i in proper]
                for v in false_voters:
                    if v not in winners:
                        penalize.append(v)
                        evidence[v] = "outside the convergent cluster"
            else:
                verdict = Verdict.AMBIGUOUS
        if verdict is Verdict.REJECT:
            if rnd.parent is None:
                rnd.inf_slashed = self._slash(rnd.inferencer, econ.slash_inf, "rejected output")
                evidence[rnd.inferencer] = "rejected by convergent cluster"
        else:
            self._pay(rnd.inferencer, econ.r_inf)
        if winners:
            share = pool // len(winners)
            for v in winners:
                self._pay(v, share)
        for v in penalize:
            self._slash(v, slash_v, evidence[v])
        rnd.phase = Phase.ADJUDICATED
        if rnd.parent is not None:
            self._settle_dispute(rnd, verdict, evidence)
        after = self.ledger.snapshot()
        deltas = {k: after.get(k, 0) - before.get(k, 0) for k in set(before) | set(after)
                  if after.get(k, 0) != before.get(k, 0)}
        rnd.outcome = Outcome(verdict, deltas, evidence, b_count, tuple(winners) if verdict is Verdict.REJECT else ())
        return rnd.outcome.to_json()

    def _settle_dispute(self, child: VerificationRound, verdict: Verdict, evidence: dict) -> None:
        parent = self.rounds[child.parent]
        escrow_acct = f"escrow:{child.round_id}"
        if verdict is Verdict.REJECT:
            # inferencer bears the cost of the extra verifiers
            self.ledger.move(escrow_acct, Ledger.TREASURY, child.escrow)
        else:
            self.ledger.move(Ledger.TREASURY, stake_account(parent.inferencer), parent.inf_slashed)
            self.ledger.move(escrow_acct, wallet(parent.inferencer), child.escrow)
            if verdict is Verdict.ACCEPT:
                econ = self.config.economics
                slash_v = econ.verifier_slash(parent.m)
                for v, rec in parent.reveals.items():
                    if rec.b == 0:
                        self._slash(v, slash_v, "first-round negative vote overturned")
                        evidence[v] = "first-round negative vote overturned"
                vindicated = [v for v, rec in parent.reveals.items() if rec.b == 1]
                for v in vindicated:
                    self._pay(v, econ.pool(parent.m) // len(vindicated))
        parent.phase = Phase.FINAL

    def submit_zk_proof(self, round_id: int, prover: str, attestation: Signature) -> dict:
        return self._call("submit_zk_proof", dict(round_id=round_id, prover=prover, attestation=attestation))

    def _op_submit_zk_proof(self, round_id, prover, attestation):
        rnd = self.round(round_id)
        if rnd.phase is not Phase.ADJUDICATED or rnd.outcome is None or rnd.outcome.verdict is not Verdict.AMBIGUOUS:
            raise WrongPhase(f"round {round_id} has no open ambiguous outcome")
        if prover not in rnd.committee:
            raise NotInCommittee(f"{prover} is not on round {round_id}'s committee")
        pub = self.config.oracle_public
        if not pub or not verify(pub, zk_statement(rnd.task_hash, rnd.stage, rnd.inf_root), attestation):
            raise EvidenceInvalid("zero-knowledge attestation does not verify")
        econ = self.config.economics
        before = self.ledger.snapshot()
        self.ledger.move(wallet(rnd.inferencer), Ledger.TREASURY, econ.r_inf)
        rnd.inf_slashed = self._slash(rnd.inferencer, econ.slash_inf, "proven incorrect")
        self._pay(prover, econ.pool(rnd.m))
        after = self.ledger.snapshot()
        for k in set(before) | set(after):
            d = after.get(k, 0) - before.get(k, 0)
            if d:
                rnd.outcome.deltas[k] = rnd.outcome.deltas.get(k, 0) + d
        rnd.outcome.verdict = Verdict.REJECT
        rnd.outcome.evidence[rnd.inferencer] = "zero-knowledge proof of incorrect output"
        rnd.phase = Phase.FINAL
        return rnd.outcome.to_json()

    def dispute(self, round_id: int, m_prime: int, vrf_output: VrfOutput) -> int:
        return self._call("dispute", dict(round_id=round_id, m_prime=m_prime, vrf_output=vrf_output))

    def _op_dispute(self, round_id, m_prime, vrf_output):
        rnd = self.round(round_id)
        if rnd.phase is not Phase.ADJUDICATED or rnd.outcome is None or rnd.outcome.verdict is not Verdict.REJECT:
            raise NotRejected(f"round {round_id} has no open rejection")
        if rnd.parent is not None:
            raise NotRejected("a reconsideration round cannot itself be disputed")
        if m_prime <= rnd.m:
            raise CommitteeTooSmall(f"reconsideration needs more than {rnd.m} verifiers")
        econ = self.config.economics
        escrow = (m_prime - rnd.m) * econ.fee(rnd.m)
        if self.ledger.balance(wallet(rnd.inferencer)) < escrow:
            raise InsufficientEscrow(f"{rnd.inferencer} cannot escrow {escrow}")
        group = self.registry.group_snapshot(rnd.model_id, k_min=0)[rnd.stage - 1]
        excluded = set(rnd.committee) | {rnd.inferencer}
        eligible = [v for v in group.members if v not in excluded]
        if len(eligible) < m_prime:
            raise CommitteeTooSmall(f"only {len(eligible)} eligible verifiers for m'={m_prime}")
        transcript = dispute_transcript(rnd.task_hash, rnd.stage, m_prime, round_id)
        if not vrf_verify(self._public(rnd.scheduler), transcript, vrf_output):
            raise VrfInvalid("reconsideration VRF does not verify")
        sigma = permutation(vrf_output.randomness, len(eligible))
        committee = tuple(eligible[sigma[j] - 1] for j in range(m_prime))
        rid = len(self.rounds)
        self.ledger.move(wallet(rnd.inferencer), f"escrow:{rid}", escrow)
        self.rounds[rid] = VerificationRound(
            rid, rnd.task_hash, rnd.stage, rnd.model_id, rnd.is_tail, rnd.scheduler, rnd.inferencer, committee,
            rnd.inf_root, rnd.leaf_count, rnd.final_step, rnd.claimed_token, self.now + self.config.commit_window,
            parent=round_id, escrow=escrow)
        rnd.child = rid
        rnd.phase = Phase.DISPUTED
        return rid

    def finalize(self, round_id: int) -> str:
        return self._call("finalize", dict(round_id=round_id))

    def _op_finalize(self, round_id):
        rnd = self.round(round_id)
        if rnd.phase is not Phase.ADJUDICATED:
            raise WrongPhase(f"round {round_id} is {rnd.phase.value}")
        rnd.phase = Phase.FINAL
        return rnd.phase.value

    def file_relay_complaint(self, complainant: str, evidence: RelayEvidence) -> dict:
        return self._call("file_relay_complaint", dict(complainant=complainant, evidence=evidence))

    def _op_file_relay_complaint(self, complainant, evidence):
        ev = evidence
        key = (ev.task_hash.hex(), ev.stage, ev.token)
        if key in self.complaints:
            raise EvidenceInvalid("relay conflict already adjudicated")
        if complainant not in self.registry.nodes:
            raise EvidenceInvalid(f"unknown complainant {complainant}")
        try:
            sched = self.registry.node(ev.scheduler_id)
            signer = self.registry.node(ev.signer_id)
        except VinferError:
            raise EvidenceInvalid("evidence names an unregistered party") from None
        if sched.role != "scheduler":
            raise EvidenceInvalid(f"{ev.scheduler_id} is not a scheduler")
        if ev.scheduler_root == ev.signer_root:
            raise EvidenceInvalid("roots agree; nothing to complain about")
        ok_sched = ev.scheduler_sig.signer == ev.scheduler_id and verify(
            sched.public_key, relay_message(ev.task_hash, ev.stage, ev.token, ev.scheduler_root), ev.scheduler_sig)
        ok_signer = ev.signer_sig.signer == ev.signer_id and verify(
            signer.public_key, relay_message(ev.task_hash, ev.stage, ev.token, ev.signer_root), ev.signer_sig)
        if not (ok_sched and ok_signer):
            raise EvidenceInvalid("a signature in the evidence does not verify")
        econ = self.config.economics
        before = self.ledger.snapshot()
        share = int(econ.slash_scheduler * econ.complaint_share)
        got = self.registry.penalize(ev.scheduler_id, share, "relay tampering", to=wallet(complainant))
        self.registry.penalize(ev.scheduler_id, econ.slash_scheduler - got, "relay tampering")
        self.complaints.add(key)
        after = self.ledger.snapshot()
        return {k: after.get(k, 0) - before.get(k, 0) for k in sorted(set(before) | set(after))
                if after.get(k, 0) != before.get(k, 0)}


# replay ---------------------------------------------------------------------

@dataclass(frozen=True)
class ReplayReport:
    ok: bool
    events: int
    divergent_index: int | None = None
    reason: str = ""
    truncated: bool = False


def replay(lines: Iterable[str]) -> ReplayReport:
    """Re-execute a contract log; stops at the first event whose outcome differs."""
    lines = list(lines)
    truncated = False
    events = []
    for idx, line in enumerate(lines):
        try:
            events.append(json.loads(line))
        except json.JSONDecodeError:
            if idx == len(lines) - 1 and not line.endswith("\n"):
                truncated = True
                break
            return ReplayReport(False, idx, idx, "unparseable event")
    if not events or events[0].get("op") != "genesis":
        return ReplayReport(False, 0, 0, "log does not start with genesis")
    g = events[0]
    try:
        contract = Contract(ContractConfig.from_json(g["args"]["config"]), g["args"]["balances"])
    except (KeyError, TypeError, ValueError) as exc:
        return ReplayReport(False, 1, 0, f"bad genesis: {exc}")
    if contract.events[0]["state_root"] != g["state_root"]:
        return ReplayReport(False, 1, 0, "genesis state root differs")
    for idx, ev in enumerate(events[1:], start=1):
        try:
            args = dec(ev["args"])
            if ev.get("seq") != idx or not hasattr(contract, "_op_" + ev["op"]):
                raise ValueError("bad event header")
            try:
                contract._call(ev["op"], args)
            except VinferError:
                pass
        except Exception as exc:  # malformed arguments count as divergence
            return ReplayReport(False, idx, idx, f"cannot re-execute: {exc!r}")
        mine = contract.events[-1]
        for key in ("result", "error", "state_root"):
            if mine[key] != ev.get(key):
                return ReplayReport(False, idx, idx, f"{key} differs")
    return ReplayReport(True, len(events), None, "", truncated)
