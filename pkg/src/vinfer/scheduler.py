"""Task orchestration: role assignment, signed relay, transcripts and verification dispatch."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import pipeline
from .bitstats import OFF_CHAIN, accept, compare_arrays
from .commitments import MerkleTree, canonical_deserialize, canonical_serialize, write_trace
from .contract import Contract, Phase, RelayEvidence, SamplingPackage
from .errors import CommitPhaseOpen, GroupTooSmall, MissingTranscript, SignatureInvalid
from .identity import KeyPair, Registry, Signature, relay_message, sign, verify
from .randomness import (
    VrfOutput,
    assignment_transcript,
    derive_seed,
    dispute_transcript,
    sample_indices,
    sampling_transcript,
    select_roles,
    vrf_eval,
    vrf_verify,
)

DEFAULT_K = 6


@dataclass(frozen=True)
class TaskRequest:
    model_id: str
    prompt: tuple[int, ...]
    max_tokens: int
    nonce: int = 0

    @property
    def task_hash(self) -> bytes:
        body = json.dumps([self.model_id, list(self.prompt), self.max_tokens, self.nonce]).encode()
        return hashlib.sha256(b"vinfer.task" + body).digest()

    @property
    def task_id(self) -> str:
        return self.task_hash.hex()[:16]

    def to_json(self) -> dict:
        return {"model_id": self.model_id, "prompt": list(self.prompt), "max_tokens": self.max_tokens,
                "nonce": self.nonce}


@dataclass(frozen=True)
class StageRoles:
    stage: int
    members: tuple[str, ...]
    inferencer: str
    verifiers: tuple[str, ...]
    vrf: VrfOutput

    def to_json(self) -> dict:
        return {"stage": self.stage, "members": list(self.members), "inferencer": self.inferencer,
                "verifiers": list(self.verifiers), "vrf": self.vrf.to_json()}


@dataclass(frozen=True)
class RoleAssignment:
    task_hash: bytes
    scheduler: str
    k: int
    stages: tuple[StageRoles, ...]

    def stage(self, i: int) -> StageRoles:
        return self.stages[i - 1]

    def to_json(self) -> dict:
        return {"task_hash": self.task_hash.hex(), "scheduler": self.scheduler, "k": self.k,
                "stages": [s.to_json() for s in self.stages]}


def assign_roles(request: TaskRequest, registry: Registry, scheduler_id: str, scheduler_key: KeyPair,
                 k: int = DEFAULT_K) -> RoleAssignment:
    """Per stage: VRF over <h, i, |G_i|>, then inferencer = G[sigma(1)], verifiers = G[sigma(2..k+1)]."""
    groups = registry.group_snapshot(request.model_id, k_min=0)
    h = request.task_hash
    stages = []
    for i, g in enumerate(groups, start=1):
        if len(g.members) < k + 1:
            raise GroupTooSmall(f"stage {i} has {len(g.members)} nodes, needs {k + 1}")
        out = vrf_eval(scheduler_key.secret, assignment_transcript(h, i, len(g.members)))
        inf, vers = select_roles(g.members, out.randomness, k)
        stages.append(StageRoles(i, g.members, inf, tuple(vers), out))
    return RoleAssignment(h, scheduler_id, k, tuple(stages))


def audit_assignment(assignment: RoleAssignment, registry: Registry, scheduler_public: bytes) -> list[str]:
    """Recompute every stage's roles from public data; returns a list of problems (empty if clean)."""
    problems = []
    groups = registry.group_snapshot(registry.node(assignment.stages[0].inferencer).model_id, k_min=0)
    for s, g in zip(assignment.stages, groups):
        t = assignment_transcript(assignment.task_hash, s.stage, len(g.members))
        if not vrf_verify(scheduler_public, t, s.vrf):
            problems.append(f"stage {s.stage}: VRF proof invalid")
            continue
        inf, vers = select_roles(g.members, s.vrf.randomness, assignment.k)
        if inf != s.inferencer or tuple(vers) != s.verifiers:
            problems.append(f"stage {s.stage}: roles differ from the VRF permutation")
    return problems


# relay ------------------------------------------------------------------------

@dataclass(frozen=True)
class RelayRecord:
    """One boundary state: the inferencer signs its root, the scheduler signs what it forwarded."""

    task_hash: bytes
    stage: int
    token: int
    root: bytes
    leaf_count: int
    inf_sig: Signature
    relay_root: bytes
    sched_sig: Signature

    def verify(self, inf_public: bytes, sched_public: bytes) -> bool:
        return (verify(inf_public, relay_message(self.task_hash, self.stage, self.token, self.root), self.inf_sig)
                and verify(sched_public, relay_message(self.task_hash, self.stage, self.token, self.relay_root),
                           self.sched_sig))

    @property
    def conflicted(self) -> bool:
        return self.root != self.relay_root

    def to_json(self) -> dict:
        return {"task_hash": self.task_hash.hex(), "stage": self.stage, "token": self.token,
                "root": self.root.hex(), "leaf_count": self.leaf_count, "inf_sig": self.inf_sig.to_json(),
                "relay_root": self.relay_root.hex(), "sched_sig": self.sched_sig.to_json()}


@dataclass
class TaskTranscript:
    request: TaskRequest
    assignment: RoleAssignment
    records: list[RelayRecord]
    result: pipeline.GenerationResult
    evidence: list[RelayEvidence] = field(default_factory=list)

    @property
    def tokens(self) -> list[int]:
        return self.result.tokens

    @property
    def stop_reason(self) -> str:
        return self.result.stop_reason

    def record(self, stage: int, token: int) -> RelayRecord:
        for r in self.records:
            if r.stage == stage and r.token == token:
                return r
        raise MissingTranscript(f"no relay record for stage {stage}, token {token}")

    def final_state(self, stage: int) -> np.ndarray:
        return self.result.states[stage - 1][-1].values

    def feedback_consistent(self) -> bool:
        """Stage-1 input at step t+1 is exactly [prompt || y_1..y_t]."""
        seq = self.result.stage_input(1)
        expect = list(self.request.prompt) + self.tokens
        return list(seq) == expect and len(self.tokens) == self.result.n_steps

    def persist(self, directory: str | Path) -> Path:
        d = Path(directory)
        (d / "states").mkdir(parents=True, exist_ok=True)
        (d / "assignment.json").write_text(json.dumps(
            {"request": self.request.to_json(), "assignment": self.assignment.to_json(),
             "tokens": self.tokens, "stop_reason": self.stop_reason}, indent=1, sort_keys=True) + "\n")
        with open(d / "relay.log", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
        for i, states in enumerate(self.result.states, start=1):
            write_trace(d / "states" / f"stage{i}.trc", states)
        return d


# work orders ------------------------------------------------------------------

@dataclass(frozen=True)
class WorkOrder:
    """What a worker receives. It carries no mode field, so inference and verification look alike."""

    task_hash: bytes
    stage: int
    payload: bytes

    @classmethod
    def for_inputs(cls, task_hash: bytes, stage: int, inputs: np.ndarray) -> "WorkOrder":
        if stage == 1:
            ids = np.asarray(inputs, dtype="<u4").reshape(-1)
            payload = b"T" + struct.pack("<I", ids.size) + ids.tobytes()
        else:
            payload = b"S" + canonical_serialize(np.asarray(inputs, dtype=np.float32))
        return cls(task_hash, stage, payload)

    def serialize(self) -> bytes:
        return b"WO1" + self.task_hash + struct.pack("<I", self.stage) + self.payload

    def inputs(self) -> np.ndarray:
        if self.payload[:1] == b"T":
            (n,) = struct.unpack_from("<I", self.payload, 1)
            return np.frombuffer(self.payload[5:5 + 4 * n], dtype="<u4").astype(np.int64)
        return canonical_deserialize(self.payload[1:])


class Worker:
    """A registered node hosting one segment."""

    def __init__(self, node_id: str, keypair: KeyPair, model: pipeline.ModelConfig,
                 noise: pipeline.NoiseModel = pipeline.ZERO_NOISE, faulty_signer: bool = False):
        self.node_id = node_id
        self.keypair = keypair
        self.model = model
        self.noise = noise
        self.faulty_signer = faulty_signer

    def execute(self, order: WorkOrder, meter: pipeline.CostMeter | None = None) -> np.ndarray:
        """Causal pass of this node's segment over every row of the order."""
        return pipeline.verify_prefill(self.model.segment(order.stage), order.inputs(), self.noise, meter)

    def sign_root(self, task_hash: bytes, stage: int, token: int, rows: np.ndarray) -> tuple[bytes, Signature]:
        root = MerkleTree.from_values(rows).root
        signed = root
        if self.faulty_signer:
            signed = hashlib.sha256(b"wrong" + root).digest()
        return root, sign(self.keypair.secret, relay_message(task_hash, stage, token, signed), self.node_id)


Tamper = Callable[[int, int, np.ndarray], np.ndarray]


class Scheduler:
    def __init__(self, node_id: str, keypair: KeyPair, registry: Registry, model: pipeline.ModelConfig,
                 workers: dict[str, Worker], k: int = DEFAULT_K):
        self.node_id = node_id
        self.keypair = keypair
        self.registry = registry
        self.model = model
        self.workers = workers
        self.k = k

    def assign_roles(self, request: TaskRequest) -> RoleAssignment:
        return assign_roles(request, self.registry, self.node_id, self.keypair, self.k)

    def run_inference(self, assignment: RoleAssignment, request: TaskRequest, sink: str | Path | None = None,
                      attack: pipeline.Attack = pipeline.IDENTITY, tamper: Tamper | None = None,
                      meter: pipeline.CostMeter | None = None) -> TaskTranscript:
        """Drive generation through the assigned inferencers, signing every hop.

        Raises SignatureInvalid (and keeps nothing) when an inferencer's signature
        does not cover the state it produced.
        """
        h = assignment.task_hash
        infs = [self.workers[s.inferencer] for s in assignment.stages]
        records: list[RelayRecord] = []
        evidence: list[RelayEvidence] = []

        def hop(stage: int, step: int, rows: np.ndarray) -> np.ndarray:
            w = infs[stage - 1]
            root, sig = w.sign_root(h, stage, step, rows)
            if not verify(w.keypair.public, relay_message(h, stage, step, root), sig):
                raise SignatureInvalid(f"{w.node_id} signed a root that does not match its state at ({stage},{step})")
            fwd = tamper(stage, step, rows) if tamper is not None else rows
            relay_root = root if fwd is rows else MerkleTree.from_values(fwd).root
            ssig = sign(self.keypair.secret, relay_message(h, stage, step, relay_root), self.node_id)
            records.append(RelayRecord(h, stage, step, root, rows.size, sig, relay_root, ssig))
            if relay_root != root:
                # the receiving node sees a forwarded state that the producer never signed
                evidence.append(RelayEvidence(h, stage, step, self.node_id, relay_root, ssig,
                                              w.node_id, root, sig))
            return fwd

        result = pipeline.generate(self.model, list(request.prompt), request.max_tokens,
                                   noise=[w.noise for w in infs], attack=attack, meter=meter,
                                   on_state=hop, task_id=request.task_id)
        transcript = TaskTranscript(request, assignment, records, result, evidence)
        if sink is not None:
            transcript.persist(sink)
        return transcript

    def inference_orders(self, transcript: TaskTranscript) -> list[WorkOrder]:
        """The per-step orders the inferencers received during generation."""
        h = transcript.assignment.task_hash
        res = transcript.result
        orders = []
        for t in range(1, res.n_steps + 1):
            x = np.array(res.prompt, dtype=np.int64) if t == 1 else np.array([res.tokens[t - 2]], dtype=np.int64)
            orders.append(WorkOrder.for_inputs(h, 1, x))
            for i in range(2, self.model.n_segments + 1):
                orders.append(WorkOrder.for_inputs(h, i, res.states[i - 2][t - 1].values))
        return orders

    def dispatch_verification(self, transcript: TaskTranscript | None) -> dict[tuple[int, str], WorkOrder]:
        """One order per (stage, verifier): full token sequence for stage 1, upstream states otherwise."""
        if transcript is None or not transcript.result.states:
            raise MissingTranscript("inference has not produced a transcript")
        h = transcript.assignment.task_hash
        orders = {}
        for s in transcript.assignment.stages:
            order = WorkOrder.for_inputs(h, s.stage, transcript.result.stage_input(s.stage))
            for v in s.verifiers:
                orders[(s.stage, v)] = order
        return orders

    def publish_samples(self, contract: Contract, round_id: int, transcript: TaskTranscript,
                        sample_size: int | None = None) -> SamplingPackage:
        """VRF over <h, i, {gamma_j}> then inclusion proofs for the inferencer's final state."""
        rnd = contract.round(round_id)
        if rnd.phase is Phase.COMMIT:
            raise CommitPhaseOpen(f"round {round_id}: verifier commitments are not final")
        roots = contract.sampling_roots(round_id)
        out = vrf_eval(self.keypair.secret, sampling_transcript(rnd.task_hash, rnd.stage, roots))
        final = transcript.final_state(rnd.stage)
        tree = MerkleTree.from_values(final)
        size = min(sample_size or contract.config.sample_size, tree.leaf_count)
        idx = sample_indices(out.randomness, tree.leaf_count, size)
        proofs = tuple(tree.open(i) for i in idx)
        rec = transcript.record(rnd.stage, transcript.result.n_steps)
        return SamplingPackage(round_id, out, tuple(idx), tuple(p.leaf_value for p in proofs),
                               rec.root, rec.inf_sig, proofs)

    def dispute_vrf(self, contract: Contract, round_id: int, m_prime: int) -> VrfOutput:
        rnd = contract.round(round_id)
        return vrf_eval(self.keypair.secret, dispute_transcript(rnd.task_hash, rnd.stage, m_prime, round_id))


# verifier side ------------------------------------------------------------------

VERIFIER_BEHAVIORS = ("honest", "lazy", "collude_false", "always_true")


@dataclass
class VerifierReport:
    node_id: str
    stage: int
    b: int
    salt: bytes
    tree: MerkleTree
    tail_token: int | None
    stats: object = None
    copied_values: tuple[bytes, ...] | None = None


def step_rows(result: pipeline.GenerationResult) -> slice:
    """Row range of the final step inside a full-sequence prefill."""
    n_prompt = len(result.prompt)
    t = result.n_steps
    return slice(0, n_prompt) if t == 1 else slice(n_prompt + t - 2, n_prompt + t - 1)


class VerifierAgent:
    """A verifier following one of :data:`VERIFIER_BEHAVIORS`."""

    def __init__(self, worker: Worker, behavior: str = "honest", collusion_seed: int = 0):
        if behavior not in VERIFIER_BEHAVIORS:
            raise ValueError(f"unknown verifier behavior {behavior!r}")
        self.worker = worker
        self.behavior = behavior
        self.collusion_seed = collusion_seed

    @property
    def node_id(self) -> str:
        return self.worker.node_id

    def _salt(self, task_hash: bytes, stage: int) -> bytes:
        return hashlib.sha256(b"salt" + self.worker.keypair.secret + task_hash + bytes([stage])).digest()

    def process(self, order: WorkOrder, transcript: TaskTranscript,
                meter: pipeline.CostMeter | None = None) -> VerifierReport:
        res = transcript.result
        stage = order.stage
        model = self.worker.model
        salt = self._salt(order.task_hash, stage)
        is_tail = stage == model.n_segments
        sl = step_rows(res)
        if self.behavior == "lazy":
            # commits to a guess without computing anything
            guess = np.zeros_like(transcript.final_state(stage))
            tok = res.tokens[-1] if is_tail else None
            return VerifierReport(self.node_id, stage, 1, salt, MerkleTree.from_values(guess), tok)
        rows = self.worker.execute(order, meter)
        n_rows = len(res.prompt) + res.n_steps - 1
        rows = rows[:n_rows]
        stats = compare_arrays(res.stage_output(stage), rows, OFF_CHAIN)
        ok = accept(stats, OFF_CHAIN)
        tok = None
        if is_tail:
            ok = ok and not pipeline.tail_mismatches(model, res, rows)
            tok = pipeline.decode_step(model, rows[sl][-1])
        final = rows[sl]
        b = int(ok)
        if self.behavior == "collude_false":
            rng = np.random.default_rng([self.collusion_seed, stage])
            final = (final * np.float32(1.0 + rng.uniform(0.01, 0.02))).astype(np.float32)
            b = 0
            if is_tail:
                tok = (tok + 1) % model.vocab_size
        elif self.behavior == "always_true":
            b = 1
        return VerifierReport(self.node_id, stage, b, salt, MerkleTree.from_values(final), tok, stats)

    def openings(self, report: VerifierReport, indices: Sequence[int], package: SamplingPackage | None = None):
        if self.behavior == "lazy" and package is not None:
            # best a lazy node can do: reuse the inferencer's published proofs under its own root
            return list(package.proofs)
        return [report.tree.open(i) for i in indices]


def derive_noise(base: pipeline.NoiseModel, node_id: str, seed: int = 0) -> pipeline.NoiseModel:
    return base.with_seed(derive_seed("noise", node_id, seed))
