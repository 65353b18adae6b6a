import dataclasses
import json

import numpy as np
import pytest

from protocol_helpers import make_setup
from vinfer import pipeline
from vinfer.commitments import read_trace
from vinfer.errors import CommitPhaseOpen, GroupTooSmall, MerkleInvalid, MissingTranscript, SignatureInvalid
from vinfer.identity import wallet, stake_account
from vinfer.randomness import VrfOutput
from vinfer.scheduler import (TaskRequest, VerifierAgent, WorkOrder, assign_roles, audit_assignment, step_rows)


@pytest.fixture(scope="module")
def setup():
    return make_setup()


def test_forced_assignment_with_k_plus_one(setup):
    for s in setup.transcript.assignment.stages:
        assert len(s.members) == 7
        assert set(s.verifiers) | {s.inferencer} == set(s.members)
        assert s.inferencer not in s.verifiers


def test_assignment_deterministic(setup):
    sched = setup.world.scheduler
    assert sched.assign_roles(setup.request) == setup.transcript.assignment
    other = sched.assign_roles(dataclasses.replace(setup.request, nonce=1))
    assert other.task_hash != setup.request.task_hash


def test_assignment_audit_clean(setup):
    pub = setup.world.scheduler.keypair.public
    assert audit_assignment(setup.transcript.assignment, setup.contract.registry, pub) == []


def test_audit_flags_flipped_proof_byte(setup):
    a = setup.transcript.assignment
    s = a.stage(2)
    proof = bytearray(s.vrf.proof)
    proof[5] ^= 1
    bad = dataclasses.replace(s, vrf=VrfOutput(s.vrf.randomness, bytes(proof), s.vrf.input_transcript))
    tampered = dataclasses.replace(a, stages=a.stages[:1] + (bad,) + a.stages[2:])
    problems = audit_assignment(tampered, setup.contract.registry, setup.world.scheduler.keypair.public)
    assert problems == ["stage 2: VRF proof invalid"]


def test_audit_flags_swapped_roles(setup):
    a = setup.transcript.assignment
    s = a.stage(3)
    bad = dataclasses.replace(s, inferencer=s.verifiers[0], verifiers=(s.inferencer,) + s.verifiers[1:])
    tampered = dataclasses.replace(a, stages=a.stages[:2] + (bad,) + a.stages[3:])
    problems = audit_assignment(tampered, setup.contract.registry, setup.world.scheduler.keypair.public)
    assert problems == ["stage 3: roles differ from the VRF permutation"]


def test_group_too_small(setup):
    with pytest.raises(GroupTooSmall):
        assign_roles(setup.request, setup.contract.registry, "sched", setup.world.scheduler.keypair, k=7)


def test_two_valid_signatures_per_record(setup):
    t = setup.transcript
    reg = setup.contract.registry
    assert len(t.records) == setup.world.model.n_segments * t.result.n_steps
    keys = {(r.stage, r.token) for r in t.records}
    assert len(keys) == len(t.records)
    for r in t.records:
        inf = t.assignment.stage(r.stage).inferencer
        assert r.inf_sig.signer == inf and r.sched_sig.signer == "sched"
        assert r.verify(reg.node(inf).public_key, reg.node("sched").public_key)
        assert not r.conflicted
    assert t.feedback_consistent()
    assert t.evidence == []


def test_record_lookup(setup):
    with pytest.raises(MissingTranscript):
        setup.transcript.record(1, 999)


def test_wrong_root_signature_aborts():
    s = make_setup()
    inf = s.transcript.assignment.stage(2).inferencer
    s.world.workers[inf].faulty_signer = True
    with pytest.raises(SignatureInvalid):
        s.world.scheduler.run_inference(s.transcript.assignment, s.request)


def test_relay_tamper_yields_verifiable_complaint():
    s = make_setup()

    def tamper(stage, step, rows):
        return rows + np.float32(1e-3) if (stage, step) == (2, 2) else rows

    t = s.world.scheduler.run_inference(s.transcript.assignment, s.request, tamper=tamper)
    (ev,) = t.evidence
    assert (ev.stage, ev.token) == (2, 2)
    assert t.record(2, 2).conflicted
    downstream = t.assignment.stage(3).inferencer
    before = s.contract.ledger.balance(wallet(downstream))
    stake_before = s.contract.ledger.balance(stake_account("sched"))
    deltas = s.contract.file_relay_complaint(downstream, ev)
    econ = s.contract.config.economics
    assert s.contract.ledger.balance(wallet(downstream)) - before == int(econ.slash_scheduler * econ.complaint_share)
    assert stake_before - s.contract.ledger.balance(stake_account("sched")) == econ.slash_scheduler
    assert deltas


def test_work_orders_indistinguishable():
    s = make_setup(max_tokens=1)
    sched = s.world.scheduler
    inference = {o.stage: o.serialize() for o in sched.inference_orders(s.transcript)}
    verification = sched.dispatch_verification(s.transcript)
    for (stage, _), order in verification.items():
        if stage > 1:
            assert order.serialize() == inference[stage]
    # stage 1 verifies prompt plus output tokens: the same bytes as prefilling that sequence
    seq = tuple(int(x) for x in s.transcript.result.stage_input(1))
    req = TaskRequest(s.request.model_id, seq, 1)
    t2 = sched.run_inference(sched.assign_roles(req), req)
    first = next(o for o in sched.inference_orders(t2) if o.stage == 1)
    v1 = next(o for (st, _), o in verification.items() if st == 1)
    assert first.payload == v1.payload


def test_stage_one_order_carries_tokens(setup):
    orders = setup.world.scheduler.dispatch_verification(setup.transcript)
    k, L = setup.transcript.assignment.k, setup.world.model.n_segments
    assert len(orders) == k * L
    o1 = next(o for (s, _), o in orders.items() if s == 1)
    assert o1.payload[:1] == b"T"
    assert list(o1.inputs()) == list(setup.request.prompt) + setup.transcript.tokens
    o2 = next(o for (s, _), o in orders.items() if s == 2)
    assert o2.payload[:1] == b"S"
    assert o2.inputs().shape == setup.transcript.result.stage_input(2).shape


def test_dispatch_without_transcript(setup):
    with pytest.raises(MissingTranscript):
        setup.world.scheduler.dispatch_verification(None)


def test_work_order_round_trip():
    x = np.random.default_rng(0).standard_normal((3, 8)).astype(np.float32)
    o = WorkOrder.for_inputs(b"h" * 32, 2, x)
    assert np.array_equal(o.inputs(), x)
    t = WorkOrder.for_inputs(b"h" * 32, 1, np.array([1, 2, 3]))
    assert list(t.inputs()) == [1, 2, 3]


def test_publish_before_commitments_final():
    s = make_setup()
    rid = s.open_round(2)
    with pytest.raises(CommitPhaseOpen):
        s.world.scheduler.publish_samples(s.contract, rid, s.transcript)


def _committed_round(s, stage=2):
    rid = s.open_round(stage)
    agents = {v: VerifierAgent(s.world.workers[v]) for v in s.contract.round(rid).committee}
    orders = s.world.scheduler.dispatch_verification(s.transcript)
    from vinfer.commitments import commit_verdict

    reports = {}
    for v, a in agents.items():
        r = a.process(orders[(stage, v)], s.transcript)
        reports[v] = r
        s.contract.submit_verdict_commitment(rid, v, commit_verdict(r.b, r.salt).digest, r.tree.root,
                                             r.tree.leaf_count)
    return rid, agents, reports


def test_honest_package_passes_all_checks():
    s = make_setup()
    rid, _, reports = _committed_round(s)
    assert all(r.b == 1 for r in reports.values())
    pkg = s.world.scheduler.publish_samples(s.contract, rid, s.transcript)
    idx = s.contract.check_sampling_package(rid, pkg)
    assert idx == pkg.indices and len(idx) == s.contract.config.sample_size


def test_altered_value_fails_merkle_check():
    s = make_setup()
    rid, _, _ = _committed_round(s)
    pkg = s.world.scheduler.publish_samples(s.contract, rid, s.transcript)
    j = 3
    v = bytearray(pkg.values[j])
    v[0] ^= 1
    proofs = list(pkg.proofs)
    proofs[j] = dataclasses.replace(proofs[j], leaf_value=bytes(v))
    values = pkg.values[:j] + (bytes(v),) + pkg.values[j + 1:]
    bad = dataclasses.replace(pkg, values=values, proofs=tuple(proofs))
    with pytest.raises(MerkleInvalid) as exc:
        s.contract.check_sampling_package(rid, bad)
    assert exc.value.index == pkg.indices[j]


def test_step_rows():
    s = make_setup(max_tokens=1)
    assert step_rows(s.transcript.result) == slice(0, 5)
    s4 = make_setup(max_tokens=4)
    assert step_rows(s4.transcript.result) == slice(7, 8)


def test_persist(tmp_path, setup):
    d = setup.transcript.persist(tmp_path / "t")
    meta = json.loads((d / "assignment.json").read_text())
    assert meta["tokens"] == setup.transcript.tokens
    assert len((d / "relay.log").read_text().splitlines()) == len(setup.transcript.records)
    states = read_trace(d / "states" / "stage2.trc")
    assert all(a == b for a, b in zip(states, setup.transcript.result.states[1]))


def test_verifier_behaviors(setup):
    orders = setup.world.scheduler.dispatch_verification(setup.transcript)
    stage = setup.world.model.n_segments
    v = setup.transcript.assignment.stage(stage).verifiers[0]
    w = setup.world.workers[v]
    honest = VerifierAgent(w).process(orders[(stage, v)], setup.transcript)
    assert honest.b == 1 and honest.tail_token == setup.transcript.tokens[-1]
    col = VerifierAgent(w, "collude_false").process(orders[(stage, v)], setup.transcript)
    assert col.b == 0 and col.tail_token != honest.tail_token
    lazy = VerifierAgent(w, "lazy").process(orders[(stage, v)], setup.transcript)
    assert lazy.b == 1 and lazy.stats is None
    with pytest.raises(ValueError):
        VerifierAgent(w, "sleepy")


def test_quantized_inferencer_voted_down():
    s = make_setup(attack=pipeline.quantize(8))
    orders = s.world.scheduler.dispatch_verification(s.transcript)
    for (stage, v), o in orders.items():
        assert VerifierAgent(s.world.workers[v]).process(o, s.transcript).b == 0
