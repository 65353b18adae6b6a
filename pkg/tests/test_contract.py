import copy
import dataclasses
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protocol_helpers import (CONFIGS, Vote, adjudication_table, commit_all, make_setup, perturbed, reveal_all,
                              run_scripted, salt_for, scripted_votes)
from vinfer.commitments import commit_verdict
from vinfer.contract import (Contract, ContractConfig, Economics, Phase, Verdict, cluster_quorum, opening_distance,
                             opening_point, replay)
from vinfer.errors import (CommitMismatch, CommitPhaseOpen, CommitteeTooSmall, DoubleCommit, EvidenceInvalid,
                           InsufficientEscrow, MerkleInvalid, MissingTailToken, NotInCommittee, NotRejected,
                           SignatureInvalid, VinferError, VrfInvalid, WrongPhase)
from vinfer.identity import KeyPair, sign, stake_account, wallet
from vinfer.randomness import vrf_eval


@pytest.fixture(scope="module")
def base():
    s = make_setup()
    return s, copy.deepcopy(s.contract)


def fresh(base):
    s, c = base
    return s, copy.deepcopy(c)


def honest_votes(s, rid, c):
    rnd = c.round(rid)
    state = s.transcript.final_state(rnd.stage)
    tok = s.transcript.tokens[-1] if rnd.is_tail else None
    return {v: Vote(1, state, tok) for v in rnd.committee}


def test_cluster_quorum_exact():
    assert cluster_quorum(0.7, 6) == 5
    assert cluster_quorum(0.5, 6) == 3
    assert cluster_quorum(0.6, 6) == 4
    assert cluster_quorum(0.6, 12) == 8


def test_economics_defaults():
    e = Economics()
    assert e.pool(6) == 90 and e.verifier_slash(6) == 30 and e.fee(6) == 15


def test_all_true_accepts_and_splits_pool(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    out = run_scripted(s, c, rid, honest_votes(s, rid, c))
    assert out["verdict"] == Verdict.ACCEPT.value
    rnd = c.round(rid)
    for v in rnd.committee:
        assert out["deltas"][wallet(v)] == 90 // 6
    assert out["deltas"][wallet(rnd.inferencer)] == 100


def test_tail_round(base):
    s, c = fresh(base)
    rid = s.open_round(4, c)
    assert c.round(rid).is_tail
    assert run_scripted(s, c, rid, honest_votes(s, rid, c))["verdict"] == Verdict.ACCEPT.value


def test_tail_false_voters_with_shared_wrong_token_reject(base):
    s, c = fresh(base)
    rid = s.open_round(4, c)
    rnd = c.round(rid)
    state = s.transcript.final_state(4)
    tok = s.transcript.tokens[-1]
    votes = {v: Vote(0, state, (tok + 1) % 256) for v in rnd.committee}
    assert run_scripted(s, c, rid, votes)["verdict"] == Verdict.REJECT.value


def test_true_voter_with_divergent_opening_penalized(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    votes = honest_votes(s, rid, c)
    odd = c.round(rid).committee[0]
    votes[odd] = Vote(1, perturbed(votes[odd].state, 1.5))
    out = run_scripted(s, c, rid, votes)
    assert out["verdict"] == Verdict.ACCEPT.value
    assert out["deltas"][stake_account(odd)] == -30
    assert out["evidence"][odd] == "opening disagrees with accepted output"
    assert out["deltas"][wallet(c.round(rid).committee[1])] == 90 // 5


def test_rule2_example_b1_five_consistent(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    committee = c.round(rid).committee
    votes = scripted_votes(s.transcript.final_state(2), committee, (1, 0, 0, 0, 0, 0), "consistent")
    out = run_scripted(s, c, rid, votes)
    assert out["verdict"] == Verdict.REJECT.value
    assert out["cluster"] == list(committee[1:])
    for v in committee[1:]:
        assert out["deltas"][wallet(v)] == 90 // 5


def test_rule3_split_two_two_one(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    committee = c.round(rid).committee
    state = s.transcript.final_state(2)
    far = {0: 1.01, 1: 1.01, 2: 1.05, 3: 1.05, 4: 1.2}
    votes = {}
    for j, v in enumerate(committee):
        votes[v] = Vote(1, state) if j == 5 else Vote(0, perturbed(state, far[j]))
    out = run_scripted(s, c, rid, votes)
    assert out["verdict"] == Verdict.AMBIGUOUS.value
    assert out["deltas"] == {wallet(c.round(rid).inferencer): 100, "treasury": -100}


def test_exhaustive_adjudication_table():
    rows = list(adjudication_table())
    assert len(rows) == 64 * len(CONFIGS)
    bad = [(r[0], r[1], r[2], r[3]["verdict"]) for r in rows if not r[-1]]
    assert not bad, bad[:5]
    kinds = Counter(r[2] for r in rows)
    assert kinds[Verdict.REJECT] == 7 and kinds[Verdict.ACCEPT] == 42 * 3
    # the B=2 consistent case sits below ceil(4.2) = 5 and must stay ambiguous
    b2 = [r for r in rows if sum(r[0]) == 2 and r[1] == "consistent"]
    assert all(r[2] is Verdict.AMBIGUOUS for r in b2)


def test_commit_errors(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    v = c.round(rid).committee[0]
    d = commit_verdict(1, salt_for(v)).digest
    c.submit_verdict_commitment(rid, v, d, b"r" * 32, 32)
    with pytest.raises(DoubleCommit):
        c.submit_verdict_commitment(rid, v, d, b"r" * 32, 32)
    with pytest.raises(NotInCommittee):
        c.submit_verdict_commitment(rid, c.round(rid).inferencer, d, b"r" * 32, 32)
    c.advance(c.config.commit_window)
    with pytest.raises(WrongPhase):
        c.submit_verdict_commitment(rid, c.round(rid).committee[1], d, b"r" * 32, 32)
    assert c.round(rid).phase is Phase.SAMPLED


def test_close_commit_rules(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    with pytest.raises(CommitPhaseOpen):
        c.close_commit(rid)
    c.advance(c.config.commit_window)
    assert c.close_commit(rid) == "sampled"


def test_open_round_checks(base):
    s, c = fresh(base)
    a = s.transcript.assignment
    rec = s.transcript.record(2, s.transcript.result.n_steps)
    T = s.transcript.result.n_steps
    bad_vrf = vrf_eval(KeyPair.derive("intruder").secret, a.stage(2).vrf.input_transcript)
    with pytest.raises(VrfInvalid):
        c.open_round(s.request.task_hash, 2, "synthetic", a.k, "sched", bad_vrf, rec.root, rec.leaf_count, T,
                     rec.inf_sig)
    other = a.stage(2).verifiers[0]
    forged = sign(s.world.workers[other].keypair.secret, b"x", other)
    with pytest.raises(SignatureInvalid):
        c.open_round(s.request.task_hash, 2, "synthetic", a.k, "sched", a.stage(2).vrf, rec.root, rec.leaf_count,
                     T, forged)
    with pytest.raises(SignatureInvalid):
        c.open_round(s.request.task_hash, 2, "synthetic", a.k, a.stage(2).inferencer, a.stage(2).vrf, rec.root,
                     rec.leaf_count, T, rec.inf_sig)
    tail = s.transcript.record(4, T)
    with pytest.raises(MissingTailToken):
        c.open_round(s.request.task_hash, 4, "synthetic", a.k, "sched", a.stage(4).vrf, tail.root,
                     tail.leaf_count, T, tail.inf_sig)


def _to_sampled(s, c, stage=2):
    rid = s.open_round(stage, c)
    votes = honest_votes(s, rid, c)
    trees = commit_all(c, rid, votes)
    return rid, votes, trees


def test_sampling_package_checks(base):
    s, c = fresh(base)
    rid, _, _ = _to_sampled(s, c)
    pkg = s.world.scheduler.publish_samples(c, rid, s.transcript)
    # VRF by someone other than the scheduler
    fake = dataclasses.replace(pkg, vrf=vrf_eval(KeyPair.derive("intruder").secret, pkg.vrf.input_transcript))
    with pytest.raises(VrfInvalid):
        c.check_sampling_package(rid, fake)
    # root signed by a node that is not the inferencer
    other = c.round(rid).committee[0]
    with pytest.raises(SignatureInvalid):
        c.check_sampling_package(rid, dataclasses.replace(pkg, inf_sig=sign(
            s.world.workers[other].keypair.secret, b"x", other)))
    # swap two indices
    idx = list(pkg.indices)
    idx[0], idx[1] = idx[1], idx[0]
    with pytest.raises(MerkleInvalid) as exc:
        c.check_sampling_package(rid, dataclasses.replace(pkg, indices=tuple(idx)))
    assert exc.value.index == idx[0]
    assert c.check_sampling_package(rid, pkg) == pkg.indices
    with pytest.raises(WrongPhase):
        c.check_sampling_package(rid, pkg)


def test_early_sampling_package_rejected(base):
    s, c = fresh(base)
    late = copy.deepcopy(c)
    rid, _, _ = _to_sampled(s, late)
    pkg = s.world.scheduler.publish_samples(late, rid, s.transcript)
    rid2 = s.open_round(2, c)
    assert rid2 == rid
    with pytest.raises(CommitPhaseOpen):
        c.check_sampling_package(rid2, pkg)


def test_reveal_errors(base):
    s, c = fresh(base)
    rid, votes, trees = _to_sampled(s, c)
    pkg = s.world.scheduler.publish_samples(c, rid, s.transcript)
    idx = c.check_sampling_package(rid, pkg)
    v0, v1 = c.round(rid).committee[:2]
    with pytest.raises(CommitMismatch):
        c.reveal(rid, v0, 0, salt_for(v0), [trees[v0].open(i) for i in idx])
    with pytest.raises(CommitMismatch):
        c.reveal(rid, v0, 1, salt_for(v1), [trees[v0].open(i) for i in idx])
    with pytest.raises(MerkleInvalid):
        c.reveal(rid, v0, 1, salt_for(v0), [trees[v0].open((i + 1) % 32) for i in idx])
    with pytest.raises(WrongPhase):
        c.adjudicate(rid)
    c.reveal(rid, v0, 1, salt_for(v0), [trees[v0].open(i) for i in idx])
    with pytest.raises(DoubleCommit):
        c.reveal(rid, v0, 1, salt_for(v0), [trees[v0].open(i) for i in idx])
    c.advance(c.config.reveal_window)
    with pytest.raises(WrongPhase):
        c.reveal(rid, v1, 1, salt_for(v1), [trees[v1].open(i) for i in idx])
    out = c.adjudicate(rid)
    # one True reveal is below m/2 and there is no False cluster
    assert out["verdict"] == Verdict.AMBIGUOUS.value
    for v in c.round(rid).committee[1:]:
        assert out["deltas"][stake_account(v)] == -30
        assert out["evidence"][v] == "no valid reveal"


def test_tail_reveal_needs_token(base):
    s, c = fresh(base)
    rid, votes, trees = _to_sampled(s, c, stage=4)
    idx = c.check_sampling_package(rid, s.world.scheduler.publish_samples(c, rid, s.transcript))
    v = c.round(rid).committee[0]
    with pytest.raises(MissingTailToken):
        c.reveal(rid, v, 1, salt_for(v), [trees[v].open(i) for i in idx], None)


def test_lazy_openings_fail(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    votes = honest_votes(s, rid, c)
    lazy = c.round(rid).committee[0]
    votes[lazy] = Vote(1, np.zeros_like(votes[lazy].state))
    trees = commit_all(c, rid, votes)
    pkg = s.world.scheduler.publish_samples(c, rid, s.transcript)
    idx = c.check_sampling_package(rid, pkg)
    with pytest.raises(MerkleInvalid):
        c.reveal(rid, lazy, 1, salt_for(lazy), list(pkg.proofs))


def _rejected_round(tau=0.6, colluders=4):
    s = make_setup(group_size=19, tau=tau)
    c = s.contract
    rid = s.open_round(2, c)
    committee = c.round(rid).committee
    bits = tuple(0 if j < colluders else 1 for j in range(6))
    out = run_scripted(s, c, rid, scripted_votes(s.transcript.final_state(2), committee, bits, "consistent"))
    assert out["verdict"] == Verdict.REJECT.value
    return s, c, rid


def test_dispute_overturns_colluding_majority():
    s, c, rid = _rejected_round()
    parent = c.round(rid)
    inf = parent.inferencer
    with pytest.raises(CommitteeTooSmall):
        c.dispute(rid, 6, s.world.scheduler.dispute_vrf(c, rid, 6))
    stake0 = c.ledger.balance(stake_account(inf))
    wallet0 = c.ledger.balance(wallet(inf))
    colluders = [v for v in parent.committee if parent.reveals[v].b == 0]
    col_stake = {v: c.ledger.balance(stake_account(v)) for v in colluders}
    child = c.dispute(rid, 12, s.world.scheduler.dispute_vrf(c, rid, 12))
    crnd = c.round(child)
    assert crnd.m == 12 and not set(crnd.committee) & (set(parent.committee) | {inf})
    assert c.ledger.balance(wallet(inf)) == wallet0 - crnd.escrow == wallet0 - 6 * 15
    out = run_scripted(s, c, child, honest_votes(s, child, c))
    assert out["verdict"] == Verdict.ACCEPT.value
    assert c.ledger.balance(stake_account(inf)) == stake0 + 200
    assert c.ledger.balance(wallet(inf)) == wallet0 + 100
    for v in colluders:
        assert c.ledger.balance(stake_account(v)) == col_stake[v] - 30
    assert c.round(rid).phase is Phase.FINAL
    with pytest.raises(NotRejected):
        c.dispute(child, 14, s.world.scheduler.dispute_vrf(c, child, 14))


def test_dispute_rejected_again_inferencer_pays_fees():
    s, c, rid = _rejected_round()
    inf = c.round(rid).inferencer
    wallet0 = c.ledger.balance(wallet(inf))
    treasury0 = c.ledger.balance("treasury")
    child = c.dispute(rid, 12, s.world.scheduler.dispute_vrf(c, rid, 12))
    committee = c.round(child).committee
    votes = scripted_votes(s.transcript.final_state(2), committee, (0,) * 12, "consistent")
    out = run_scripted(s, c, child, votes)
    assert out["verdict"] == Verdict.REJECT.value
    assert c.ledger.balance(wallet(inf)) == wallet0 - 6 * 15
    # escrow covers part of the larger pool; the inferencer is not slashed twice
    assert c.ledger.balance("treasury") == treasury0 + 6 * 15 - c.config.economics.pool(12) // 12 * 12


def test_dispute_errors():
    s, c, rid = _rejected_round()
    with pytest.raises(CommitteeTooSmall):
        c.dispute(rid, 30, s.world.scheduler.dispute_vrf(c, rid, 30))
    bad = vrf_eval(KeyPair.derive("intruder").secret, b"whatever")
    with pytest.raises(VrfInvalid):
        c.dispute(rid, 12, bad)
    inf = c.round(rid).inferencer
    c.ledger.move(wallet(inf), "treasury", c.ledger.balance(wallet(inf)))
    with pytest.raises(InsufficientEscrow):
        c.dispute(rid, 12, s.world.scheduler.dispute_vrf(c, rid, 12))


def test_accepted_round_not_disputable(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    run_scripted(s, c, rid, honest_votes(s, rid, c))
    with pytest.raises(NotRejected):
        c.dispute(rid, 12, s.world.scheduler.dispute_vrf(c, rid, 12))
    assert c.finalize(rid) == "final"


def test_zk_proof_checks(base):
    s, c = fresh(base)
    rid = s.open_round(2, c)
    committee = c.round(rid).committee
    bits = (0, 0, 0, 0, 1, 1)
    run_scripted(s, c, rid, scripted_votes(s.transcript.final_state(2), committee, bits, "split"))
    rnd = c.round(rid)
    assert rnd.outcome.verdict is Verdict.AMBIGUOUS
    assert s.world.oracle.prove(rnd.task_hash, 2, rnd.inf_root, output_is_honest=True) is None
    forged = sign(KeyPair.derive("intruder").secret, b"x", "zk-oracle")
    with pytest.raises(EvidenceInvalid):
        c.submit_zk_proof(rid, committee[0], forged)
    good = s.world.oracle.prove(rnd.task_hash, 2, rnd.inf_root, output_is_honest=False)
    with pytest.raises(NotInCommittee):
        c.submit_zk_proof(rid, rnd.inferencer, good)
    assert c.submit_zk_proof(rid, committee[0], good)["verdict"] == Verdict.REJECT.value
    with pytest.raises(WrongPhase):
        c.submit_zk_proof(rid, committee[1], good)


def _tampered():
    s = make_setup()

    def tamper(stage, step, rows):
        return rows + np.float32(1e-3) if (stage, step) == (3, 1) else rows

    t = s.world.scheduler.run_inference(s.transcript.assignment, s.request, tamper=tamper)
    return s, t.evidence[0]


def test_relay_complaint_genuine_and_repeat():
    s, ev = _tampered()
    c = s.contract
    who = s.transcript.assignment.stage(4).inferencer
    deltas = c.file_relay_complaint(who, ev)
    assert deltas[wallet(who)] == 250 and deltas[stake_account("sched")] == -500
    with pytest.raises(EvidenceInvalid):
        c.file_relay_complaint(who, ev)


def test_relay_complaint_fabricated_and_identical():
    s, ev = _tampered()
    c = s.contract
    who = s.transcript.assignment.stage(4).inferencer
    sig = ev.signer_sig
    fake = dataclasses.replace(ev, signer_sig=dataclasses.replace(sig, sig=bytes(64)))
    with pytest.raises(EvidenceInvalid):
        c.file_relay_complaint(who, fake)
    same = dataclasses.replace(ev, scheduler_root=ev.signer_root)
    with pytest.raises(EvidenceInvalid):
        c.file_relay_complaint(who, same)
    with pytest.raises(EvidenceInvalid):
        c.file_relay_complaint("nobody", ev)


def test_opening_distance():
    a = opening_point(np.array([1.0, 2.0], dtype=np.float32), 5)
    b = opening_point(np.array([1.0, 2.0], dtype=np.float32), 6)
    assert opening_distance(a, a) == 0.0
    assert opening_distance(a, b) == float("inf")
    c = opening_point(np.nextafter(np.array([1.0, 2.0], dtype=np.float32), np.float32(3)), 5)
    assert 0 < opening_distance(a, c) < 1e-6


# replay -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_log():
    s = make_setup()
    c = s.contract
    rid = s.open_round(2, c)
    run_scripted(s, c, rid, honest_votes(s, rid, c))
    with pytest.raises(VinferError):
        c.finalize(99)
    return c.dump_log()


def test_replay_untouched(full_log):
    rep = replay(full_log.splitlines(keepends=True))
    assert rep.ok and not rep.truncated and rep.events == len(full_log.splitlines())


def test_replay_detects_flipped_byte(full_log):
    lines = full_log.splitlines(keepends=True)
    target = next(i for i, l in enumerate(lines) if '"op": "adjudicate"' in l)
    ln = lines[target]
    pos = ln.index('"state_root": "') + len('"state_root": "')
    flipped = ln[:pos] + ("0" if ln[pos] != "0" else "1") + ln[pos + 1:]
    rep = replay(lines[:target] + [flipped] + lines[target + 1:])
    assert not rep.ok and rep.divergent_index == target


def test_replay_truncated_tail(full_log):
    cut = full_log[:-40]
    rep = replay(cut.splitlines(keepends=True))
    assert rep.ok and rep.truncated


def test_replay_rejects_missing_genesis(full_log):
    rep = replay(full_log.splitlines(keepends=True)[1:])
    assert not rep.ok and rep.divergent_index == 0


# phase safety over random event orders ----------------------------------------------------

ACTIONS = ("commit", "advance", "close", "publish", "reveal", "adjudicate")


@settings(max_examples=40)
@given(st.lists(st.tuples(st.sampled_from(ACTIONS), st.integers(0, 5)), min_size=1, max_size=40))
def test_phase_safety_random_orders(base, ops):
    s, c = fresh(base)
    total = c.ledger.total()
    rid = s.open_round(2, c)
    rnd = c.round(rid)
    votes = honest_votes(s, rid, c)
    trees = {}
    idx = None
    for op, j in ops:
        v = rnd.committee[j]
        try:
            if op == "commit":
                trees[v] = commit_all(c, rid, {v: votes[v]})[v]
            elif op == "advance":
                c.advance(1)
            elif op == "close":
                c.close_commit(rid)
            elif op == "publish":
                pkg = s.world.scheduler.publish_samples(c, rid, s.transcript)
                idx = c.check_sampling_package(rid, pkg)
            elif op == "reveal":
                if v not in trees or idx is None:
                    raise VinferError("nothing to reveal")
                reveal_all(c, rid, {v: votes[v]}, trees, idx)
                assert rnd.indices and rnd.inf_values is not None
            elif op == "adjudicate":
                c.adjudicate(rid)
                assert len(rnd.reveals) == len(rnd.commitments) or c.now >= rnd.reveal_deadline
        except VinferError:
            pass
        assert c.ledger.total() == total
    assert replay(c.dump_log().splitlines(keepends=True)).ok


def test_config_round_trip():
    cfg = ContractConfig(tau=0.6, oracle_public=b"\x01" * 32)
    assert ContractConfig.from_json(cfg.to_json()) == cfg
