import pytest
from hypothesis import given
from hypothesis import strategies as st

from vinfer.errors import (
    DuplicateKey,
    InsufficientGroupSize,
    InsufficientStake,
    NotActive,
    UncoveredSlice,
    WithdrawalLocked,
)
from vinfer.identity import (
    KeyPair,
    Ledger,
    Registry,
    RegistryConfig,
    Status,
    relay_message,
    sign,
    stake_account,
    verify,
    wallet,
)

CFG = RegistryConfig(min_stake=100, withdrawal_delay=5, k_min=1)


def _registry(nodes=(), cfg=CFG):
    reg = Registry(cfg, Ledger({wallet(n): 1000 for n in nodes}))
    return reg


def _reg(reg, nid, slice_=(1, 1), stake=100, model="m"):
    return reg.register(nid, KeyPair.derive(nid).public, model, slice_, stake)


def test_register_boundaries():
    reg = _registry(["a", "b", "c"])
    _reg(reg, "a", stake=100)
    assert reg.is_active("a")
    with pytest.raises(InsufficientStake):
        _reg(reg, "b", stake=99)
    with pytest.raises(DuplicateKey):
        reg.register("c", KeyPair.derive("a").public, "m", (1, 1), 100)


def test_withdrawal_flow():
    reg = _registry(["a"])
    _reg(reg, "a", stake=300)
    total = reg.conservation_total()
    until = reg.deregister("a")
    assert until == 5 and reg.node("a").status is Status.WITHDRAWING
    with pytest.raises(WithdrawalLocked):
        reg.withdraw("a")
    reg.penalize("a", 40, "late penalty")
    reg.advance(5)
    assert reg.withdraw("a") == 260
    assert reg.ledger.balance(wallet("a")) == 1000 - 40
    assert reg.ledger.balance(Ledger.TREASURY) == 40
    assert reg.conservation_total() == total
    with pytest.raises(NotActive):
        reg.deregister("a")


def test_full_stake_returned_without_penalty():
    reg = _registry(["a"])
    _reg(reg, "a", stake=300)
    reg.deregister("a")
    reg.advance(5)
    assert reg.withdraw("a") == 300


def test_signatures():
    kp = KeyPair.derive("s")
    msg = b"short message"
    sig = sign(kp.secret, msg, "s")
    assert verify(kp.public, msg, sig)
    assert sig == sign(kp.secret, msg, "s")
    for i in range(len(msg)):
        bad = bytearray(msg)
        bad[i] ^= 0xFF
        assert not verify(kp.public, bytes(bad), sig)
    assert not verify(KeyPair.derive("t").public, msg, sig)


def test_relay_message_binds_fields():
    h = bytes(32)
    base = relay_message(h, 1, 2, b"r" * 32)
    assert base != relay_message(h, 2, 1, b"r" * 32)
    assert base != relay_message(h, 1, 2, b"s" * 32)


def test_group_snapshot_order_and_errors():
    ids = [f"n{s}.{j}" for s in (1, 2, 3) for j in range(7)]
    reg = _registry(ids)
    for nid in ids:
        s = int(nid[1])
        _reg(reg, nid, (s, s))
    groups = reg.group_snapshot("m")
    assert [len(g.members) for g in groups] == [7, 7, 7]
    assert groups[0].members == tuple(f"n1.{j}" for j in range(7))

    small = _registry(["x", "y"], RegistryConfig(min_stake=100, k_min=5))
    _reg(small, "x")
    with pytest.raises(InsufficientGroupSize):
        small.group_snapshot("m")

    overlap = _registry(["p", "q", "r", "s"])
    _reg(overlap, "p", (1, 2))
    _reg(overlap, "q", (1, 2))
    _reg(overlap, "r", (2, 3))
    _reg(overlap, "s", (2, 3))
    with pytest.raises(UncoveredSlice):
        overlap.group_snapshot("m")


@given(st.lists(st.tuples(st.sampled_from(["pen", "dereg", "adv", "wd"]), st.integers(0, 5),
                          st.integers(1, 200)), max_size=40))
def test_conservation_and_replay(ops):
    ids = [f"n{i}" for i in range(6)]
    reg = _registry(ids)
    for n in ids:
        _reg(reg, n, stake=500)
    total = reg.conservation_total()
    for kind, who, amount in ops:
        nid = ids[who]
        try:
            if kind == "pen":
                reg.penalize(nid, amount)
            elif kind == "dereg":
                reg.deregister(nid)
            elif kind == "adv":
                reg.advance(amount % 4 + 1)
            else:
                reg.withdraw(nid)
        except (NotActive, WithdrawalLocked):
            pass
        assert reg.conservation_total() == total
        for n in ids:
            rec = reg.node(n)
            if rec.status is Status.WITHDRAWING:
                assert reg.ledger.balance(wallet(n)) == 500  # nothing left the stake early
    clone = Registry.replay(reg.events, CFG, {wallet(n): 1000 for n in ids})
    assert clone.ledger.snapshot() == reg.ledger.snapshot()
    assert {n: r.status for n, r in clone.nodes.items()} == {n: r.status for n, r in reg.nodes.items()}
    assert stake_account("a") != wallet("a")
