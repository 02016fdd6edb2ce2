import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmarket.errors import InsufficientBalanceError, InvalidStateError, MarketError, SettlementPolicyError
from fedmarket.learner import Dataset, ModelParams
from fedmarket.ledger import Chain, TxKind, charge_gas, validate_chain
from fedmarket.market import DealState, Market, receipt_bytes, receipt_from_chain, split_deposit
from fedmarket.shapley import ShapleyVector


def make_market(balance=100):
    chain = Chain(difficulty=2)
    market = Market(chain)
    market.register_account("buyer", balance)
    for s in ("s1", "s2", "s3", "s4", "s5"):
        market.register_account(s)
    model = ModelParams(np.zeros(4), (1, 2))
    test = Dataset(np.array([[1.0], [-1.0]]), [0, 1], 2)
    return market, chain.blobs.store(model.to_bytes()), chain.blobs.store(test.to_bytes()), model


def mine_all(chain):
    while chain.pending:
        chain.mine_block("m")


def snapshot(market):
    return (dict(market.tokens.balances), dict(market.tokens.escrow), list(market.chain.pending),
            {k: d.state for k, d in market.deals.items()})


def test_publish_moves_deposit_to_escrow():
    market, m, t, _ = make_market(100)
    deal = market.publish_model("buyer", m, t, 0.5, 40)
    assert market.tokens.balance("buyer") == 60
    assert market.tokens.escrow[deal] == 40
    assert market.deals[deal].state == DealState.PUBLISHED


def test_overdraw_is_rejected_without_side_effects():
    market, m, t, _ = make_market(100)
    before = snapshot(market)
    with pytest.raises(InsufficientBalanceError):
        market.publish_model("buyer", m, t, 0.5, 101)
    assert snapshot(market) == before


def test_dangling_digest_is_rejected():
    market, m, _, _ = make_market()
    with pytest.raises(MarketError):
        market.publish_model("buyer", m, b"\x00" * 32, 0.5, 10)


def test_target_outside_unit_interval_fails_at_construction():
    market, m, t, _ = make_market()
    with pytest.raises(ValueError):
        market.publish_model("buyer", m, t, 1.01, 10)


def test_two_publishes_give_two_deals():
    market, m, t, _ = make_market()
    a = market.publish_model("buyer", m, t, 0.5, 10)
    b = market.publish_model("buyer", m, t, 0.5, 10)
    assert a != b
    assert sum(tx.kind == TxKind.PUBLISH for tx in market.chain.pending) == 2


def test_seller_registration():
    market, m, t, _ = make_market()
    deal = market.publish_model("buyer", m, t, 0.5, 10)
    market.register_seller(deal, "s1")
    assert market.deals[deal].state == DealState.TRAINING
    with pytest.raises(MarketError):
        market.register_seller(deal, "s1")


def test_five_sellers_cost_the_addworker_rows():
    market, m, t, _ = make_market()
    deal = market.publish_model("buyer", m, t, 0.5, 10)
    for s in ("s1", "s2", "s3", "s4", "s5"):
        market.register_seller(deal, s)
    gas = [tx.gas_used for tx in market.chain.pending if tx.kind == TxKind.ADD_WORKER]
    assert sum(gas) == 2_262_429


def test_rounds_must_arrive_in_order():
    market, m, t, _ = make_market()
    deal = market.publish_model("buyer", m, t, 0.5, 10)
    market.register_seller(deal, "s1")
    market.register_seller(deal, "s2")
    d = market.chain.blobs.store(b"delta")
    market.record_round(deal, 0, {"s1": d, "s2": d})
    assert sum(tx.kind in (TxKind.MODEL_TRAINING, TxKind.MODEL_AGGREGATION) for tx in market.chain.pending) == 3
    market.record_round(deal, 1, {"s1": d})
    before = snapshot(market)
    with pytest.raises(MarketError):
        market.record_round(deal, 3, {"s1": d})
    with pytest.raises(MarketError):
        market.record_round(deal, 2, {"s3": d})
    assert snapshot(market) == before
    mine_all(market.chain)
    assert validate_chain(market.chain) == []


def test_zero_target_verifies_immediately():
    market, m, t, model = make_market()
    deal = market.publish_model("buyer", m, t, 0.0, 10)
    market.register_seller(deal, "s1")
    assert market.verify_and_close(deal, model) == DealState.VERIFIED


def test_unmet_target_stays_open():
    market, m, t, model = make_market()
    deal = market.publish_model("buyer", m, t, 1.0, 10)
    market.register_seller(deal, "s1")
    assert market.verify_and_close(deal, model) == DealState.TRAINING
    with pytest.raises(InvalidStateError):
        market.settle(deal, [1.0])


def verified_deal(deposit, sellers, balance=None):
    market, m, t, model = make_market(balance or deposit)
    deal = market.publish_model("buyer", m, t, 0.0, deposit)
    for s in sellers:
        market.register_seller(deal, s)
    market.verify_and_close(deal, model)
    return market, deal


def test_equal_split():
    market, deal = verified_deal(1_000_000, ["s1", "s2", "s3", "s4", "s5"])
    payout = market.settle(deal, [0.2] * 5)
    assert [p for _, p in payout.payments] == [200_000] * 5
    assert payout.refund == 0


def test_ratio_split():
    market, deal = verified_deal(1_000_000, ["s1", "s2", "s3", "s4", "s5"])
    payout = market.settle(deal, [0.3, 0.3, 0.2, 0.1, 0.1])
    amounts = [p for _, p in payout.payments]
    assert amounts == [300_000, 300_000, 200_000, 100_000, 100_000]


def test_rounding_dust_goes_back_to_the_buyer():
    market, deal = verified_deal(10, ["s1", "s2", "s3"])
    payout = market.settle(deal, [1 / 3, 1 / 3, 1 / 3])
    assert [p for _, p in payout.payments] == [3, 3, 3]
    assert payout.refund == 1
    assert market.tokens.balance("buyer") == 1
    assert market.tokens.escrow[deal] == 0


def test_negative_contribution_is_clamped_and_flagged():
    market, deal = verified_deal(100, ["s1", "s2", "s3"])
    payout = market.settle(deal, ShapleyVector([0.6, 0.6, -0.2], "afs", normalized=True))
    assert payout.flagged
    assert [p for _, p in payout.payments] == [50, 50, 0]
    mine_all(market.chain)
    r = market.receipt(deal)
    assert r["flagged"] and r["phi_raw"][2] == pytest.approx(-0.2)


def test_unnormalised_vector_is_refused():
    market, deal = verified_deal(100, ["s1", "s2"])
    with pytest.raises(SettlementPolicyError):
        market.settle(deal, [0.5, 0.7])
    with pytest.raises(SettlementPolicyError):
        market.settle(deal, [1.0])


def test_abort_refunds_everything():
    market, m, t, _ = make_market(100)
    deal = market.publish_model("buyer", m, t, 0.5, 70)
    market.register_seller(deal, "s1")
    market.abort(deal)
    assert market.tokens.balance("buyer") == 100
    with pytest.raises(InvalidStateError):
        market.abort(deal)
    mine_all(market.chain)
    assert market.receipt(deal)["outcome"] == "aborted"


def test_receipt_needs_a_closed_and_mined_deal():
    market, deal = verified_deal(100, ["s1"])
    with pytest.raises(InvalidStateError):
        market.receipt(deal)
    market.settle(deal, [1.0])
    with pytest.raises(InvalidStateError):
        market.receipt(deal)
    mine_all(market.chain)
    assert market.receipt(deal)["payouts"] == [["s1", 100]]


def run_full_deal(rounds=3):
    market, m, t, model = make_market(1000)
    sellers = ["s1", "s2", "s3", "s4", "s5"]
    deal = market.publish_model("buyer", m, t, 0.0, 1000)
    for s in sellers:
        market.register_seller(deal, s)
    mine_all(market.chain)
    for r in range(rounds):
        market.record_round(deal, r, {s: market.chain.blobs.store(f"{s}-{r}".encode()) for s in sellers})
        mine_all(market.chain)
    market.verify_and_close(deal, model)
    market.settle(deal, [0.2] * 5)
    mine_all(market.chain)
    return market, deal


def test_receipt_counts_and_gas():
    market, deal = run_full_deal(3)
    r = market.receipt(deal)
    assert r["counts"] == {
        "AddWorker": 5, "Commit": 1, "ModelAggregation": 3, "ModelTraining": 15,
        "PayChannelExecute": 1, "Publish": 1, "Settlement": 1,
    }
    expected = sum(charge_gas(tx.kind, tx.slot) for b in market.chain.main_path() for tx in b.txs)
    assert r["gas_total"] == expected


def test_receipt_survives_export_and_reimport():
    market, deal = run_full_deal(2)
    again = Chain.from_jsonl(market.chain.to_jsonl(), market.chain.blobs)
    assert receipt_bytes(receipt_from_chain(again, deal)) == receipt_bytes(market.receipt(deal))


def test_every_transition_is_on_the_ledger():
    market, deal = run_full_deal(1)
    ops = []
    for block in market.chain.main_path():
        for tx in block.txs:
            body = json.loads(market.chain.blobs.fetch(tx.payload_hash))
            if body["deal_id"] == deal:
                ops.append(body["op"])
    assert ops[0] == "publish" and "verify" in ops and ops[-2:] == ["settle", "pay"]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=8), st.integers(1, 10**7))
def test_settlement_is_exact_and_monotone(weights, deposit):
    total = sum(weights)
    if total <= 1e-6:
        return
    phi = [w / total for w in weights]
    payments, refund, flagged, _ = split_deposit(phi, deposit)
    assert sum(payments) + refund == deposit and refund >= 0
    for i in range(len(phi)):
        for j in range(len(phi)):
            if phi[i] > phi[j]:
                assert payments[i] >= payments[j]


OPS = st.lists(st.tuples(st.sampled_from(["publish", "seller", "round", "verify", "settle", "abort"]),
                         st.integers(0, 3), st.integers(1, 60)), max_size=25)


@settings(max_examples=40, deadline=None)
@given(OPS)
def test_tokens_are_conserved_under_any_interleaving(ops):
    market, m, t, model = make_market(150)
    total = market.tokens.total()
    deals = []
    sellers = ["s1", "s2", "s3"]
    for op, k, amount in ops:
        deal = deals[k % len(deals)] if deals else None
        before = snapshot(market)
        try:
            if op == "publish":
                deals.append(market.publish_model("buyer", m, t, 0.0, amount))
            elif deal is None:
                continue
            elif op == "seller":
                market.register_seller(deal, sellers[k % 3])
            elif op == "round":
                d = market.chain.blobs.store(b"u")
                market.record_round(deal, market.deals[deal].next_round, {s: d for s in market.deals[deal].sellers})
            elif op == "verify":
                market.verify_and_close(deal, model)
            elif op == "settle":
                n = len(market.deals[deal].sellers)
                market.settle(deal, [1 / n] * n if n else [])
            else:
                market.abort(deal)
        except (MarketError, ValueError, ZeroDivisionError):
            assert snapshot(market) == before
        assert market.tokens.total() == total
        assert all(v >= 0 for v in market.tokens.balances.values())
    mine_all(market.chain)
    assert validate_chain(market.chain) == []
