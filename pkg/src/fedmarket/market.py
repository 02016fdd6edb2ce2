"""Deal state machine on top of the ledger: escrow, training records, verification, payouts.

Token amounts are integers (micro-tokens). Every state transition writes a
transaction whose payload is a JSON document in the blob store tagged with the
deal id, so a deal's full history can be rebuilt from the chain alone.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Mapping, Sequence

from .errors import (
    InsufficientBalanceError,
    InvalidStateError,
    MarketError,
    SettlementPolicyError,
)
from .learner import Dataset, ModelParams, utility
from .ledger import Chain, TxKind
from .shapley import ShapleyVector


class DealState(str, Enum):
    PUBLISHED = "Published"
    TRAINING = "Training"
    AGGREGATED = "Aggregated"
    VERIFIED = "Verified"
    SETTLED = "Settled"
    ABORTED = "Aborted"


OPEN_STATES = (DealState.PUBLISHED, DealState.TRAINING, DealState.AGGREGATED, DealState.VERIFIED)


class TokenLedger:
    """Integer balances plus per-deal escrow. Only :meth:`mint` changes the total."""

    def __init__(self):
        self.balances: dict[str, int] = {}
        self.escrow: dict[str, int] = {}
        self.minted = 0

    def balance(self, account: str) -> int:
        return self.balances.get(account, 0)

    def mint(self, account: str, amount: int) -> None:
        amount = _amount(amount)
        self.balances[account] = self.balance(account) + amount
        self.minted += amount

    def transfer(self, src: str, dst: str, amount: int) -> None:
        amount = _amount(amount)
        if self.balance(src) < amount:
            raise InsufficientBalanceError(f"{src} holds {self.balance(src)}, needs {amount}")
        self.balances[src] -= amount
        self.balances[dst] = self.balance(dst) + amount

    def lock(self, deal_id: str, account: str, amount: int) -> None:
        amount = _amount(amount)
        if self.balance(account) < amount:
            raise InsufficientBalanceError(f"{account} holds {self.balance(account)}, needs {amount}")
        self.balances[account] -= amount
        self.escrow[deal_id] = self.escrow.get(deal_id, 0) + amount

    def release(self, deal_id: str, account: str, amount: int) -> None:
        amount = _amount(amount)
        if self.escrow.get(deal_id, 0) < amount:
            raise MarketError(f"escrow of {deal_id} cannot cover {amount}")
        self.escrow[deal_id] -= amount
        self.balances[account] = self.balance(account) + amount

    def total(self) -> int:
        return sum(self.balances.values()) + sum(self.escrow.values())


def _amount(x) -> int:
    if isinstance(x, bool) or int(x) != x or x < 0:
        raise ValueError(f"token amounts are non-negative integers, got {x!r}")
    return int(x)


@dataclass
class Deal:
    deal_id: str
    buyer: str
    model_digest: bytes
    test_digest: bytes
    accuracy_target: float
    deposit: int
    sellers: list[str] = field(default_factory=list)
    state: DealState = DealState.PUBLISHED
    next_round: int = 0
    accuracy: float | None = None


@dataclass(frozen=True)
class Payout:
    deal_id: str
    payments: tuple[tuple[str, int], ...]
    refund: int
    flagged: bool = False

    def total(self) -> int:
        return sum(p for _, p in self.payments) + self.refund


def split_deposit(phi: Sequence[float], deposit: int) -> tuple[list[int], int, bool, list[float]]:
    """Floor payouts ``floor(phi_i * deposit)`` with the rounding dust refunded.

    Negative entries are clamped to zero and the rest renormalised; the
    returned flag says whether that happened. Returns
    ``(payments, refund, flagged, phi_used)``.
    """
    # parse through the shortest repr so 0.3 means 3/10, not the binary float below it
    raw = [Fraction(repr(float(p))) for p in phi]
    if not raw:
        raise SettlementPolicyError("no sellers to pay")
    flagged = any(p < 0 for p in raw)
    clamped = [max(p, Fraction(0)) for p in raw]
    total = sum(clamped)
    if total <= 0:
        raise SettlementPolicyError("no seller has a positive contribution")
    if not flagged and abs(total - 1) > Fraction(1, 10**9):
        raise SettlementPolicyError(f"contribution vector sums to {float(total)}, expected 1")
    shares = [p / total for p in clamped]
    payments = [int(s * deposit) for s in shares]  # Fraction -> int truncates; s >= 0
    refund = deposit - sum(payments)
    return payments, refund, flagged, [float(s) for s in shares]


def _payload(deal_id: str, op: str, **fields) -> bytes:
    return json.dumps({"deal_id": deal_id, "op": op, **fields}, sort_keys=True).encode()


class Market:
    """Deals sharing one chain and one token ledger.

    All operations validate first and only then write, so a rejected call
    leaves balances, escrow and the pending pool as they were.
    """

    def __init__(self, chain: Chain, tokens: TokenLedger | None = None, operator: str = "market"):
        self.chain = chain
        self.tokens = tokens or TokenLedger()
        self.operator = operator
        self.deals: dict[str, Deal] = {}
        self._lock = threading.RLock()
        chain.register_account(operator)

    def register_account(self, account: str, balance: int = 0) -> None:
        self.chain.register_account(account)
        if balance:
            self.tokens.mint(account, balance)

    def deploy(self) -> str:
        """Record the contract deployment."""
        return self.chain.submit(TxKind.CONTRACT_REGISTRY, self.operator, _payload("", "deploy"))

    def _deal(self, deal_id: str, *states: DealState) -> Deal:
        try:
            deal = self.deals[deal_id]
        except KeyError:
            raise MarketError(f"unknown deal {deal_id}") from None
        if states and deal.state not in states:
            allowed = ", ".join(s.value for s in states)
            raise InvalidStateError(f"deal {deal_id} is {deal.state.value}; needs {allowed}")
        return deal

    def _require_blob(self, digest: bytes, what: str) -> None:
        if digest not in self.chain.blobs:
            raise MarketError(f"{what} {bytes(digest).hex()} is not in the blob store")

    def publish_model(
        self, buyer: str, model_digest: bytes, test_digest: bytes, accuracy_target: float, deposit: int
    ) -> str:
        if not 0.0 <= accuracy_target <= 1.0:
            raise ValueError("accuracy_target must lie in [0, 1]")
        deposit = _amount(deposit)
        if deposit == 0:
            raise ValueError("deposit must be positive")
        with self._lock:
            if buyer not in self.chain.accounts:
                raise MarketError(f"buyer {buyer} is not registered")
            self._require_blob(model_digest, "model")
            self._require_blob(test_digest, "test set")
            if self.tokens.balance(buyer) < deposit:
                raise InsufficientBalanceError(
                    f"{buyer} holds {self.tokens.balance(buyer)}, deposit is {deposit}"
                )
            deal_id = f"deal-{len(self.deals):04d}"
            self.chain.submit(
                TxKind.PUBLISH,
                buyer,
                _payload(
                    deal_id,
                    "publish",
                    buyer=buyer,
                    model=bytes(model_digest).hex(),
                    test=bytes(test_digest).hex(),
                    target=accuracy_target,
                    deposit=deposit,
                ),
            )
            self.tokens.lock(deal_id, buyer, deposit)
            self.deals[deal_id] = Deal(
                deal_id, buyer, bytes(model_digest), bytes(test_digest), accuracy_target, deposit
            )
            return deal_id

    def register_seller(self, deal_id: str, seller: str) -> None:
        with self._lock:
            deal = self._deal(deal_id, DealState.PUBLISHED, DealState.TRAINING)
            if seller in deal.sellers:
                raise MarketError(f"{seller} already registered for {deal_id}")
            if seller not in self.chain.accounts:
                raise MarketError(f"seller {seller} is not registered")
            slot = len(deal.sellers)
            self.chain.submit(
                TxKind.ADD_WORKER, deal.buyer, _payload(deal_id, "add-worker", seller=seller, index=slot), slot
            )
            deal.sellers.append(seller)
            deal.state = DealState.TRAINING

    def record_round(
        self,
        deal_id: str,
        round: int,
        deltas: Mapping[str, bytes],
        aggregate_digest: bytes | None = None,
    ) -> None:
        """Record one training round: a ModelTraining tx per seller and one ModelAggregation tx.

        ``deltas`` maps seller id to the blob digest of that seller's update.
        """
        with self._lock:
            deal = self._deal(deal_id, DealState.TRAINING, DealState.AGGREGATED)
            if round != deal.next_round:
                raise MarketError(f"round {round} out of order; expected {deal.next_round}")
            if not deltas:
                raise MarketError("a round needs at least one update")
            for seller, digest in deltas.items():
                if seller not in deal.sellers:
                    raise MarketError(f"{seller} is not a seller of {deal_id}")
                self._require_blob(digest, f"update of {seller}")
            if aggregate_digest is not None:
                self._require_blob(aggregate_digest, "aggregate")
            for seller in sorted(deltas, key=deal.sellers.index):
                idx = deal.sellers.index(seller)
                self.chain.submit(
                    TxKind.MODEL_TRAINING,
                    seller,
                    _payload(deal_id, "train", round=round, seller=seller, update=bytes(deltas[seller]).hex()),
                    idx,
                )
            self.chain.submit(
                TxKind.MODEL_AGGREGATION,
                self.operator,
                _payload(
                    deal_id,
                    "aggregate",
                    round=round,
                    sellers=sorted(deltas, key=deal.sellers.index),
                    model=None if aggregate_digest is None else bytes(aggregate_digest).hex(),
                ),
                round,
            )
            deal.next_round += 1
            deal.state = DealState.AGGREGATED

    def verify_and_close(self, deal_id: str, final_model: ModelParams) -> DealState:
        """Evaluate ``final_model`` on the buyer's published test set and record the outcome."""
        with self._lock:
            deal = self._deal(deal_id, DealState.TRAINING, DealState.AGGREGATED)
            test = Dataset.from_bytes(self.chain.blobs.fetch(deal.test_digest))
            acc = utility(final_model, test)
            passed = acc >= deal.accuracy_target
            model_digest = self.chain.blobs.store(final_model.to_bytes())
            self.chain.submit(
                TxKind.COMMIT,
                self.operator,
                _payload(
                    deal_id,
                    "verify",
                    model=model_digest.hex(),
                    accuracy=acc,
                    target=deal.accuracy_target,
                    passed=passed,
                    attempt=deal.next_round,
                ),
            )
            deal.accuracy = acc
            if passed:
                deal.state = DealState.VERIFIED
            return deal.state

    def settle(self, deal_id: str, sv: ShapleyVector | Sequence[float], method: str | None = None) -> Payout:
        """Pay each seller ``floor(phi_i * deposit)`` and refund the remainder to the buyer."""
        with self._lock:
            deal = self._deal(deal_id, DealState.VERIFIED)
            if isinstance(sv, ShapleyVector):
                method = method or sv.method
                raw = [float(v) for v in sv.values]
            else:
                raw = [float(v) for v in sv]
            if len(raw) != len(deal.sellers):
                raise SettlementPolicyError(f"{len(raw)} contributions for {len(deal.sellers)} sellers")
            payments, refund, flagged, used = split_deposit(raw, deal.deposit)
            pairs = tuple(zip(deal.sellers, payments))
            self.chain.submit(
                TxKind.SETTLEMENT,
                self.operator,
                _payload(
                    deal_id,
                    "settle",
                    method=method,
                    phi_raw=raw,
                    phi_normalized=used,
                    payouts=[[s, p] for s, p in pairs],
                    refund=refund,
                    flagged=flagged,
                ),
            )
            self.chain.submit(
                TxKind.PAY_CHANNEL_EXECUTE,
                self.operator,
                _payload(
                    deal_id,
                    "pay",
                    transfers=[[s, p] for s, p in pairs] + [[deal.buyer, refund]],
                ),
            )
            for seller, amount in pairs:
                self.tokens.release(deal_id, seller, amount)
            self.tokens.release(deal_id, deal.buyer, refund)
            deal.state = DealState.SETTLED
            return Payout(deal_id, pairs, refund, flagged)

    def abort(self, deal_id: str) -> None:
        """Cancel an open deal and return the whole deposit to the buyer."""
        with self._lock:
            deal = self._deal(deal_id, *OPEN_STATES)
            self.chain.submit(
                TxKind.UPDATE, deal.buyer, _payload(deal_id, "abort", refund=deal.deposit, previous=deal.state.value)
            )
            self.tokens.release(deal_id, deal.buyer, self.tokens.escrow.get(deal_id, 0))
            deal.state = DealState.ABORTED

    def receipt(self, deal_id: str) -> dict:
        deal = self._deal(deal_id)
        if deal.state not in (DealState.SETTLED, DealState.ABORTED):
            raise InvalidStateError(f"deal {deal_id} is still {deal.state.value}")
        for tx in self.chain.pending:
            if json.loads(self.chain.blobs.fetch(tx.payload_hash)).get("deal_id") == deal_id:
                raise InvalidStateError(f"deal {deal_id} has transactions not yet mined")
        return receipt_from_chain(self.chain, deal_id)


def receipt_from_chain(chain: Chain, deal_id: str) -> dict:
    """Rebuild a deal's receipt from the main chain and the blob store only."""
    entries = []
    counts: dict[str, int] = {}
    settlement = None
    outcome = None
    for block in chain.main_path():
        for tx in block.txs:
            body = json.loads(chain.blobs.fetch(tx.payload_hash))
            if body.get("deal_id") != deal_id:
                continue
            counts[tx.kind.value] = counts.get(tx.kind.value, 0) + 1
            row = chain.schedule.row(tx.kind, tx.slot)
            entries.append(
                {
                    "tx_id": tx.tx_id,
                    "kind": tx.kind.value,
                    "height": block.height,
                    "gas": tx.gas_used,
                    "ether": row.ether,
                    "usd": row.usd,
                }
            )
            if body["op"] == "settle":
                settlement = body
                outcome = "settled"
            elif body["op"] == "abort":
                outcome = "aborted"
    if not entries:
        raise MarketError(f"no transactions for {deal_id} on the chain")
    gas = sum(e["gas"] for e in entries)
    return {
        "deal_id": deal_id,
        "outcome": outcome,
        "transactions": entries,
        "counts": dict(sorted(counts.items())),
        "gas_total": gas,
        "ether_total": round(sum(e["ether"] for e in entries), 12),
        "usd_total": round(sum(e["usd"] for e in entries), 10),
        "method": settlement and settlement["method"],
        "phi_raw": settlement and settlement["phi_raw"],
        "phi_normalized": settlement and settlement["phi_normalized"],
        "payouts": settlement and settlement["payouts"],
        "refund": settlement and settlement["refund"],
        "flagged": bool(settlement and settlement["flagged"]),
    }


def receipt_bytes(receipt: dict) -> bytes:
    return json.dumps(receipt, sort_keys=True).encode()


def settlement_report(receipt: dict) -> dict:
    """The settlement record written by the experiment driver."""
    keys = ("deal_id", "method", "phi_normalized", "payouts", "refund", "gas_total", "ether_total", "usd_total")
    return {k: receipt[k] for k in keys}
