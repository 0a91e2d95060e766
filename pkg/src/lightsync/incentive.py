"""Service-fee mechanism over an abstract in-simulation ledger.

The query transaction locks a service fee behind a hash-preimage script;
whoever reveals the preimage collects it. Setting the transaction fee above
the service fee makes abandoning a served prover strictly costlier than
paying him.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

from .chain import sha256
from .protocol import QueryTransaction, query_transaction


class FeePolicyWarning(UserWarning):
    """tx_fee <= service_fee: abandoning the prover is no longer demotivated."""


class LedgerError(Exception):
    pass


@dataclass(frozen=True)
class ScriptReveal:
    script: bytes
    redeemer: str


@dataclass(frozen=True)
class IssuedQuery:
    """A fresh query transaction plus the script preimage the verifier keeps."""

    tx: QueryTransaction
    script: bytes


def create_query_transaction(
    payload: bytes, service_fee: int, tx_fee: int, challenge_period: float, rng
) -> IssuedQuery:
    if not payload:
        raise ValueError("payload must be non-empty")
    if service_fee < 0 or tx_fee < 0:
        raise ValueError("fees must be nonnegative")
    if tx_fee <= service_fee:
        warnings.warn(
            f"tx_fee {tx_fee} <= service_fee {service_fee}; restarting with a new prover "
            "would cost the verifier less than revealing the script",
            FeePolicyWarning,
            stacklevel=2,
        )
    script = rng.bytes(32)
    tx = query_transaction(payload, sha256(script), service_fee, tx_fee, challenge_period)
    return IssuedQuery(tx, script)


@dataclass(frozen=True)
class RedeemResult:
    ok: bool
    paid: int = 0
    reason: str | None = None


MINER_SINK = "miners"


@dataclass
class SettlementLedger:
    """Balances plus the pending service fees locked by open queries.

    The sum of balances and pending fees is invariant; miner fees go to a
    sink account instead of modeling a fee market.
    """

    balances: dict[str, int] = field(default_factory=dict)
    pending: dict[bytes, tuple[bytes, int]] = field(default_factory=dict)

    def deposit(self, who: str, amount: int) -> None:
        self.balances[who] = self.balances.get(who, 0) + amount

    def post_query(self, tx: QueryTransaction, funder: str) -> None:
        if tx.id in self.pending:
            raise LedgerError("query transaction already pending")
        self.balances[funder] = self.balances.get(funder, 0) - tx.service_fee - tx.tx_fee
        self.balances[MINER_SINK] = self.balances.get(MINER_SINK, 0) + tx.tx_fee
        self.pending[tx.id] = (tx.script_hash, tx.service_fee)

    def total(self) -> int:
        return sum(self.balances.values()) + sum(fee for _, fee in self.pending.values())

    def to_json(self) -> dict:
        return {
            "balances": dict(sorted(self.balances.items())),
            "pending": {
                tx_id.hex(): {"script_hash": sh.hex(), "service_fee": fee}
                for tx_id, (sh, fee) in sorted(self.pending.items())
            },
        }


def redeem(ledger: SettlementLedger, tx_id: bytes, reveal: ScriptReveal) -> RedeemResult:
    """Pay the service fee to the redeemer iff the script hashes to the commitment."""
    if tx_id not in ledger.pending:
        raise LedgerError("unknown or already redeemed query transaction")
    script_hash, fee = ledger.pending[tx_id]
    if sha256(reveal.script) != script_hash:
        return RedeemResult(False, 0, "script does not hash to the commitment")
    del ledger.pending[tx_id]
    ledger.deposit(reveal.redeemer, fee)
    return RedeemResult(True, fee)


def abandonment_cost(service_fee: int, tx_fee: int) -> tuple[int, int]:
    """Verifier's marginal cost of restarting with a new prover vs revealing.

    Restarting burns a fresh transaction fee; revealing pays the service fee.
    Restart is strictly costlier exactly when tx_fee > service_fee.
    """
    return tx_fee, service_fee
