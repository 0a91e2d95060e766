"""Deterministic discrete-event simulation of miners, provers, and the verifier.

Block arrival times come from a Poisson schedule; each arrival then grinds a
real nonce against the configured target, so protocol-level PoW checks run
against genuine headers. All randomness flows through named Philox substreams
derived from a single seed, so adding actors never perturbs existing streams
and every output is a pure function of (seed, config).
"""

from __future__ import annotations

import hashlib
import heapq
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .chain import (
    ZERO32,
    Block,
    BlockHeader,
    CoinbaseData,
    UPGRADED_FLAG,
    coinbase_commitment,
    header_digest,
    non_upgraded_coinbase,
    sha256,
    tx_merkle_root,
)
from .mmr import MmrNodeStore
from .protocol import (
    FinalityProof,
    QueryTransaction,
    WinnerDecision,
    create_proof,
    select_winner,
)

DEFAULT_TARGET = 1 << 240
DEFAULT_MINING_BUDGET = 1 << 22

_MASK64 = (1 << 64) - 1


class AdversaryMmrStrategy(Enum):
    ALWAYS_INVALID_ROOT = "always-invalid-root"
    ALWAYS_VALID_ROOT = "always-valid-root"
    ACCEPT_OWN_REJECT_HONEST = "accept-own-reject-honest"


@dataclass(frozen=True)
class PopulationConfig:
    """Mining population: honest arrival rate, adversary power ratio, and the
    velvet upgrade mix (fraction upgraded, honest share among the upgraded)."""

    lambda_honest: float
    adversary_ratio: float = 0.0
    upgraded_fraction: float = 1.0
    upgraded_honest_fraction: float = 1.0
    alpha: int = 8
    adversary_mmr_strategy: AdversaryMmrStrategy = AdversaryMmrStrategy.ALWAYS_INVALID_ROOT

    def __post_init__(self):
        if self.lambda_honest < 0:
            raise ValueError("lambda_honest must be nonnegative")
        if not 0 <= self.adversary_ratio < 1:
            raise ValueError("adversary_ratio must be in [0, 1)")
        if not 0 < self.upgraded_fraction <= 1:
            raise ValueError("upgraded_fraction must be in (0, 1]")
        if not 0.5 < self.upgraded_honest_fraction <= 1:
            raise ValueError("upgraded honest majority required (fraction in (0.5, 1])")
        if self.alpha < 1:
            raise ValueError("alpha must be at least 1")


@dataclass(frozen=True)
class SimConfig:
    challenge_period: float
    k: int = 6
    seed: int = 0
    delta: float = 0.0
    difficulty_schedule: tuple[tuple[int, float], ...] = ((DEFAULT_TARGET, 0.0),)
    adversary_schedule: tuple[tuple[int, float], ...] | None = None
    inclusion_delay: float = 0.0
    mining_budget: int = DEFAULT_MINING_BUDGET

    def __post_init__(self):
        if self.challenge_period < 0 or self.delta < 0 or self.inclusion_delay < 0:
            raise ValueError("times must be nonnegative")
        if self.k < 0:
            raise ValueError("k must be nonnegative")
        for sched in (self.difficulty_schedule, self.adversary_schedule or ()):
            if len(sched) > 2:
                raise ValueError("difficulty may change at most once per chain")
            if sched and sched[0][1] != 0.0:
                raise ValueError("first schedule entry must start at time 0")

    def honest_segments(self, horizon: float, start: float = 0.0):
        return _segments(self.difficulty_schedule, horizon, start)

    def adversary_segments(self, horizon: float, start: float = 0.0):
        sched = self.adversary_schedule or self.difficulty_schedule
        return _segments(sched, horizon, start)


def _segments(schedule, horizon: float, start: float):
    """Clip a (target, start_time) schedule to [start, horizon) segments."""
    out = []
    for i, (target, t0) in enumerate(schedule):
        t1 = schedule[i + 1][1] if i + 1 < len(schedule) else horizon
        lo, hi = max(t0, start), min(t1, horizon)
        if lo < hi:
            out.append((target, lo, hi))
    return out


def _target_at(schedule, time: float) -> int:
    target = schedule[0][0]
    for tgt, t0 in schedule:
        if time >= t0:
            target = tgt
    return target


# --- seeded randomness ---


def substream(seed: int, *labels) -> np.random.Generator:
    """Named counter-based substream: one Philox generator per (seed, labels)."""
    material = repr((int(seed) & _MASK64, labels)).encode()
    digest = hashlib.sha256(b"lightsync.rng:" + material).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


def _seed_of(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng) & _MASK64
    return int(rng.integers(0, 1 << 63))


def sample_poisson_times(rate: float, horizon: float, rng: np.random.Generator) -> np.ndarray:
    """Strictly increasing Poisson arrival times in [0, horizon)."""
    if rate < 0 or horizon < 0:
        raise ValueError("rate and horizon must be nonnegative")
    if rate == 0 or horizon == 0:
        return np.empty(0)
    times = np.empty(0)
    last = 0.0
    while last < horizon:
        expect = rate * (horizon - last)
        n = int(expect + 5 * math.sqrt(expect) + 16)
        gaps = rng.exponential(1.0 / rate, size=n)
        times = np.concatenate([times, last + np.cumsum(gaps)])
        last = float(times[-1])
    return times[times < horizon]


# --- mining ---


@dataclass(frozen=True)
class Miner:
    name: str
    honest: bool = True
    upgraded: bool = False


class MiningBudgetError(RuntimeError):
    """Target too hard for the configured desk-scale grinding budget."""


def mine_next(
    parent: BlockHeader | None,
    miner: Miner,
    target: int,
    coinbase: CoinbaseData | None,
    rng: np.random.Generator,
    *,
    txs: Sequence[bytes] = (),
    timestamp: int | None = None,
    mined_at: float = 0.0,
    budget: int = DEFAULT_MINING_BUDGET,
) -> Block:
    """Grind a nonce until the header meets the target; returns the full block."""
    if coinbase is not None and coinbase.is_upgraded and not miner.upgraded:
        raise ValueError("non-upgraded miner cannot emit an upgraded coinbase")
    height = 0 if parent is None else parent.height + 1
    prev = ZERO32 if parent is None else header_digest(parent)
    tx_root = tx_merkle_root(txs) if txs else ZERO32
    ts = height if timestamp is None else timestamp
    commitment = coinbase_commitment(coinbase)

    prefix = struct.pack(">Q", height) + prev + tx_root + target.to_bytes(32, "big")
    suffix = struct.pack(">Q", ts) + commitment
    nonce0 = int(rng.integers(0, 1 << 62))
    for i in range(budget):
        nonce = (nonce0 + i) & _MASK64
        data = prefix + struct.pack(">Q", nonce) + suffix
        digest = hashlib.sha256(hashlib.sha256(data).digest()).digest()
        if int.from_bytes(digest, "big") < target:
            header = BlockHeader(height, prev, tx_root, target, nonce, ts, commitment)
            return Block(header, tuple(txs), coinbase, mined_at)
    raise MiningBudgetError(f"no nonce below target within {budget} attempts")


def _filler_tx(height: int) -> bytes:
    return b"tx:" + struct.pack(">Q", height)


def corrupt_root(root: bytes) -> bytes:
    """Adversary-planted commitment with no derivable peak set."""
    return sha256(b"invalid-root:" + root)


# --- velvet voting ---


@dataclass(frozen=True)
class UpgradedRef:
    """Harness view of one preceding upgraded block, as a voter sees it."""

    height: int
    mmr_root: bytes
    root_valid: bool
    adversary_mined: bool


def cast_votes(
    honest: bool,
    previous_upgraded: Sequence[UpgradedRef],
    alpha: int,
    strategy: AdversaryMmrStrategy = AdversaryMmrStrategy.ALWAYS_INVALID_ROOT,
) -> tuple[int, ...]:
    """Vote bits over the most recent upgraded predecessors, most recent last.

    Honest miners accept exactly the roots matching their local recomputation;
    adversary miners vote per strategy. High-order bits stay zero when fewer
    than alpha upgraded predecessors exist.
    """
    bits = [0] * alpha
    recent = list(previous_upgraded)[-alpha:]
    for d, ref in enumerate(reversed(recent)):
        if honest or strategy is AdversaryMmrStrategy.ALWAYS_VALID_ROOT:
            vote = 1 if ref.root_valid else 0
        else:
            vote = 1 if ref.adversary_mined else 0
        bits[alpha - 1 - d] = vote
    return tuple(bits)


# --- velvet fork history generation ---


@dataclass(frozen=True)
class VelvetHistory:
    blocks: tuple[Block, ...]
    upgraded: tuple[bool, ...]
    adversary: tuple[bool, ...]
    store: MmrNodeStore
    alpha: int

    @property
    def headers(self) -> tuple[BlockHeader, ...]:
        return tuple(b.header for b in self.blocks)

    @property
    def coinbases(self) -> tuple[CoinbaseData, ...]:
        return tuple(b.coinbase for b in self.blocks)

    def honest_root_over(self, leaf_count: int) -> bytes:
        """Root of the honest accumulator over headers [0, leaf_count)."""
        return self.store.root(leaf_count)


def run_velvet_history(
    population: PopulationConfig,
    length: int,
    rng,
    *,
    target: int = DEFAULT_TARGET,
    budget: int = DEFAULT_MINING_BUDGET,
) -> VelvetHistory:
    """Mine a chain where each post-genesis block is upgraded with probability
    1/l and upgraded blocks are honest with probability M_h.

    Genesis carries no commitment (there is nothing to commit to yet).
    """
    if length < 1:
        raise ValueError("length must be at least 1")
    seed = _seed_of(rng)
    draw = substream(seed, "velvet", "coins")
    miner_rng = substream(seed, "velvet", "mining")
    alpha = population.alpha
    strategy = population.adversary_mmr_strategy

    store = MmrNodeStore()
    blocks: list[Block] = []
    upgraded_mask: list[bool] = []
    adversary_mask: list[bool] = []
    upgraded_refs: list[UpgradedRef] = []

    honest_miner = Miner("honest", honest=True, upgraded=True)
    adv_miner = Miner("adversary", honest=False, upgraded=True)
    plain_miner = Miner("plain", honest=True, upgraded=False)

    for h in range(length):
        parent = blocks[-1].header if blocks else None
        is_up = h > 0 and bool(draw.random() < population.upgraded_fraction)
        is_adv = is_up and bool(draw.random() >= population.upgraded_honest_fraction)
        if is_up:
            honest_root = store.root(h)
            if is_adv and strategy is AdversaryMmrStrategy.ALWAYS_INVALID_ROOT:
                root = corrupt_root(honest_root)
            else:
                root = honest_root
            votes = cast_votes(not is_adv, upgraded_refs, alpha, strategy)
            cb = CoinbaseData(UPGRADED_FLAG, root, votes)
            miner = adv_miner if is_adv else honest_miner
        else:
            cb = non_upgraded_coinbase(alpha)
            miner = plain_miner
        block = mine_next(
            parent, miner, target, cb, miner_rng, txs=(_filler_tx(h),), budget=budget
        )
        blocks.append(block)
        upgraded_mask.append(is_up)
        adversary_mask.append(is_adv)
        if is_up:
            upgraded_refs.append(UpgradedRef(h, cb.mmr_root, cb.mmr_root == store.root(h), is_adv))
        store.append(header_digest(block.header))

    return VelvetHistory(
        tuple(blocks), tuple(upgraded_mask), tuple(adversary_mask), store, alpha
    )


# --- event loop ---


@dataclass(frozen=True)
class Event:
    time: float
    kind: str  # "block-mined" | "message-delivered" | "timer-fired"
    payload: dict


class EventLoop:
    """Single-threaded queue: nondecreasing time order, FIFO on equal stamps.

    Messages sent through :meth:`send` arrive one communication delay later;
    the transcript records every processed event.
    """

    def __init__(self, delta: float = 0.0):
        self.delta = delta
        self._queue: list[tuple[float, int, Event]] = []
        self._seq = 0
        self.transcript: list[dict] = []
        self.now = 0.0

    def at(self, time: float, kind: str, payload: dict) -> None:
        heapq.heappush(self._queue, (time, self._seq, Event(time, kind, payload)))
        self._seq += 1

    def send(self, now: float, payload: dict) -> None:
        self.at(now + self.delta, "message-delivered", payload)

    def run(self, handler: Callable[[Event, "EventLoop"], None]) -> list[dict]:
        while self._queue:
            _, _, event = heapq.heappop(self._queue)
            self.now = event.time
            self.transcript.append({"time": event.time, "kind": event.kind, **event.payload})
            handler(event, self)
        return self.transcript


# --- challenge race ---


@dataclass(frozen=True)
class RaceOutcome:
    decision: WinnerDecision
    honest_proof: FinalityProof | None
    adversary_proof: FinalityProof | None
    adversary_won: bool
    honest_blocks: int
    adversary_blocks: int
    transcript: list[dict] = field(repr=False, default_factory=list)


HONEST_PROVER = 0
ADVERSARY_PROVER = 1


def run_challenge_race(
    population: PopulationConfig,
    sim: SimConfig,
    query_tx: QueryTransaction,
    rng,
) -> RaceOutcome:
    """Full-fidelity challenge race between one honest and one adversary prover.

    Both provers share a pre-race history whose tip (mined at period start)
    carries the query transaction, so proofs on both sides anchor at the same
    block and the difficulty comparison reduces to the in-period arrivals.
    The honest chain grows at the scheduled rate starting at the inclusion
    delay; the adversary mines privately from period start. Proofs are built
    at 2*delta before the deadline and arrive one delay later; anything
    delivered after the deadline is excluded.
    """
    seed = _seed_of(rng)
    t = sim.challenge_period
    k = sim.k
    hon_sched = sim.difficulty_schedule
    adv_sched = sim.adversary_schedule or sim.difficulty_schedule
    base_target = hon_sched[0][0]
    power = population.lambda_honest / base_target
    adv_power = population.adversary_ratio * power

    hist_rng = substream(seed, "race", "history")
    history: list[Block] = []
    hist_len = max(k + 1, 2)
    harness = Miner("harness")
    for h in range(hist_len):
        parent = history[-1].header if history else None
        txs = (query_tx.to_bytes(),) if h == hist_len - 1 else (_filler_tx(h),)
        history.append(
            mine_next(parent, harness, base_target, None, hist_rng, txs=txs,
                      timestamp=0, budget=sim.mining_budget)
        )

    hon_rng = substream(seed, "race", "arrivals", "honest")
    adv_rng = substream(seed, "race", "arrivals", "adversary")
    mine_hon = substream(seed, "race", "mining", "honest")
    mine_adv = substream(seed, "race", "mining", "adversary")

    loop = EventLoop(delta=sim.delta)
    for target, lo, hi in sim.honest_segments(t, start=sim.inclusion_delay):
        rate = power * target
        for at in sample_poisson_times(rate, hi - lo, hon_rng):
            loop.at(lo + float(at), "block-mined", {"side": "honest"})
    for target, lo, hi in sim.adversary_segments(t):
        rate = adv_power * target
        for at in sample_poisson_times(rate, hi - lo, adv_rng):
            loop.at(lo + float(at), "block-mined", {"side": "adversary"})

    respond_at = max(0.0, t - 2 * sim.delta)
    loop.at(respond_at, "timer-fired", {"timer": "prover-response", "prover": HONEST_PROVER})
    loop.at(respond_at, "timer-fired", {"timer": "prover-response", "prover": ADVERSARY_PROVER})
    loop.at(t, "timer-fired", {"timer": "deadline"})

    honest_chain = list(history)
    adversary_chain = list(history)
    proofs: dict[int, FinalityProof] = {}
    deliveries: list[tuple[float, int]] = []
    miner_h = Miner("honest-miner")
    miner_a = Miner("adversary-miner", honest=False)

    def handler(event: Event, lp: EventLoop) -> None:
        if event.kind == "block-mined":
            if event.payload["side"] == "honest":
                chain, miner, rng_m, sched = honest_chain, miner_h, mine_hon, hon_sched
            else:
                chain, miner, rng_m, sched = adversary_chain, miner_a, mine_adv, adv_sched
            parent = chain[-1].header
            block = mine_next(
                parent, miner, _target_at(sched, event.time), None, rng_m,
                txs=(_filler_tx(parent.height + 1),), timestamp=int(event.time),
                mined_at=event.time, budget=sim.mining_budget,
            )
            chain.append(block)
        elif event.kind == "timer-fired" and event.payload.get("timer") == "prover-response":
            prover = event.payload["prover"]
            chain = honest_chain if prover == HONEST_PROVER else adversary_chain
            proofs[prover] = create_proof(list(chain), query_tx, k)
            lp.send(event.time, {"prover": prover})
        elif event.kind == "message-delivered":
            deliveries.append((event.time, event.payload["prover"]))

    transcript = loop.run(handler)

    on_time = [(p, proofs[p]) for when, p in sorted(deliveries) if when <= t]
    decision = select_winner(on_time, query_tx, k)
    adversary_won = decision.winner_id != HONEST_PROVER or decision.tie

    return RaceOutcome(
        decision=decision,
        honest_proof=proofs.get(HONEST_PROVER),
        adversary_proof=proofs.get(ADVERSARY_PROVER),
        adversary_won=adversary_won,
        honest_blocks=len(honest_chain) - hist_len,
        adversary_blocks=len(adversary_chain) - hist_len,
        transcript=transcript,
    )


# --- vectorized race outcomes (counts model) ---


@dataclass(frozen=True)
class RaceStats:
    trials: int
    adversary_wins: int
    failure_rate: float
    ci95: tuple[float, float]
    wins: np.ndarray = field(repr=False, default=None)


def race_monte_carlo(
    population: PopulationConfig, sim: SimConfig, trials: int, rng
) -> RaceStats:
    """Sample race outcomes from the arrival counts alone.

    The winner comparison matches run_challenge_race exactly (both proofs
    share the anchor term, which cancels): the adversary wins when the
    overall difficulty of his in-period blocks is >= the honest one, ties
    included. Equal-target configurations reduce to a pure count comparison.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    seed = _seed_of(rng)
    gen = substream(seed, "race-mc")
    t = sim.challenge_period
    base_target = sim.difficulty_schedule[0][0]
    power = population.lambda_honest / base_target
    adv_power = population.adversary_ratio * power

    hon_segs = sim.honest_segments(t, start=sim.inclusion_delay)
    adv_segs = sim.adversary_segments(t)
    hon_counts = [gen.poisson(power * tgt * (hi - lo), size=trials) for tgt, lo, hi in hon_segs]
    adv_counts = [gen.poisson(adv_power * tgt * (hi - lo), size=trials) for tgt, lo, hi in adv_segs]

    targets = {tgt for tgt, _, _ in hon_segs} | {tgt for tgt, _, _ in adv_segs}
    if len(targets) <= 1:
        hon = sum(hon_counts) if hon_counts else np.zeros(trials, dtype=np.int64)
        adv = sum(adv_counts) if adv_counts else np.zeros(trials, dtype=np.int64)
        wins = adv >= hon
    else:
        # cross-multiplied exact integer comparison of sum(n_i / T_i)
        denom_h = math.prod(tgt for tgt, _, _ in hon_segs) if hon_segs else 1
        denom_a = math.prod(tgt for tgt, _, _ in adv_segs) if adv_segs else 1
        coef_h = [denom_h // tgt for tgt, _, _ in hon_segs]
        coef_a = [denom_a // tgt for tgt, _, _ in adv_segs]
        wins = np.empty(trials, dtype=bool)
        hon_cols = [c.tolist() for c in hon_counts]
        adv_cols = [c.tolist() for c in adv_counts]
        for i in range(trials):
            hon_num = sum(c * col[i] for c, col in zip(coef_h, hon_cols))
            adv_num = sum(c * col[i] for c, col in zip(coef_a, adv_cols))
            wins[i] = adv_num * denom_h >= hon_num * denom_a

    n_wins = int(wins.sum())
    rate = n_wins / trials
    half = 1.96 * math.sqrt(max(rate * (1 - rate), 1e-300) / trials)
    return RaceStats(trials, n_wins, rate, (max(0.0, rate - half), min(1.0, rate + half)), wins)


# --- JSON config mirror ---


def population_to_json(pop: PopulationConfig) -> dict:
    return {
        "lambda_honest": pop.lambda_honest,
        "adversary_ratio": pop.adversary_ratio,
        "upgraded_fraction": pop.upgraded_fraction,
        "upgraded_honest_fraction": pop.upgraded_honest_fraction,
        "alpha": pop.alpha,
        "adversary_mmr_strategy": pop.adversary_mmr_strategy.value,
    }


def population_from_json(obj: dict) -> PopulationConfig:
    kwargs = dict(obj)
    if "adversary_mmr_strategy" in kwargs:
        kwargs["adversary_mmr_strategy"] = AdversaryMmrStrategy(kwargs["adversary_mmr_strategy"])
    return PopulationConfig(**kwargs)


def _schedule_to_json(sched):
    return None if sched is None else [[hex(tgt), t0] for tgt, t0 in sched]


def _schedule_from_json(obj):
    return None if obj is None else tuple((int(tgt, 16), float(t0)) for tgt, t0 in obj)


def sim_to_json(sim: SimConfig) -> dict:
    return {
        "challenge_period": sim.challenge_period,
        "k": sim.k,
        "seed": sim.seed,
        "delta": sim.delta,
        "difficulty_schedule": _schedule_to_json(sim.difficulty_schedule),
        "adversary_schedule": _schedule_to_json(sim.adversary_schedule),
        "inclusion_delay": sim.inclusion_delay,
        "mining_budget": sim.mining_budget,
    }


def sim_from_json(obj: dict) -> SimConfig:
    kwargs = dict(obj)
    if "difficulty_schedule" in kwargs:
        kwargs["difficulty_schedule"] = _schedule_from_json(kwargs["difficulty_schedule"])
    if "adversary_schedule" in kwargs:
        kwargs["adversary_schedule"] = _schedule_from_json(kwargs["adversary_schedule"])
    return SimConfig(**kwargs)
