"""Prover and verifier procedures: finality proofs, overall-difficulty
comparison, velvet-fork accumulator discovery with vote tallying, and the
constant-space stay-up-to-date loop.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .chain import (
    Block,
    BlockHeader,
    CoinbaseData,
    TxMerkleProof,
    chain_from_json,
    chain_to_json,
    coinbase_commitment,
    header_digest,
    meets_target,
    parse_coinbase,
    parse_header,
    serialize_coinbase,
    serialize_header,
    sha256,
    tx_merkle_prove,
    tx_merkle_verify,
    validate_linkage,
)
from .mmr import MmrAccumulator, MmrNodeStore, mmr_append, mmr_extend_root, mmr_root


@dataclass(frozen=True)
class QueryTransaction:
    """P2SH-style transaction anchoring the race start and carrying the fees."""

    id: bytes
    payload: bytes
    script_hash: bytes
    service_fee: int
    tx_fee: int
    challenge_period: float

    def to_bytes(self) -> bytes:
        return serialize_query_body(
            self.payload, self.script_hash, self.service_fee, self.tx_fee, self.challenge_period
        )


def serialize_query_body(
    payload: bytes, script_hash: bytes, service_fee: int, tx_fee: int, challenge_period: float
) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + payload
        + script_hash
        + struct.pack(">QQd", service_fee, tx_fee, challenge_period)
    )


def query_transaction(
    payload: bytes, script_hash: bytes, service_fee: int, tx_fee: int, challenge_period: float
) -> QueryTransaction:
    body = serialize_query_body(payload, script_hash, service_fee, tx_fee, challenge_period)
    return QueryTransaction(sha256(body), payload, script_hash, service_fee, tx_fee, challenge_period)


class ProofError(Exception):
    pass


class NoInclusionError(ProofError):
    """The query transaction never made it into the prover's chain."""


@dataclass(frozen=True)
class FinalityProof:
    """Header sub-chain plus the query transaction's Merkle inclusion proof.

    ``tx_block_offset`` indexes the transaction's block within the slice;
    leading headers before it are history padding that contributes nothing
    to the overall difficulty.
    """

    headers: tuple[BlockHeader, ...]
    tx_block_offset: int
    tx_inclusion: TxMerkleProof

    def to_bytes(self) -> bytes:
        out = struct.pack(">Q", len(self.headers))
        out += b"".join(serialize_header(h) for h in self.headers)
        out += struct.pack(">Q", self.tx_block_offset)
        tx = self.tx_inclusion
        out += struct.pack(">Q", len(tx.leaf)) + tx.leaf
        out += struct.pack(">QQ", tx.index, len(tx.siblings)) + b"".join(tx.siblings)
        return out

    @classmethod
    def from_bytes(cls, data: bytes) -> "FinalityProof":
        (n,) = struct.unpack_from(">Q", data, 0)
        off = 8
        headers = []
        for _ in range(n):
            headers.append(parse_header(data[off : off + 152]))
            off += 152
        (q,) = struct.unpack_from(">Q", data, off)
        off += 8
        (leaf_len,) = struct.unpack_from(">Q", data, off)
        off += 8
        leaf = data[off : off + leaf_len]
        off += leaf_len
        index, n_sib = struct.unpack_from(">QQ", data, off)
        off += 16
        sibs = tuple(data[off + 32 * i : off + 32 * (i + 1)] for i in range(n_sib))
        off += 32 * n_sib
        if off != len(data) or len(leaf) != leaf_len or any(len(s) != 32 for s in sibs):
            raise ValueError("malformed finality proof")
        return cls(tuple(headers), q, TxMerkleProof(leaf, index, sibs))

    def to_json(self) -> dict:
        return {
            "headers": chain_to_json(self.headers),
            "tx_block_offset": self.tx_block_offset,
            "tx_inclusion": {
                "leaf": self.tx_inclusion.leaf.hex(),
                "index": self.tx_inclusion.index,
                "siblings": [s.hex() for s in self.tx_inclusion.siblings],
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FinalityProof":
        tx = obj["tx_inclusion"]
        return cls(
            chain_from_json(obj["headers"]),
            obj["tx_block_offset"],
            TxMerkleProof(
                bytes.fromhex(tx["leaf"]), tx["index"], tuple(bytes.fromhex(s) for s in tx["siblings"])
            ),
        )


def create_proof(
    prover_chain: Sequence[Block],
    query_tx: QueryTransaction,
    k: int,
    *,
    delta: float = 0.0,
    deadline: float | None = None,
) -> FinalityProof:
    """Build the finality proof from the prover's local chain.

    The slice runs from the transaction's block to the tip; when fewer than
    k confirmations exist it is left-padded with earlier headers to exactly
    k+1 entries. When ``deadline`` is set, only blocks mined by
    ``deadline - 2*delta`` (the response cutoff) are considered.
    """
    blocks = list(prover_chain)
    if deadline is not None:
        cutoff = deadline - 2 * delta
        blocks = [b for b in blocks if b.mined_at <= cutoff]
    tx_bytes = query_tx.to_bytes()
    q_idx = None
    for i, block in enumerate(blocks):
        if tx_bytes in block.txs:
            q_idx = i
            break
    if q_idx is None:
        raise NoInclusionError("query transaction not included in the local chain")
    m = len(blocks) - q_idx
    start = q_idx if m >= k + 1 else q_idx - (k + 1 - m)
    if start < 0:
        raise ProofError(f"chain too short to pad the proof to {k + 1} headers")
    tx_proof = tx_merkle_prove(blocks[q_idx].txs, blocks[q_idx].txs.index(tx_bytes))
    headers = tuple(b.header for b in blocks[start:])
    return FinalityProof(headers, q_idx - start, tx_proof)


def explain_proof(proof: FinalityProof, query_tx: QueryTransaction, k: int) -> list[str]:
    """Diagnostics for the four finality-proof checks; empty means valid."""
    problems = []
    if len(proof.headers) < k + 1:
        problems.append(f"length {len(proof.headers)} below k+1 = {k + 1}")
    if not 0 <= proof.tx_block_offset < len(proof.headers):
        problems.append("tx block offset out of range")
        return problems
    tx_block = proof.headers[proof.tx_block_offset]
    if proof.tx_inclusion.leaf != query_tx.to_bytes():
        problems.append("inclusion proof is not over the query transaction")
    elif not tx_merkle_verify(tx_block.tx_root, proof.tx_inclusion):
        problems.append("merkle inclusion proof does not verify")
    check = validate_linkage(proof.headers)
    if not check.ok:
        problems.append(f"{check.failure} failure at height {check.height}")
    return problems


def validate_proof(proof: FinalityProof, query_tx: QueryTransaction, k: int) -> bool:
    """Length, inclusion, linkage, and PoW checks; True only if all pass."""
    return not explain_proof(proof, query_tx, k)


def overall_difficulty(proof: FinalityProof, query_tx: QueryTransaction) -> Fraction:
    """Sum of 1/target from the transaction's block to the last header.

    Exact rational accumulation, so equal difficulties compare as true ties.
    """
    return sum(
        (Fraction(1, h.target) for h in proof.headers[proof.tx_block_offset :]),
        start=Fraction(0),
    )


@dataclass(frozen=True)
class ProofEntry:
    prover_id: int
    valid: bool
    difficulty: Fraction | None


@dataclass(frozen=True)
class WinnerDecision:
    winner_id: int | None
    tie: bool
    entries: tuple[ProofEntry, ...]

    def to_json(self) -> dict:
        return {
            "winner": self.winner_id,
            "tie": self.tie,
            "proofs": [
                {
                    "prover": e.prover_id,
                    "valid": e.valid,
                    "overall_difficulty": None if e.difficulty is None else str(e.difficulty),
                }
                for e in self.entries
            ],
        }


def select_winner(
    proofs: Sequence[tuple[int, FinalityProof]], query_tx: QueryTransaction, k: int
) -> WinnerDecision:
    """Filter invalid proofs and pick the highest overall difficulty.

    An exact difficulty tie goes to the lowest prover id and is flagged.
    """
    entries = []
    best: tuple[Fraction, int] | None = None
    tie = False
    for prover_id, proof in proofs:
        if validate_proof(proof, query_tx, k):
            diff = overall_difficulty(proof, query_tx)
            entries.append(ProofEntry(prover_id, True, diff))
            if best is None or diff > best[0] or (diff == best[0] and prover_id < best[1]):
                tie = best is not None and diff == best[0]
                best = (diff, prover_id)
            elif diff == best[0]:
                tie = True
        else:
            entries.append(ProofEntry(prover_id, False, None))
    return WinnerDecision(best[1] if best else None, tie, tuple(entries))


# --- velvet-fork accumulator discovery ---


class DiscoveryError(Exception):
    def __init__(self, step: str, message: str):
        super().__init__(f"{step}: {message}")
        self.step = step


@dataclass(frozen=True)
class MmrDiscoveryProof:
    """Chain suffix ending at the last finalized header, carrying alpha+beta
    upgraded blocks, every block's coinbase data, and the peak sets that let
    the verifier extend whichever candidate root wins the vote."""

    headers: tuple[BlockHeader, ...]
    coinbase_list: tuple[CoinbaseData, ...]
    upgraded_count: int
    candidate_peaks: tuple[tuple[bytes, ...] | None, ...]

    def to_json(self) -> dict:
        return {
            "headers": chain_to_json(self.headers),
            "coinbases": [serialize_coinbase(cb).hex() for cb in self.coinbase_list],
            "upgraded_count": self.upgraded_count,
            "candidate_peaks": [
                None if peaks is None else [p.hex() for p in peaks]
                for peaks in self.candidate_peaks
            ],
        }

    @classmethod
    def from_json(cls, obj: dict, alpha: int) -> "MmrDiscoveryProof":
        return cls(
            chain_from_json(obj["headers"]),
            tuple(parse_coinbase(bytes.fromhex(cb), alpha) for cb in obj["coinbases"]),
            obj["upgraded_count"],
            tuple(
                None if peaks is None else tuple(bytes.fromhex(p) for p in peaks)
                for peaks in obj["candidate_peaks"]
            ),
        )


def build_mmr_discovery(
    prover_chain: Sequence[BlockHeader],
    coinbases: Sequence[CoinbaseData],
    last_finalized: BlockHeader,
    alpha: int,
    beta: int,
    *,
    node_store: MmrNodeStore | None = None,
) -> MmrDiscoveryProof:
    """Shortest suffix ending at the last finalized header that contains
    exactly alpha+beta upgraded blocks, with aligned coinbase data.

    Peak sets are attached for each candidate whose committed root the
    prover can actually derive from its node store.
    """
    want = alpha + beta
    fin_digest = header_digest(last_finalized)
    f_idx = next(
        (i for i, h in enumerate(prover_chain) if header_digest(h) == fin_digest), None
    )
    if f_idx is None:
        raise ProofError("last finalized header not on the prover's chain")
    count = 0
    start = None
    for i in range(f_idx, -1, -1):
        if coinbases[i].is_upgraded:
            count += 1
            if count == want:
                start = i
                break
    if start is None:
        raise ProofError(
            f"only {count} upgraded blocks at or before the finalized header, need {want}"
        )
    headers = tuple(prover_chain[start : f_idx + 1])
    cbs = tuple(coinbases[start : f_idx + 1])
    candidates = [j for j, cb in enumerate(cbs) if cb.is_upgraded][:beta]
    peaks: list[tuple[bytes, ...] | None] = []
    for j in candidates:
        height = headers[j].height
        peak_set = None
        if node_store is not None and node_store.leaf_count >= height > 0:
            acc = node_store.accumulator(height)
            if mmr_root(acc) == cbs[j].mmr_root:
                peak_set = acc.peaks
        peaks.append(peak_set)
    return MmrDiscoveryProof(headers, cbs, want, tuple(peaks))


def tally_votes(
    coinbases: Sequence[CoinbaseData], upgraded_positions: Sequence[int], alpha: int, beta: int
) -> list[int]:
    """Accept-vote counts for the first beta upgraded blocks, each tallied over
    the alpha upgraded blocks that follow it. Bit alpha-1 of a voter's buffer
    refers to its most recent upgraded predecessor."""
    counts = []
    for i in range(beta):
        votes = 0
        for j in range(i + 1, i + alpha + 1):
            voter = coinbases[upgraded_positions[j]]
            votes += voter.vote_buffer[alpha - (j - i)]
        counts.append(votes)
    return counts


def find_last_mmr(
    proof: MmrDiscoveryProof, last_finalized: BlockHeader, alpha: int, beta: int
) -> bytes:
    """Elect the last candidate root with a strict vote majority and extend it
    to cover every header through the finalized one.

    Structural failures raise DiscoveryError with the failing step; an empty
    valid set raises step "no-valid-candidate".
    """
    headers = proof.headers
    if not headers or header_digest(headers[-1]) != header_digest(last_finalized):
        raise DiscoveryError("anchor", "proof does not end at the last finalized header")
    upgraded_local = [i for i, cb in enumerate(proof.coinbase_list) if cb.is_upgraded]
    if len(upgraded_local) != alpha + beta or proof.upgraded_count != alpha + beta:
        raise DiscoveryError(
            "upgraded-count", f"{len(upgraded_local)} upgraded headers, need {alpha + beta}"
        )
    if len(proof.coinbase_list) != len(headers) or len(proof.candidate_peaks) != beta:
        raise DiscoveryError("upgraded-count", "misaligned coinbase or peak lists")
    if any(len(proof.coinbase_list[i].vote_buffer) != alpha for i in upgraded_local):
        raise DiscoveryError("vote-buffer", f"vote buffers must carry exactly {alpha} bits")
    # PoW is not rechecked here: backward linkage to the already-accepted
    # finalized header authenticates the whole slice.
    for a, b in zip(headers, headers[1:]):
        if b.height != a.height + 1 or b.prev_hash != header_digest(a):
            raise DiscoveryError("linkage", f"broken prev-hash link at height {b.height}")
    for i, cb in enumerate(proof.coinbase_list):
        if coinbase_commitment(cb) != headers[i].coinbase_commitment:
            raise DiscoveryError(
                "coinbase-inclusion", f"coinbase does not hash to the commitment at slice index {i}"
            )
    counts = tally_votes(proof.coinbase_list, upgraded_local, alpha, beta)
    valid_set = [i for i in range(beta) if counts[i] > alpha // 2]
    if not valid_set:
        raise DiscoveryError("no-valid-candidate", "no candidate got a strict vote majority")
    elected = valid_set[-1]
    pos = upgraded_local[elected]
    v_height = headers[pos].height
    root = proof.coinbase_list[pos].mmr_root
    peaks = proof.candidate_peaks[elected]
    if peaks is None:
        raise DiscoveryError("peaks-unavailable", "no peak set supplied for the elected root")
    try:
        acc = MmrAccumulator(v_height, peaks)
    except ValueError as exc:
        raise DiscoveryError("peaks-mismatch", str(exc)) from exc
    if mmr_root(acc) != root:
        raise DiscoveryError("peaks-mismatch", "peak set does not bag to the elected root")
    new_leaves = [header_digest(h) for h in headers[pos:]]
    return mmr_extend_root(peaks, v_height, new_leaves)


# --- staying up to date ---


@dataclass(frozen=True)
class VerifierState:
    """Constant-space verifier state: a k+1 window (plus live forks), the
    accumulator over everything at or below the last finalized header, and
    that header itself."""

    window: tuple[BlockHeader, ...]
    accumulator: MmrAccumulator
    last_finalized: BlockHeader
    k: int

    @classmethod
    def start(cls, last_finalized: BlockHeader, accumulator: MmrAccumulator, k: int) -> "VerifierState":
        if accumulator.leaf_count != last_finalized.height + 1:
            raise ValueError("accumulator must cover exactly the finalized prefix")
        return cls((last_finalized,), accumulator, last_finalized, k)


@dataclass(frozen=True)
class SyncResult:
    state: VerifierState
    accepted: bool
    reason: str | None = None
    finalized: tuple[BlockHeader, ...] = ()


def sync_step(state: VerifierState, new_header: BlockHeader) -> SyncResult:
    """Validate one incoming header against the window; finalize at depth k.

    Newly finalized headers feed the accumulator and everything at or below
    them is dropped, keeping the window at k+1 headers plus live forks.
    """
    by_digest: Mapping[bytes, BlockHeader] = {header_digest(h): h for h in state.window}
    digest = header_digest(new_header)
    if digest in by_digest:
        return SyncResult(state, False, "duplicate")
    parent = by_digest.get(new_header.prev_hash)
    if parent is None:
        return SyncResult(state, False, "no-link")
    if new_header.height != parent.height + 1:
        return SyncResult(state, False, "height")
    if not meets_target(new_header):
        return SyncResult(state, False, "pow")

    window = list(state.window) + [new_header]
    by_digest = dict(by_digest)
    by_digest[digest] = new_header

    tip_height = max(h.height for h in window)
    tips = [h for h in window if h.height == tip_height]
    acc = state.accumulator
    finalized: list[BlockHeader] = []
    last_fin = state.last_finalized
    if len(tips) == 1:
        # walk the best branch back and finalize everything at depth >= k
        branch = {}
        cursor = tips[0]
        while cursor.height > last_fin.height:
            branch[cursor.height] = cursor
            cursor = by_digest.get(cursor.prev_hash)
            if cursor is None:
                break
        for height in range(last_fin.height + 1, tip_height - state.k + 1):
            header = branch.get(height)
            if header is None:
                break
            acc = mmr_append(acc, header_digest(header))
            finalized.append(header)
            last_fin = header
    if finalized:
        fin_digest = header_digest(last_fin)
        keep = {fin_digest: last_fin}
        changed = True
        while changed:
            changed = False
            for h in window:
                d = header_digest(h)
                if d not in keep and h.prev_hash in keep and h.height > last_fin.height:
                    keep[d] = h
                    changed = True
        window = [h for h in window if header_digest(h) in keep]
    new_state = VerifierState(tuple(window), acc, last_fin, state.k)
    return SyncResult(new_state, True, None, tuple(finalized))
