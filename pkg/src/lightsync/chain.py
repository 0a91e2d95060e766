"""Block headers, PoW validity, chain linkage, and transaction Merkle trees.

Headers use a fixed 152-byte big-endian layout and double SHA-256 ids.
Upgraded miners commit to their coinbase data (flag, accumulator root,
vote buffer) through the ``coinbase_commitment`` header field.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

ZERO32 = b"\x00" * 32
MAX_TARGET = (1 << 256) - 1
HEADER_BYTES = 152

UPGRADED_FLAG = 0x4C
NON_UPGRADED_FLAG = 0x00


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256d(data) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    tx_root: bytes
    target: int
    nonce: int
    timestamp: int
    coinbase_commitment: bytes = ZERO32

    def __post_init__(self):
        # Field-domain checks only; PoW and linkage validity are separate
        # checks so that hostile or mutated headers still parse.
        if not (0 <= self.target <= MAX_TARGET):
            raise ValueError("target must fit in 256 bits")
        for name in ("prev_hash", "tx_root", "coinbase_commitment"):
            if len(getattr(self, name)) != 32:
                raise ValueError(f"{name} must be 32 bytes")

    def with_nonce(self, nonce: int) -> "BlockHeader":
        return replace(self, nonce=nonce)


Chain = Sequence[BlockHeader]


def serialize_header(header: BlockHeader) -> bytes:
    """Fixed-width encoding: height(8) prev(32) tx_root(32) target(32) nonce(8) time(8) commitment(32)."""
    return (
        struct.pack(">Q", header.height)
        + header.prev_hash
        + header.tx_root
        + header.target.to_bytes(32, "big")
        + struct.pack(">QQ", header.nonce, header.timestamp)
        + header.coinbase_commitment
    )


def parse_header(data: bytes) -> BlockHeader:
    if len(data) != HEADER_BYTES:
        raise ValueError(f"header must be {HEADER_BYTES} bytes, got {len(data)}")
    height = struct.unpack_from(">Q", data, 0)[0]
    prev_hash = data[8:40]
    tx_root = data[40:72]
    target = int.from_bytes(data[72:104], "big")
    nonce, timestamp = struct.unpack_from(">QQ", data, 104)
    commitment = data[120:152]
    return BlockHeader(height, prev_hash, tx_root, target, nonce, timestamp, commitment)


def header_digest(header: BlockHeader) -> bytes:
    return sha256d(serialize_header(header))


def meets_target(header: BlockHeader) -> bool:
    """PoW check: digest read as a big-endian integer is strictly below the target."""
    return int.from_bytes(header_digest(header), "big") < header.target


@dataclass(frozen=True)
class ChainValidation:
    ok: bool
    height: int | None = None
    failure: str | None = None  # "linkage" or "pow"

    def __bool__(self) -> bool:
        return self.ok


def validate_linkage(chain: Chain) -> ChainValidation:
    """Check pairwise prev-hash linkage, consecutive heights, and PoW of every header.

    Reports the first offending height and whether the failure is linkage or PoW.
    """
    if not chain:
        raise ValueError("chain must be non-empty")
    prev = None
    for header in chain:
        if prev is not None:
            if header.height != prev.height + 1 or header.prev_hash != header_digest(prev):
                return ChainValidation(False, header.height, "linkage")
        if not meets_target(header):
            return ChainValidation(False, header.height, "pow")
        prev = header
    return ChainValidation(True)


# --- transaction Merkle trees (duplicate-last padding on odd levels) ---


@dataclass(frozen=True)
class TxMerkleProof:
    leaf: bytes
    index: int
    siblings: tuple[bytes, ...]


def _merkle_levels(txs: Sequence[bytes]) -> list[list[bytes]]:
    level = [sha256(tx) for tx in txs]
    levels = [level]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def tx_merkle_root(txs: Sequence[bytes]) -> bytes:
    if not txs:
        raise ValueError("transaction list must be non-empty")
    return _merkle_levels(txs)[-1][0]


def tx_merkle_prove(txs: Sequence[bytes], index: int) -> TxMerkleProof:
    if not 0 <= index < len(txs):
        raise IndexError(f"tx index {index} out of range for {len(txs)} txs")
    levels = _merkle_levels(txs)
    siblings = []
    i = index
    for level in levels[:-1]:
        sib = i ^ 1
        if sib >= len(level):
            sib = i  # odd node pairs with its own duplicate
        siblings.append(level[sib])
        i >>= 1
    return TxMerkleProof(bytes(txs[index]), index, tuple(siblings))


def tx_merkle_verify(root: bytes, proof: TxMerkleProof) -> bool:
    if proof.index < 0 or proof.index >> len(proof.siblings):
        return False  # index must address a leaf within a tree of this depth
    node = sha256(proof.leaf)
    i = proof.index
    for sib in proof.siblings:
        node = sha256(sib + node) if i & 1 else sha256(node + sib)
        i >>= 1
    return node == root


# --- coinbase data (velvet commitment carrier) ---


@dataclass(frozen=True)
class CoinbaseData:
    """Coinbase payload: upgrade flag, accumulator root over all previous headers,
    and an alpha-bit vote buffer whose last bit refers to the most recent
    preceding upgraded block."""

    upgraded_flag: int
    mmr_root: bytes
    vote_buffer: tuple[int, ...]

    def __post_init__(self):
        if len(self.mmr_root) != 32:
            raise ValueError("mmr_root must be 32 bytes")
        if any(bit not in (0, 1) for bit in self.vote_buffer):
            raise ValueError("vote buffer entries must be bits")

    @property
    def is_upgraded(self) -> bool:
        return self.upgraded_flag == UPGRADED_FLAG


def non_upgraded_coinbase(alpha: int) -> CoinbaseData:
    return CoinbaseData(NON_UPGRADED_FLAG, ZERO32, (0,) * alpha)


def pack_bits(bits: Sequence[int]) -> bytes:
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            out[i // 8] |= 0x80 >> (i % 8)
    return bytes(out)


def unpack_bits(data: bytes, count: int) -> tuple[int, ...]:
    return tuple((data[i // 8] >> (7 - i % 8)) & 1 for i in range(count))


def serialize_coinbase(cb: CoinbaseData) -> bytes:
    return bytes([cb.upgraded_flag]) + cb.mmr_root + pack_bits(cb.vote_buffer)


def parse_coinbase(data: bytes, alpha: int) -> CoinbaseData:
    want = 1 + 32 + (alpha + 7) // 8
    if len(data) != want:
        raise ValueError(f"coinbase blob must be {want} bytes for alpha={alpha}")
    return CoinbaseData(data[0], data[1:33], unpack_bits(data[33:], alpha))


def coinbase_commitment(cb: CoinbaseData | None) -> bytes:
    return ZERO32 if cb is None else sha256(serialize_coinbase(cb))


@dataclass(frozen=True)
class Block:
    """Full-node view of one block: header plus body data the header commits to."""

    header: BlockHeader
    txs: tuple[bytes, ...]
    coinbase: CoinbaseData | None = None
    mined_at: float = 0.0


# --- JSON debug forms (hex digests) for fixtures and CLI output ---


def header_to_json(header: BlockHeader) -> dict:
    return {
        "height": header.height,
        "prev_hash": header.prev_hash.hex(),
        "tx_root": header.tx_root.hex(),
        "target": hex(header.target),
        "nonce": header.nonce,
        "timestamp": header.timestamp,
        "coinbase_commitment": header.coinbase_commitment.hex(),
    }


def header_from_json(obj: dict) -> BlockHeader:
    return BlockHeader(
        height=obj["height"],
        prev_hash=bytes.fromhex(obj["prev_hash"]),
        tx_root=bytes.fromhex(obj["tx_root"]),
        target=int(obj["target"], 16),
        nonce=obj["nonce"],
        timestamp=obj["timestamp"],
        coinbase_commitment=bytes.fromhex(obj["coinbase_commitment"]),
    )


def chain_to_json(chain: Iterable[BlockHeader]) -> list[dict]:
    return [header_to_json(h) for h in chain]


def chain_from_json(objs: Iterable[dict]) -> tuple[BlockHeader, ...]:
    return tuple(header_from_json(o) for o in objs)
