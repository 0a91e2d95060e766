"""Merkle Mountain Range accumulator over 32-byte leaves.

The verifier-side value is just ``(leaf_count, peaks)``: constant space in
the chain length. Provers keep a full interior-node store so they can build
inclusion proofs, expose historical peak sets, and undo the latest append.

Conventions: leaf node = SHA-256(leaf bytes), parent = SHA-256(left || right).
The root folds the peaks right to left and then binds the leaf count:
``root = SHA-256(fold || count_be64)``, so accumulators of different sizes
cannot share a root.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

from .chain import sha256


@dataclass(frozen=True)
class MmrAccumulator:
    leaf_count: int
    peaks: tuple[bytes, ...]

    def __post_init__(self):
        if self.leaf_count < 0:
            raise ValueError("leaf_count must be nonnegative")
        if self.leaf_count.bit_count() != len(self.peaks):
            raise ValueError(
                f"popcount({self.leaf_count}) != {len(self.peaks)} peaks"
            )


EMPTY = MmrAccumulator(0, ())


def mountain_heights(leaf_count: int) -> list[int]:
    """Peak heights left to right: one mountain per set bit, highest first."""
    return [h for h in range(leaf_count.bit_length() - 1, -1, -1) if leaf_count >> h & 1]


def mmr_append(acc: MmrAccumulator, leaf: bytes) -> MmrAccumulator:
    """Append one leaf, merging trailing equal-height peaks pairwise."""
    node = sha256(leaf)
    peaks = list(acc.peaks)
    n = acc.leaf_count
    while n & 1:
        node = sha256(peaks.pop() + node)
        n >>= 1
    peaks.append(node)
    return MmrAccumulator(acc.leaf_count + 1, tuple(peaks))


def bag_peaks(peaks: Sequence[bytes]) -> bytes:
    """Right-to-left fold: H(p0 || H(p1 || ... H(p_{m-2} || p_{m-1}) ...))."""
    if not peaks:
        raise ValueError("cannot bag an empty peak list")
    acc = peaks[-1]
    for peak in reversed(peaks[:-1]):
        acc = sha256(peak + acc)
    return acc


def mmr_root(acc: MmrAccumulator) -> bytes:
    if acc.leaf_count == 0:
        raise ValueError("empty accumulator has no root")
    return sha256(bag_peaks(acc.peaks) + struct.pack(">Q", acc.leaf_count))


def mmr_extend_root(
    peaks_at_v: Sequence[bytes], leaf_count_at_v: int, new_leaves: Sequence[bytes]
) -> bytes:
    """Root after appending ``new_leaves`` to the accumulator ``(leaf_count_at_v, peaks_at_v)``.

    Equals a from-scratch build over the full leaf sequence; the caller is
    responsible for having checked that the given peaks bag to a trusted root.
    """
    acc = MmrAccumulator(leaf_count_at_v, tuple(peaks_at_v))
    for leaf in new_leaves:
        acc = mmr_append(acc, leaf)
    return mmr_root(acc)


@dataclass(frozen=True)
class MmrInclusionProof:
    leaf_index: int
    leaf_count_at_proof: int
    path: tuple[bytes, ...]  # sibling hashes inside the leaf's mountain, bottom-up
    peak_context: tuple[bytes, ...]  # the other peaks, in bagging order

    def to_bytes(self) -> bytes:
        out = struct.pack(">QQQ", self.leaf_index, self.leaf_count_at_proof, len(self.path))
        out += b"".join(self.path)
        out += struct.pack(">Q", len(self.peak_context)) + b"".join(self.peak_context)
        return out

    @classmethod
    def from_bytes(cls, data: bytes) -> "MmrInclusionProof":
        leaf_index, leaf_count, n_path = struct.unpack_from(">QQQ", data, 0)
        off = 24
        path = tuple(data[off + 32 * i : off + 32 * (i + 1)] for i in range(n_path))
        off += 32 * n_path
        (n_ctx,) = struct.unpack_from(">Q", data, off)
        off += 8
        ctx = tuple(data[off + 32 * i : off + 32 * (i + 1)] for i in range(n_ctx))
        if off + 32 * n_ctx != len(data):
            raise ValueError("trailing bytes in inclusion proof")
        return cls(leaf_index, leaf_count, path, ctx)

    def to_json(self) -> dict:
        return {
            "leaf_index": self.leaf_index,
            "leaf_count": self.leaf_count_at_proof,
            "path": [d.hex() for d in self.path],
            "peak_context": [d.hex() for d in self.peak_context],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MmrInclusionProof":
        return cls(
            obj["leaf_index"],
            obj["leaf_count"],
            tuple(bytes.fromhex(d) for d in obj["path"]),
            tuple(bytes.fromhex(d) for d in obj["peak_context"]),
        )


def _locate_mountain(leaf_index: int, leaf_count: int) -> tuple[int, int, int]:
    """Return (mountain ordinal, height, first leaf index) for the given leaf."""
    start = 0
    for ordinal, height in enumerate(mountain_heights(leaf_count)):
        size = 1 << height
        if leaf_index < start + size:
            return ordinal, height, start
        start += size
    raise IndexError(f"leaf {leaf_index} out of range for {leaf_count} leaves")


def mmr_verify_inclusion(root: bytes, leaf: bytes, proof: MmrInclusionProof) -> bool:
    """Recompute the mountain path, re-bag with the peak context, compare to root."""
    if not 0 <= proof.leaf_index < proof.leaf_count_at_proof:
        return False
    ordinal, height, start = _locate_mountain(proof.leaf_index, proof.leaf_count_at_proof)
    if len(proof.path) != height:
        return False
    if len(proof.peak_context) != proof.leaf_count_at_proof.bit_count() - 1:
        return False
    local = proof.leaf_index - start
    node = sha256(leaf)
    for h, sibling in enumerate(proof.path):
        if local >> h & 1:
            node = sha256(sibling + node)
        else:
            node = sha256(node + sibling)
    peaks = list(proof.peak_context)
    peaks.insert(ordinal, node)
    expected = sha256(bag_peaks(peaks) + struct.pack(">Q", proof.leaf_count_at_proof))
    return expected == root


class MmrNodeStore:
    """Prover-side store of every interior node (O(n) space).

    ``levels[h][i]`` is the hash of the complete subtree over leaves
    ``[i * 2^h, (i+1) * 2^h)``. Levels only grow on append, so nodes for any
    historical leaf count stay available; ``remove_last`` truncates them.
    Single-writer append with any number of readers between appends.
    """

    def __init__(self) -> None:
        self._levels: list[list[bytes]] = []

    @property
    def leaf_count(self) -> int:
        return len(self._levels[0]) if self._levels else 0

    def append(self, leaf: bytes) -> None:
        if not self._levels:
            self._levels.append([])
        self._levels[0].append(sha256(leaf))
        h = 0
        while len(self._levels[h]) % 2 == 0:
            if h + 1 == len(self._levels):
                self._levels.append([])
            left, right = self._levels[h][-2], self._levels[h][-1]
            self._levels[h + 1].append(sha256(left + right))
            h += 1

    def remove_last(self) -> None:
        n = self.leaf_count
        if n == 0:
            raise ValueError("cannot remove from an empty accumulator")
        n -= 1
        for h in range(len(self._levels)):
            del self._levels[h][n >> h :]
        while self._levels and not self._levels[-1]:
            self._levels.pop()

    def peaks_at(self, leaf_count: int) -> tuple[bytes, ...]:
        if leaf_count > self.leaf_count:
            raise ValueError(f"store holds {self.leaf_count} leaves, asked for {leaf_count}")
        peaks = []
        start = 0
        for height in mountain_heights(leaf_count):
            peaks.append(self._levels[height][start >> height])
            start += 1 << height
        return tuple(peaks)

    def accumulator(self, leaf_count: int | None = None) -> MmrAccumulator:
        n = self.leaf_count if leaf_count is None else leaf_count
        return MmrAccumulator(n, self.peaks_at(n))

    def root(self, leaf_count: int | None = None) -> bytes:
        return mmr_root(self.accumulator(leaf_count))

    def prove_inclusion(self, leaf_index: int, leaf_count: int | None = None) -> MmrInclusionProof:
        n = self.leaf_count if leaf_count is None else leaf_count
        if n > self.leaf_count:
            raise ValueError(f"store holds {self.leaf_count} leaves, asked for {n}")
        ordinal, height, start = _locate_mountain(leaf_index, n)
        local = leaf_index - start
        path = []
        for h in range(height):
            g = (start >> h) + (local >> h)
            path.append(self._levels[h][g ^ 1])
        peaks = list(self.peaks_at(n))
        del peaks[ordinal]
        return MmrInclusionProof(leaf_index, n, tuple(path), tuple(peaks))

    def to_json(self) -> dict:
        return {"levels": [[d.hex() for d in level] for level in self._levels]}

    @classmethod
    def from_json(cls, obj: dict) -> "MmrNodeStore":
        store = cls()
        store._levels = [[bytes.fromhex(d) for d in level] for level in obj["levels"]]
        return store


def mmr_remove_last(store: MmrNodeStore) -> MmrAccumulator:
    """Undo the most recent append and return the resulting accumulator value."""
    store.remove_last()
    return store.accumulator()
