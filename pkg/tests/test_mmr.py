import hashlib
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightsync.mmr import (
    EMPTY,
    MmrAccumulator,
    MmrInclusionProof,
    MmrNodeStore,
    bag_peaks,
    mmr_append,
    mmr_extend_root,
    mmr_remove_last,
    mmr_root,
    mmr_verify_inclusion,
    mountain_heights,
)


def sha(b):
    return hashlib.sha256(b).digest()


def leaves_for(n):
    return [b"leaf-%03d" % i + bytes(24) for i in range(n)]


# Independent oracle: build each mountain as a full binary tree by recursion,
# bag right to left, bind the count. Shares no code with the accumulator.
def naive_root(leaves):
    def full_tree(ls):
        if len(ls) == 1:
            return sha(ls[0])
        half = len(ls) // 2
        return sha(full_tree(ls[:half]) + full_tree(ls[half:]))

    peaks = []
    i = 0
    n = len(leaves)
    for h in range(n.bit_length() - 1, -1, -1):
        if n >> h & 1:
            peaks.append(full_tree(leaves[i : i + (1 << h)]))
            i += 1 << h
    bag = peaks[-1]
    for p in reversed(peaks[:-1]):
        bag = sha(p + bag)
    return sha(bag + struct.pack(">Q", n))


def build(leaves):
    acc = EMPTY
    for leaf in leaves:
        acc = mmr_append(acc, leaf)
    return acc


def build_store(leaves):
    store = MmrNodeStore()
    for leaf in leaves:
        store.append(leaf)
    return store


class TestAppendAndRoot:
    def test_first_leaf(self):
        acc = mmr_append(EMPTY, b"L" * 32)
        assert acc.leaf_count == 1
        assert acc.peaks == (sha(b"L" * 32),)

    def test_two_leaves_merge(self):
        ls = leaves_for(2)
        acc = build(ls)
        assert acc.peaks == (sha(sha(ls[0]) + sha(ls[1])),)

    def test_seven_leaves_three_peaks(self):
        acc = build(leaves_for(7))
        assert len(acc.peaks) == 3
        assert mountain_heights(7) == [2, 1, 0]
        assert mmr_root(acc) == naive_root(leaves_for(7))

    def test_single_leaf_root_binds_count(self):
        ls = leaves_for(1)
        acc = build(ls)
        assert mmr_root(acc) == sha(sha(ls[0]) + struct.pack(">Q", 1))

    def test_three_leaf_root_hand_built(self):
        ls = leaves_for(3)
        high = sha(sha(ls[0]) + sha(ls[1]))
        low = sha(ls[2])
        assert mmr_root(build(ls)) == sha(sha(high + low) + struct.pack(">Q", 3))

    def test_empty_root_rejected(self):
        with pytest.raises(ValueError):
            mmr_root(EMPTY)

    def test_matches_naive_for_all_small_sizes(self):
        for n in range(1, 65):
            ls = leaves_for(n)
            assert mmr_root(build(ls)) == naive_root(ls), n

    def test_store_and_accumulator_agree(self):
        ls = leaves_for(37)
        assert build_store(ls).root() == mmr_root(build(ls))

    @given(st.integers(1, 64), st.integers(0, 63), st.binary(min_size=32, max_size=32))
    @settings(max_examples=40)
    def test_any_leaf_change_changes_root(self, n, idx, other):
        ls = leaves_for(n)
        idx %= n
        if ls[idx] == other:
            return
        changed = ls[:idx] + [other] + ls[idx + 1 :]
        assert mmr_root(build(ls)) != mmr_root(build(changed))
        assert mmr_root(build(ls)) == mmr_root(build(list(ls)))


class TestRemoveLast:
    def test_single_append_then_remove(self):
        store = build_store(leaves_for(1))
        store.remove_last()
        assert store.leaf_count == 0

    def test_eight_then_remove_equals_seven(self):
        store = build_store(leaves_for(8))
        acc = mmr_remove_last(store)
        assert acc == build(leaves_for(7))

    def test_remove_on_empty_rejected(self):
        with pytest.raises(ValueError):
            MmrNodeStore().remove_last()

    def test_inverse_over_random_prefixes(self, rng):
        raw = [rng.bytes(32) for _ in range(64)]
        store = MmrNodeStore()
        snapshots = [store.accumulator()]
        for leaf in raw:
            store.append(leaf)
            snapshots.append(store.accumulator())
        for i in range(64, 0, -1):
            store.remove_last()
            assert store.accumulator() == snapshots[i - 1]


class TestInclusionProofs:
    def test_exhaustive_count_eight(self):
        ls = leaves_for(8)
        store = build_store(ls)
        root = store.root()
        for i in range(8):
            proof = store.prove_inclusion(i)
            assert mmr_verify_inclusion(root, ls[i], proof)

    def test_proofs_against_historic_counts(self):
        ls = leaves_for(20)
        store = build_store(ls)
        for count in (5, 11, 16, 20):
            root = store.root(count)
            for i in range(count):
                assert mmr_verify_inclusion(root, ls[i], store.prove_inclusion(i, count))

    def test_path_mutation_fails(self):
        ls = leaves_for(8)
        store = build_store(ls)
        root = store.root()
        proof = store.prove_inclusion(3)
        for j in range(len(proof.path)):
            bad = list(proof.path)
            bad[j] = bytes([bad[j][0] ^ 1]) + bad[j][1:]
            mutated = MmrInclusionProof(proof.leaf_index, proof.leaf_count_at_proof, tuple(bad), proof.peak_context)
            assert not mmr_verify_inclusion(root, ls[3], mutated)

    def test_wrong_leaf_fails(self):
        ls = leaves_for(8)
        store = build_store(ls)
        assert not mmr_verify_inclusion(store.root(), ls[4], store.prove_inclusion(3))

    def test_single_leaf_empty_proof(self):
        store = build_store(leaves_for(1))
        proof = store.prove_inclusion(0)
        assert proof.path == () and proof.peak_context == ()
        assert mmr_verify_inclusion(store.root(), leaves_for(1)[0], proof)

    def test_out_of_range(self):
        store = build_store(leaves_for(4))
        with pytest.raises(IndexError):
            store.prove_inclusion(4)

    def test_path_length_bound_sampled(self, rng):
        for n in [int(x) for x in rng.integers(1, 1 << 16, size=8)]:
            bound = (n - 1).bit_length()
            store = build_store([b"%d" % i + bytes(26) for i in range(n)])
            for i in [int(v) for v in rng.integers(0, n, size=4)]:
                assert len(store.prove_inclusion(i).path) <= bound

    def test_binary_and_json_round_trip(self):
        store = build_store(leaves_for(13))
        proof = store.prove_inclusion(9)
        assert MmrInclusionProof.from_bytes(proof.to_bytes()) == proof
        assert MmrInclusionProof.from_json(proof.to_json()) == proof


class TestExtendRoot:
    def test_identity_extension(self):
        acc = build(leaves_for(5))
        assert mmr_extend_root(acc.peaks, 5, []) == mmr_root(acc)

    def test_four_plus_three_equals_seven(self):
        ls = leaves_for(7)
        acc4 = build(ls[:4])
        assert mmr_extend_root(acc4.peaks, 4, ls[4:]) == mmr_root(build(ls))

    def test_popcount_mismatch_rejected(self):
        acc = build(leaves_for(4))
        with pytest.raises(ValueError):
            mmr_extend_root(acc.peaks, 5, [])

    def test_every_split_matches_scratch_build(self):
        ls = leaves_for(24)
        full = mmr_root(build(ls))
        for split in range(1, 24):
            acc = build(ls[:split])
            assert mmr_extend_root(acc.peaks, split, ls[split:]) == full

    @given(st.integers(1, 64), st.data())
    @settings(max_examples=30)
    def test_staged_builds_agree(self, n, data):
        ls = leaves_for(n)
        cut = data.draw(st.integers(0, n))
        acc = build(ls[:cut]) if cut else EMPTY
        if cut == 0:
            assert mmr_root(build(ls)) == naive_root(ls)
        else:
            assert mmr_extend_root(acc.peaks, cut, ls[cut:]) == mmr_root(build(ls))
