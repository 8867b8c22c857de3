from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from smoothmark import attacks, synth
from smoothmark.attacks import AttackSpec, apply_edit, copy_paste, permutation_displacement
from smoothmark.rng import make_rng
from smoothmark.tokenspace import TokenSeq, is_permutation

ids_strategy = st.lists(st.integers(0, 2063), min_size=0, max_size=120)


def test_spec_validation_and_parse():
    with pytest.raises(ValueError):
        AttackSpec("delete", 1.5)
    with pytest.raises(ValueError):
        AttackSpec("paraphrase", 0.1)
    assert AttackSpec.parse("swap:0.25", seed=3) == AttackSpec("swap", 0.25, seed=3)
    cp = AttackSpec.parse("copy_paste:150:600")
    assert (cp.kind, cp.n_wm, cp.human_len) == ("copy_paste", 150, 600)


@pytest.mark.parametrize("kind", attacks.EDIT_KINDS)
def test_fraction_zero_is_identity(kind, ref_vocab):
    seq = TokenSeq(tuple(range(50)), "ref")
    assert apply_edit(seq, AttackSpec(kind, 0.0), ref_vocab, make_rng(0)) == seq


def test_delete_half_of_200():
    seq = TokenSeq(tuple(range(200)), "ref")
    assert len(apply_edit(seq, AttackSpec("delete", 0.5), rng=make_rng(0))) == 100


def test_substitute_uses_exhaustive_nearest_neighbor(ref_vocab):
    seq = TokenSeq((0, 96, 1666, 2040, 7), "ref")
    out = apply_edit(seq, AttackSpec("substitute", 1.0), ref_vocab, make_rng(1))
    for a, b in zip(seq.ids, out.ids):
        assert b == oracles.nearest_neighbor(ref_vocab.table, ref_vocab.size, a)
        assert b != a and b < ref_vocab.size


@given(ids_strategy, st.floats(0, 1), st.integers(0, 2**31))
@settings(max_examples=80, deadline=None)
def test_edit_invariants(ids, f, seed):
    vocab = synth.reference_vocab()
    seq = TokenSeq(tuple(ids), "ref")
    m = int(np.floor(f * len(ids)))
    sw = apply_edit(seq, AttackSpec("swap", f), vocab, make_rng(seed))
    assert Counter(sw.ids) == Counter(ids)
    de = apply_edit(seq, AttackSpec("delete", f), vocab, make_rng(seed))
    assert len(de) == len(ids) - m
    it = iter(ids)
    assert all(t in it for t in de.ids)  # subsequence
    su = apply_edit(seq, AttackSpec("substitute", f), vocab, make_rng(seed))
    assert len(su) == len(ids)
    assert sum(a != b for a, b in zip(su.ids, ids)) <= m
    assert apply_edit(seq, AttackSpec("swap", f), vocab, make_rng(seed)) == sw


def test_copy_paste_lengths_and_block():
    wm = TokenSeq(tuple(range(10_000, 10_200)), "ref")
    human = TokenSeq(tuple(range(700)), "ref")
    out, at = copy_paste(wm, human, 150, 600, make_rng(2))
    assert len(out) == 750
    block = out.ids[at: at + 150]
    assert all(b - a == 1 for a, b in zip(block, block[1:]))  # contiguous slice of wm
    assert set(block) <= set(wm.ids)
    assert [t for t in out.ids if t < 10_000] == list(range(600))
    pure, _ = copy_paste(wm, human, 200, 0, make_rng(2))
    assert pure == wm
    with pytest.raises(ValueError):
        copy_paste(wm, human, 201, 600, make_rng(2))
    with pytest.raises(ValueError):
        copy_paste(wm, human, 150, 701, make_rng(2))


def test_permutation_displacement_examples():
    U = np.arange(4)
    assert permutation_displacement(U, U) == 0
    assert permutation_displacement(U, np.array([1, 0, 2, 3])) == 2
    assert permutation_displacement(U, U[::-1]) == 8
    with pytest.raises(ValueError):
        permutation_displacement(U, np.arange(5))
    with pytest.raises(ValueError):
        permutation_displacement(U, np.array([0, 0, 1, 2]))


def test_gaussian_direction_norm():
    d = attacks.gaussian_direction((30, 16), 7.5, make_rng(0))
    assert np.linalg.norm(d) == pytest.approx(7.5, rel=1e-12)


@given(st.integers(2, 80), st.integers(1, 12), st.floats(0, 30), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_bounded_group_shuffle(n, lam, budget, seed):
    U = np.random.default_rng(seed).permutation(n)
    V = attacks.bounded_group_shuffle(U, lam, budget, make_rng(seed))
    assert is_permutation(V)
    assert (V // lam == U // lam).all()
    disp = permutation_displacement(U, V)
    assert disp == 0 or disp < budget
