import binascii

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smoothmark import synth
from smoothmark.tokenspace import (Bridge, TokenSeq, VocabError, Vocabulary, bridge_encode, compose,
                                   decode_llm, encode_llm, encode_reference, inverse_permutation,
                                   is_permutation, load_vocab, save_vocab, split_embedding)

WORDS = synth.word_list()[0]


def test_load_small_vocab(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("a\t1 2 3 4\nb\t0 0 0 0\nc\t-1 0.5 2 1e-3\n", encoding="utf-8")
    v = load_vocab(p)
    assert (v.size, v.dim) == (3, 4)
    assert v.id_of("c") == 2
    np.testing.assert_array_equal(v.embed([0]), [[1, 2, 3, 4]])


def test_empty_vocab_rejected(tmp_path):
    p = tmp_path / "v.txt"
    p.write_text("", encoding="utf-8")
    with pytest.raises(VocabError, match="empty vocabulary"):
        load_vocab(p)


@pytest.mark.parametrize("body,line", [("a\t1 2\nb\t1\n", 2), ("a\t1 2\nb 1 2\n", 2), ("a\t1 x\n", 1)])
def test_malformed_line_reports_line_number(tmp_path, body, line):
    p = tmp_path / "v.txt"
    p.write_text(body, encoding="utf-8")
    with pytest.raises(VocabError, match=f":{line}:"):
        load_vocab(p)


def test_duplicate_surface_rejected():
    with pytest.raises(VocabError, match="duplicate"):
        Vocabulary("x", ["a", "a"], np.zeros((2, 3)))


def test_bundled_reference_vocab(ref_vocab):
    assert (ref_vocab.size, ref_vocab.dim) == (2000, 16)
    lines = synth.data_path("ref_vocab.txt").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2000
    assert [ref_vocab.id_of(l.split("\t")[0]) for l in lines] == list(range(2000))


def test_save_load_round_trip(tmp_path, ref_vocab):
    save_vocab(ref_vocab, tmp_path / "r.txt")
    again = load_vocab(tmp_path / "r.txt", namespace="ref")
    assert again.checksum() == ref_vocab.checksum()


def test_encode_reference_lookup(ref_vocab):
    ids = encode_reference("The cat said", ref_vocab).ids
    assert ids == tuple(ref_vocab.id_of(w) for w in ("the", "cat", "said"))
    assert encode_reference("", ref_vocab).ids == ()


def test_oov_bucket_matches_documented_hash(ref_vocab):
    # independent crc32 implementation; frozen value 2000 + 50
    expect = 2000 + binascii.crc32(b"zxqv") % 64
    assert expect == 2050
    assert encode_reference("zxqv", ref_vocab).ids == (expect,)


@given(st.text(max_size=80))
@settings(max_examples=200, deadline=None)
def test_encode_reference_total_and_deterministic(text):
    v = synth.reference_vocab()
    a = encode_reference(text, v)
    assert a == encode_reference(text, v)
    assert all(0 <= i < v.n_ids for i in a.ids)


def test_embedding_lookup_bitwise_stable(ref_vocab):
    a = ref_vocab.embed([5, 5, 2040])
    b = ref_vocab.embed([5, 2040])
    assert a[0].tobytes() == a[1].tobytes() == b[0].tobytes()
    assert a[2].tobytes() == b[1].tobytes()


def test_llm_round_trip(llm_vocab):
    text = "the unhappiness of it, said the man."
    assert decode_llm(encode_llm(text, llm_vocab), llm_vocab) == text


def test_bridge_whole_words_match_reference(llm_vocab, ref_vocab):
    text = "the cat said that the dog was good"
    out = bridge_encode(encode_llm(text, llm_vocab), llm_vocab, ref_vocab, 30)
    assert out.ids == encode_reference(text, ref_vocab).ids
    assert bridge_encode(TokenSeq((), "llm"), llm_vocab, ref_vocab).ids == ()


def test_bridge_subword_maps_to_whole_word(llm_vocab, ref_vocab):
    seq = encode_llm("the unhappiness", llm_vocab)
    assert [llm_vocab.surface(i) for i in seq.ids] == ["▁the", "▁un", "happiness"]
    out = bridge_encode(seq, llm_vocab, ref_vocab, 30).ids
    assert out[2] == ref_vocab.id_of("unhappiness")
    assert out[0] == ref_vocab.id_of("the")


@given(st.lists(st.sampled_from(WORDS[:300] + (",", ".", "unhappiness")), max_size=40),
       st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_bridge_length_and_fast_path(words, n):
    llm, ref = synth.llm_vocab(), synth.reference_vocab()
    seq = encode_llm(" ".join(words), llm)
    slow = bridge_encode(seq, llm, ref, n)
    assert len(slow) == len(seq)
    assert tuple(Bridge(llm, ref, n).encode(list(seq.ids))) == slow.ids


def test_split_embedding_identity(ref_vocab):
    W, U = split_embedding(TokenSeq((), "ref"), ref_vocab)
    assert W.shape == (0, 16) and U.size == 0
    seq = TokenSeq((3, 1, 4), "ref")
    W, U = split_embedding(seq, ref_vocab)
    assert U.tolist() == [0, 1, 2]
    np.testing.assert_array_equal(compose(W, U), ref_vocab.embed([3, 1, 4]))


def test_compose_examples():
    W = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(compose(W, np.array([0, 1])), W)
    np.testing.assert_array_equal(compose(W, np.array([1, 0])), W[::-1])
    with pytest.raises(ValueError):
        compose(W, np.array([0]))
    with pytest.raises(ValueError):
        compose(W, np.array([0, 0]))


@given(st.integers(0, 30), st.integers(0, 2**32 - 1))
def test_compose_inverse_recovers(n, seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(n, 3))
    U = rng.permutation(n)
    E = compose(W, U)
    # brute-force inverse: row i sits at U[i]
    back = np.array([E[U[i]] for i in range(n)]).reshape(n, 3)
    np.testing.assert_array_equal(back, W)
    np.testing.assert_array_equal(E[U], W)
    assert is_permutation(inverse_permutation(U))
    np.testing.assert_array_equal(compose(E, inverse_permutation(U)), W)


def test_validate_rejects_foreign_ids(ref_vocab):
    with pytest.raises(VocabError):
        ref_vocab.validate(TokenSeq((ref_vocab.n_ids,), "ref"))
