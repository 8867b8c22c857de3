"""Offline fixture builders: vocabularies and a synthetic "human" text source.

The human source is a seeded word-level Markov process over the bundled word
list: each next word is drawn from a mixture of the Zipf-like unigram
frequencies and a sparse per-word successor table.  It stands in for the
human-written corpora used at full scale.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .rng import make_rng
from .tokenspace import UNK, WORD_START, Vocabulary

PUNCTUATION = [".", ",", "?", "!", ";", ":", "'", "-", "*"]
MARKER = "*"
# per-entry std of the bundled reference table; 16-dim rows then have mean
# norm ~2.4 and mean pairwise distance ~3.4, close to 300-d GloVe statistics
FIXTURE_SCALE = 0.6


def data_path(name: str) -> Path:
    return Path(str(resources.files("smoothmark") / "data" / name))


@lru_cache(maxsize=1)
def word_list() -> tuple[tuple[str, ...], np.ndarray]:
    words, freqs = [], []
    for line in data_path("wordlist.tsv").read_text(encoding="utf-8").splitlines():
        w, f = line.split("\t")
        words.append(w)
        freqs.append(float(f))
    return tuple(words), np.array(freqs)


def build_reference_vocab(words=None, dim: int = 16, scale: float = FIXTURE_SCALE, seed: int = 0,
                          namespace: str = "ref") -> Vocabulary:
    """Word-level vocabulary: the word list plus punctuation, seeded Gaussian rows."""
    if words is None:
        words = list(word_list()[0]) + PUNCTUATION
    vectors = make_rng(seed, 0x5EF).normal(0.0, scale, (len(words), dim))
    return Vocabulary(namespace, list(words), vectors)


def build_llm_vocab(words=None, n_whole: int = 1700, dim: int = 16, seed: int = 0,
                    namespace: str = "llm") -> Vocabulary:
    """Sub-word vocabulary: frequent words whole, rare words as two pieces.

    A rare word ``w`` becomes ``▁w[:k]`` + ``w[k:]`` with ``k = len(w) // 2``
    (``unhappiness`` is special-cased to ``▁un`` + ``happiness``).  Single
    letters, digits and punctuation keep every text encodable.
    """
    if words is None:
        words = list(word_list()[0])
    pieces: dict[str, None] = {UNK: None}
    for w in words[:n_whole]:
        pieces[WORD_START + w] = None
    for w in words[n_whole:]:
        k = 2 if w == "unhappiness" else max(1, len(w) // 2)
        pieces[WORD_START + w[:k]] = None
        pieces[w[k:]] = None
    for ch in "abcdefghijklmnopqrstuvwxyz0123456789":
        pieces[WORD_START + ch] = None
        pieces[ch] = None
    for p in PUNCTUATION:
        pieces[p] = None
        pieces[WORD_START + p] = None
    surfaces = list(pieces)
    vectors = make_rng(seed, 0x11A).normal(0.0, 1.0, (len(surfaces), dim))
    return Vocabulary(namespace, surfaces, vectors, oov_buckets=0)


@lru_cache(maxsize=1)
def reference_vocab() -> Vocabulary:
    """The bundled reference vocabulary (``data/ref_vocab.txt``)."""
    from .tokenspace import load_vocab
    return load_vocab(data_path("ref_vocab.txt"), "ref")


@lru_cache(maxsize=1)
def llm_vocab() -> Vocabulary:
    """The bundled sub-word vocabulary (``data/llm_vocab.txt``)."""
    from .tokenspace import load_vocab
    return load_vocab(data_path("llm_vocab.txt"), "llm", oov_buckets=0)


def human_corpus() -> list[str]:
    """Texts of the bundled language-model training corpus."""
    import json
    with data_path("human_corpus.jsonl").open(encoding="utf-8") as fh:
        return [json.loads(line)["text"] for line in fh if line.strip()]


class HumanSource:
    """Seeded sentence generator over the bundled word list."""

    def __init__(self, seed: int = 0, n_successors: int = 6, mix: float = 0.3,
                 oov_rate: float = 0.003):
        words, freqs = word_list()
        self.words = words
        self.p_uni = freqs / freqs.sum()
        self.cdf_uni = np.cumsum(self.p_uni)
        rng = make_rng(seed, 0xB16)
        n = len(words)
        succ = np.minimum(np.searchsorted(self.cdf_uni, rng.random((n, n_successors))), n - 1)
        w = rng.dirichlet(np.full(n_successors, 0.5), size=n)
        self.succ = succ
        self.succ_cdf = np.cumsum(w, axis=1)
        self.mix = mix
        self.oov_rate = oov_rate

    def _pick(self, cdf, u) -> int:
        return min(int(np.searchsorted(cdf, u)), len(cdf) - 1)

    def sentence(self, rng: np.random.Generator) -> list[str]:
        n = int(rng.integers(8, 21))
        out: list[str] = []
        prev = None
        for _ in range(n):
            if rng.random() < self.oov_rate:
                word = "".join(rng.choice(list("bcdfghklmnprstvz"), size=int(rng.integers(5, 9))))
                out.append(word)
                prev = None
                continue
            if prev is not None and rng.random() < self.mix:
                j = self.succ[prev][self._pick(self.succ_cdf[prev], rng.random())]
            else:
                j = self._pick(self.cdf_uni, rng.random())
            out.append(self.words[j])
            prev = j
            if rng.random() < 0.05:
                out.append(",")
                prev = None
        u = rng.random()
        out.append("." if u < 0.9 else ("?" if u < 0.95 else "!"))
        return out

    def document(self, n_words: int, rng: np.random.Generator) -> str:
        toks: list[str] = []
        while len(toks) < n_words:
            toks.extend(self.sentence(rng))
        return detokenize(toks)

    def documents(self, n_docs: int, n_words: int, seed: int) -> list[str]:
        return [self.document(n_words, make_rng(seed, 0xD0C, i)) for i in range(n_docs)]


def detokenize(tokens: list[str]) -> str:
    text = ""
    for t in tokens:
        if t in PUNCTUATION and t != MARKER and text:
            text += t
        else:
            text += (" " if text else "") + t
    return text
