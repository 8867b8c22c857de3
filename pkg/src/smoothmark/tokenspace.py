"""Vocabularies, tokenizers and the embedding/permutation split of a text.

Two namespaces are in play.  The *llm* namespace is a sub-word vocabulary used
by the language model; word-initial pieces carry a leading ``▁`` marker.
The *reference* namespace is a word-level vocabulary with a fixed embedding
table shared by the watermark generator and detector.  ``bridge_encode`` maps
an llm sequence onto reference ids without changing its length.
"""

from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import make_rng

WORD_START = "▁"
UNK = "<unk>"
DEFAULT_OOV_BUCKETS = 64

_REF_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class VocabError(ValueError):
    """Raised for malformed or inconsistent vocabulary files."""


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    namespace: str

    def __post_init__(self):
        if not isinstance(self.ids, tuple):
            object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return TokenSeq(self.ids[item], self.namespace)
        return self.ids[item]


class Vocabulary:
    """Token surfaces with a dense id space and an embedding table.

    Ids ``0..size-1`` are the file entries.  Ids ``size..size+oov_buckets-1``
    are hashed out-of-vocabulary buckets whose embeddings are drawn from a
    seeded normal matched to the per-entry spread of the table.
    """

    def __init__(
        self,
        namespace: str,
        surfaces: Sequence[str],
        vectors: np.ndarray,
        oov_buckets: int = DEFAULT_OOV_BUCKETS,
        oov_seed: int = 0,
    ):
        vectors = np.asarray(vectors, dtype=np.float64)
        if len(surfaces) == 0:
            raise VocabError("empty vocabulary")
        if vectors.ndim != 2 or vectors.shape[0] != len(surfaces):
            raise VocabError("vectors must be a (|V|, d) matrix")
        if not np.all(np.isfinite(vectors)):
            raise VocabError("non-finite embedding entry")
        index: dict[str, int] = {}
        for i, s in enumerate(surfaces):
            if s in index:
                raise VocabError(f"duplicate surface {s!r} at ids {index[s]} and {i}")
            index[s] = i
        self.namespace = namespace
        self.surfaces = list(surfaces)
        self.oov_buckets = int(oov_buckets)
        self.oov_seed = int(oov_seed)
        self._index = index
        scale = float(vectors.std()) if vectors.size > 1 else 1.0
        oov = make_rng(self.oov_seed, 0x00F).normal(0.0, scale or 1.0, (self.oov_buckets, vectors.shape[1]))
        table = np.vstack([vectors, oov]) if self.oov_buckets else vectors.copy()
        table.flags.writeable = False
        self._table = table

    @property
    def size(self) -> int:
        return len(self.surfaces)

    @property
    def dim(self) -> int:
        return self._table.shape[1]

    @property
    def n_ids(self) -> int:
        return self.size + self.oov_buckets

    @property
    def table(self) -> np.ndarray:
        """Read-only ``(size + oov_buckets, dim)`` embedding table."""
        return self._table

    @property
    def vectors(self) -> np.ndarray:
        return self._table[: self.size]

    def __len__(self) -> int:
        return self.size

    def __contains__(self, surface: str) -> bool:
        return surface in self._index

    def id_of(self, surface: str) -> int | None:
        return self._index.get(surface)

    def surface(self, token_id: int) -> str:
        if token_id < self.size:
            return self.surfaces[token_id]
        return f"<oov{token_id - self.size}>"

    def oov_id(self, word: str) -> int:
        """Bucket id for an unknown word: ``size + crc32(utf8(word)) % oov_buckets``."""
        if not self.oov_buckets:
            raise VocabError(f"{word!r} not in vocabulary and no OOV buckets")
        return self.size + zlib.crc32(word.encode("utf-8")) % self.oov_buckets

    def embed(self, ids: Sequence[int] | np.ndarray) -> np.ndarray:
        return self._table[np.asarray(ids, dtype=np.int64)]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.namespace.encode())
        h.update(b"\0".join(s.encode("utf-8") for s in self.surfaces))
        h.update(np.ascontiguousarray(self._table).tobytes())
        return h.hexdigest()

    def validate(self, seq: TokenSeq) -> None:
        for i in seq.ids:
            if not 0 <= i < self.n_ids:
                raise VocabError(f"token id {i} outside namespace {self.namespace!r}")


def load_vocab(path: str | Path, namespace: str | None = None,
               oov_buckets: int = DEFAULT_OOV_BUCKETS, oov_seed: int = 0) -> Vocabulary:
    """Read a ``<surface>\\t<f0> <f1> ...`` table; ids are 0-based line numbers."""
    path = Path(path)
    surfaces: list[str] = []
    rows: list[list[float]] = []
    dim = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                raise VocabError(f"{path}:{lineno}: blank line")
            surface, sep, rest = line.partition("\t")
            if not sep or not surface:
                raise VocabError(f"{path}:{lineno}: expected '<surface>\\t<floats>'")
            try:
                vec = [float(x) for x in rest.split()]
            except ValueError as exc:
                raise VocabError(f"{path}:{lineno}: {exc}") from None
            if not vec:
                raise VocabError(f"{path}:{lineno}: no embedding values")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise VocabError(f"{path}:{lineno}: expected {dim} values, got {len(vec)}")
            surfaces.append(surface)
            rows.append(vec)
    if not surfaces:
        raise VocabError(f"{path}: empty vocabulary")
    return Vocabulary(namespace or path.stem, surfaces, np.array(rows), oov_buckets, oov_seed)


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s, vec in zip(vocab.surfaces, vocab.vectors):
            fh.write(s + "\t" + " ".join(repr(float(x)) for x in vec) + "\n")


# --- reference (word-level) tokenizer ---------------------------------------

def ref_words(text: str) -> list[str]:
    """Lowercase, then split on whitespace and at every punctuation character."""
    return _REF_TOKEN_RE.findall(text.lower())


def encode_reference(text: str, vocab: Vocabulary) -> TokenSeq:
    index = vocab._index
    ids = [index[w] if w in index else vocab.oov_id(w) for w in ref_words(text)]
    return TokenSeq(tuple(ids), vocab.namespace)


def _last_ref_id(text: str, vocab: Vocabulary) -> int:
    words = ref_words(text)
    if not words:
        # whitespace-only window has no natural encoding; fall back explicitly
        return vocab.oov_id("")
    w = words[-1]
    i = vocab.id_of(w)
    return vocab.oov_id(w) if i is None else i


# --- llm (sub-word) tokenizer -------------------------------------------------

class LLMTokenizer:
    """Greedy longest-match sub-word tokenizer over an llm vocabulary."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.unk_id = vocab.id_of(UNK)
        self.max_piece = max(len(s) for s in vocab.surfaces)
        self.is_word_start = np.array([s.startswith(WORD_START) for s in vocab.surfaces] + [False] * vocab.oov_buckets)

    def encode(self, text: str) -> TokenSeq:
        ids: list[int] = []
        for chunk in text.lower().split():
            piece = WORD_START + chunk
            pos = 0
            while pos < len(piece):
                for end in range(min(len(piece), pos + self.max_piece), pos, -1):
                    tid = self.vocab.id_of(piece[pos:end])
                    if tid is not None:
                        ids.append(tid)
                        pos = end
                        break
                else:
                    if self.unk_id is None:
                        raise VocabError(f"cannot encode {piece[pos]!r} and no {UNK} token")
                    ids.append(self.unk_id)
                    pos += 1
        return TokenSeq(tuple(ids), self.vocab.namespace)

    def surface(self, tid: int) -> str:
        s = self.vocab.surface(tid)
        return "�" if s == UNK else s

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.surface(i) for i in ids).replace(WORD_START, " ").lstrip(" ")


@lru_cache(maxsize=16)
def _tokenizer(vocab: Vocabulary) -> LLMTokenizer:
    return LLMTokenizer(vocab)


def encode_llm(text: str, llm_vocab: Vocabulary) -> TokenSeq:
    return _tokenizer(llm_vocab).encode(text)


def decode_llm(seq: TokenSeq | Sequence[int], llm_vocab: Vocabulary) -> str:
    return _tokenizer(llm_vocab).decode(seq)


class Bridge:
    """Maps llm token windows to reference ids, caching per trailing word.

    The last reference token of a decoded window lies in its final
    whitespace-delimited chunk, which starts at the last word-initial piece.
    Decoding only that suffix gives the same answer as decoding the whole
    window.
    """

    def __init__(self, llm_vocab: Vocabulary, ref_vocab: Vocabulary, window: int = 30):
        if window < 1:
            raise ValueError("bridge window N must be >= 1")
        self.tok = _tokenizer(llm_vocab)
        self.ref_vocab = ref_vocab
        self.window = window
        self._cache: dict[tuple[int, ...], int] = {}

    def _suffix(self, ids: Sequence[int], end: int) -> tuple[int, ...]:
        start = max(0, end - self.window)
        ws = self.tok.is_word_start
        j = end
        while j > start and not ws[ids[j]]:
            j -= 1
        return tuple(ids[j: end + 1])

    def ref_id(self, suffix: tuple[int, ...]) -> int:
        rid = self._cache.get(suffix)
        if rid is None:
            rid = _last_ref_id(self.tok.decode(suffix), self.ref_vocab)
            self._cache[suffix] = rid
        return rid

    def position(self, ids: Sequence[int], i: int) -> int:
        return self.ref_id(self._suffix(ids, i))

    def candidate(self, ids: Sequence[int], cand: int) -> int:
        """Reference id the position after ``ids`` would get if it held ``cand``."""
        if self.tok.is_word_start[cand]:
            return self.ref_id((cand,))
        return self.ref_id(self._suffix(list(ids[-self.window:]) + [cand], min(len(ids), self.window)))

    def encode(self, ids: Sequence[int]) -> list[int]:
        return [self.position(ids, i) for i in range(len(ids))]


def bridge_encode(seq: TokenSeq, llm_vocab: Vocabulary, ref_vocab: Vocabulary, N: int = 30) -> TokenSeq:
    """Length-preserving llm -> reference encoding.

    Element ``i`` is the last reference token of the text decoded from
    ``seq[max(0, i-N) .. i]``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    tok = _tokenizer(llm_vocab)
    ids = seq.ids
    out = []
    for i in range(len(ids)):
        text = tok.decode(ids[max(0, i - N): i + 1])
        out.append(_last_ref_id(text, ref_vocab))
    return TokenSeq(tuple(out), ref_vocab.namespace)


# --- E = W . U ----------------------------------------------------------------

def split_embedding(seq: TokenSeq, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Embedding rows in sequence order and the identity arrangement."""
    vocab.validate(seq)
    W = vocab.embed(list(seq.ids)).reshape(len(seq), vocab.dim)
    return W, np.arange(len(seq), dtype=np.int64)


def is_permutation(U: np.ndarray) -> bool:
    U = np.asarray(U)
    return U.ndim == 1 and np.array_equal(np.sort(U), np.arange(U.size))


def compose(W: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Place row ``i`` of ``W`` at position ``U[i]``."""
    W = np.asarray(W)
    U = np.asarray(U, dtype=np.int64)
    if W.shape[0] != U.shape[0]:
        raise ValueError(f"length mismatch: |W|={W.shape[0]}, |U|={U.shape[0]}")
    if not is_permutation(U):
        raise ValueError("U is not a permutation")
    out = np.empty_like(W)
    out[U] = W
    return out


def inverse_permutation(U: np.ndarray) -> np.ndarray:
    U = np.asarray(U, dtype=np.int64)
    inv = np.empty_like(U)
    inv[U] = np.arange(U.size)
    return inv
