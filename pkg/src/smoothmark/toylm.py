"""Desk-scale n-gram language model with sampling and beam search.

Probabilities are additive-smoothed and shrunk toward the next-lower order::

    P_k(t | c) = (count(c, t) + s*|V| * P_{k-1}(t | c')) / (count(c) + s*|V|)

where ``c'`` drops the oldest context token and ``P_0`` is the Lidstone
unigram ``(count(t) + s) / (total + s*|V|)``.  Contexts never seen in
training contribute nothing, so short or novel contexts back off to the
lower orders.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .rng import make_rng
from .tokenspace import TokenSeq, Vocabulary

LogitsProcessor = Callable[[Sequence[int], np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "sample"
    temperature: float = 0.7
    beam_width: int = 3
    max_len: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("sample", "beam"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


class ToyLM:
    def __init__(self, vocab_size: int, order: int, smoothing: float,
                 unigram: np.ndarray, tables: list[dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]]],
                 vocab_checksum: str = "", namespace: str = "llm"):
        self.vocab_size = vocab_size
        self.order = order
        self.smoothing = smoothing
        self.unigram_counts = unigram
        self.tables = tables  # tables[k-1]: context of length k -> (ids, counts)
        self.vocab_checksum = vocab_checksum
        self.namespace = namespace
        total = unigram.sum()
        self._p0 = (unigram + smoothing) / (total + smoothing * vocab_size)
        self._prior = smoothing * vocab_size

    def probs(self, context: Sequence[int]) -> np.ndarray:
        p = self._p0
        for k in range(1, self.order):
            if len(context) < k:
                break
            hit = self.tables[k - 1].get(tuple(context[-k:]))
            if hit is None:
                continue
            ids, cnts = hit
            denom = cnts.sum() + self._prior
            p = p * (self._prior / denom)
            p[ids] += cnts / denom
        return p

    def logits(self, context: Sequence[int]) -> np.ndarray:
        return np.log(self.probs(context))

    def sequence_logprob(self, prompt: Sequence[int], continuation: Sequence[int]) -> float:
        ctx = list(prompt)
        total = 0.0
        for t in continuation:
            total += float(np.log(self.probs(ctx)[t]))
            ctx.append(t)
        return total

    def to_payload(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "order": self.order,
            "smoothing": self.smoothing,
            "namespace": self.namespace,
            "unigram": self.unigram_counts.astype(int).tolist(),
            "tables": [
                [[list(ctx), ids.tolist(), cnts.astype(int).tolist()] for ctx, (ids, cnts) in sorted(tab.items())]
                for tab in self.tables
            ],
        }

    @classmethod
    def from_payload(cls, payload: dict, vocab_checksum: str = "") -> "ToyLM":
        tables = []
        for tab in payload["tables"]:
            tables.append({tuple(ctx): (np.array(ids, dtype=np.int64), np.array(c, dtype=np.float64))
                           for ctx, ids, c in tab})
        return cls(payload["vocab_size"], payload["order"], payload["smoothing"],
                   np.array(payload["unigram"], dtype=np.float64), tables, vocab_checksum,
                   payload.get("namespace", "llm"))


def train_toy_lm(corpus: Sequence[TokenSeq], order: int = 3, smoothing: float = 0.1,
                 vocab: Vocabulary | None = None, vocab_size: int | None = None) -> ToyLM:
    """Count n-grams within each sequence (never across sequence boundaries)."""
    if not corpus or all(len(s) == 0 for s in corpus):
        raise ValueError("empty corpus")
    if order < 1:
        raise ValueError("order must be >= 1")
    if smoothing <= 0:
        raise ValueError("smoothing must be > 0")
    if vocab is not None:
        vocab_size = vocab.n_ids
    if vocab_size is None:
        vocab_size = max(max(s.ids) for s in corpus if len(s)) + 1
    unigram = np.zeros(vocab_size)
    raw: list[dict[tuple[int, ...], dict[int, int]]] = [defaultdict(lambda: defaultdict(int)) for _ in range(order - 1)]
    for seq in corpus:
        ids = seq.ids
        for j, t in enumerate(ids):
            unigram[t] += 1
            for k in range(1, min(order - 1, j) + 1):
                raw[k - 1][ids[j - k:j]][t] += 1
    tables = []
    for tab in raw:
        packed = {}
        for ctx, follow in tab.items():
            keys = np.array(sorted(follow), dtype=np.int64)
            packed[ctx] = (keys, np.array([follow[k] for k in keys], dtype=np.float64))
        tables.append(packed)
    return ToyLM(vocab_size, order, smoothing, unigram, tables,
                 vocab.checksum() if vocab is not None else "",
                 corpus[0].namespace)


def logits(lm: ToyLM, context: TokenSeq | Sequence[int]) -> np.ndarray:
    return lm.logits(list(context))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    return x - m - np.log(np.exp(x - m).sum())


def _sample(scores: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    z = scores / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    return min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(p) - 1)


def _beam(lm: ToyLM, prompt: list[int], cfg: DecodeConfig, process: LogitsProcessor | None) -> list[int]:
    beams: list[tuple[float, list[int]]] = [(0.0, [])]
    B = cfg.beam_width
    for _ in range(cfg.max_len):
        cand_scores, cand_src, cand_tok = [], [], []
        for b, (score, seq) in enumerate(beams):
            ctx = prompt + seq
            lg = lm.logits(ctx)
            if process is not None:
                lg = process(ctx, lg)
            lp = _log_softmax(lg)
            top = np.argsort(-lp, kind="stable")[:B]
            cand_scores.extend(score + lp[top])
            cand_src.extend([b] * len(top))
            cand_tok.extend(top.tolist())
        order = np.argsort(-np.array(cand_scores), kind="stable")[:B]
        beams = [(float(cand_scores[i]), beams[cand_src[i]][1] + [cand_tok[i]]) for i in order]
    return beams[0][1]


def generate(lm: ToyLM, prompt: TokenSeq | Sequence[int], cfg: DecodeConfig,
             process: LogitsProcessor | None = None) -> TokenSeq:
    """Continue ``prompt`` by ``cfg.max_len`` tokens.

    ``process(context, logits)`` may rewrite logits before sampling or beam
    scoring; it must not consume randomness.
    """
    ctx = list(prompt)
    namespace = getattr(prompt, "namespace", lm.namespace)
    if cfg.strategy == "beam":
        return TokenSeq(tuple(_beam(lm, ctx, cfg, process)), namespace)
    rng = make_rng(cfg.seed)
    out: list[int] = []
    for _ in range(cfg.max_len):
        lg = lm.logits(ctx)
        if process is not None:
            lg = process(ctx, lg)
        t = _sample(lg, cfg.temperature, rng)
        out.append(t)
        ctx.append(t)
    return TokenSeq(tuple(out), namespace)
