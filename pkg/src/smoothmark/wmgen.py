"""Keyed green-token generator and watermarked generation.

The generator reads the reference embeddings of a ``w+1`` token window,
passes them through one tanh layer and a linear read-out, and calls the
window green when the score exceeds a calibrated threshold.  The score is
centred per context: the mean read-out over a fixed keyed set of probe
candidates in the same context is subtracted, so every context holds close
to ``gamma`` of the vocabulary in its green list.  Convention used
everywhere in this package: bit 1 means green, and green candidates get their
logit raised by ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import make_rng
from .tokenspace import Bridge, TokenSeq, Vocabulary
from .toylm import DecodeConfig, ToyLM, _sample, generate

HIDDEN = 64
N_PROBES = 64


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class GenParams:
    window: int = 2
    delta: float = 2.0
    top_k: int = 20
    bridge_n: int = 30

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window size must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.bridge_n < 1:
            raise ValueError("bridge N must be >= 1")


@dataclass
class GeneratorModel:
    table: np.ndarray = field(repr=False)
    W1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    probes: np.ndarray = field(repr=False)
    threshold: float
    seed: int
    window: int
    gamma: float
    vocab_checksum: str = ""

    def scores(self, windows: np.ndarray) -> np.ndarray:
        """Context-centred read-out for each ``(w+1)``-token window."""
        windows = np.asarray(windows, dtype=np.int64).reshape(-1, self.window + 1)
        d = self.table.shape[1]
        cut = self.window * d
        if (windows[:, :-1] == windows[:1, :-1]).all():  # one shared context (selection step)
            ctx, inv = windows[:1, :-1], np.zeros(len(windows), dtype=np.int64)
        else:
            ctx, inv = np.unique(windows[:, :-1], axis=0, return_inverse=True)
            inv = inv.reshape(-1)
        c = self.table[ctx].reshape(len(ctx), cut) @ self.W1[:cut] + self.b1
        t = self.table[windows[:, -1]] @ self.W1[cut:]
        raw = np.tanh(c[inv] + t) @ self.v
        p = self.table[self.probes] @ self.W1[cut:]
        centre = (np.tanh(c[:, None, :] + p[None]) @ self.v).mean(axis=1)
        return raw - centre[inv]

    def bits(self, windows: np.ndarray) -> np.ndarray:
        return (self.scores(windows) > self.threshold).astype(np.int8)

    def to_payload(self) -> dict:
        return {
            "seed": self.seed,
            "window": self.window,
            "gamma": self.gamma,
            "threshold": self.threshold,
            "W1": self.W1.ravel().tolist(),
            "W1_shape": list(self.W1.shape),
            "b1": self.b1.tolist(),
            "v": self.v.tolist(),
            "probes": self.probes.tolist(),
        }

    @classmethod
    def from_payload(cls, payload: dict, vocab: Vocabulary) -> "GeneratorModel":
        return cls(vocab.table,
                   np.array(payload["W1"]).reshape(payload["W1_shape"]),
                   np.array(payload["b1"]), np.array(payload["v"]),
                   np.array(payload["probes"], dtype=np.int64), float(payload["threshold"]), int(payload["seed"]),
                   int(payload["window"]), float(payload["gamma"]), vocab.checksum())


def _random_windows(n: int, width: int, n_ids: int, rng) -> np.ndarray:
    return rng.integers(0, n_ids, size=(n, width))


def init_generator(seed: int, vocab: Vocabulary, target_gamma: float = 0.5, window: int = 2,
                   n_calib: int = 10_000, max_rounds: int = 8, tol: float = 0.02) -> GeneratorModel:
    """Draw keyed weights and calibrate the threshold to a green fraction of ``target_gamma``.

    The threshold is the ``1 - gamma`` quantile of scores over ``n_calib``
    uniformly random in-vocabulary windows; it is accepted once a fresh batch
    of windows lands within ``tol`` of the target.
    """
    if not 0 < target_gamma < 1:
        raise ValueError("target_gamma must lie in (0, 1)")
    if window < 1:
        raise ValueError("window must be >= 1")
    rng = make_rng(seed, 0x6E0)
    d = vocab.dim
    width = window + 1
    spread = float(vocab.vectors.std()) or 1.0
    # unit-variance pre-activations for typical windows
    W1 = rng.normal(0.0, 1.0 / (spread * np.sqrt(width * d)), (width * d, HIDDEN))
    b1 = rng.normal(0.0, 0.5, HIDDEN)
    v = rng.normal(0.0, 1.0 / np.sqrt(HIDDEN), HIDDEN)
    probes = np.sort(rng.choice(vocab.size, size=min(N_PROBES, vocab.size), replace=False))
    gen = GeneratorModel(vocab.table, W1, b1, v, probes, 0.0, seed, window, target_gamma, vocab.checksum())
    sample = np.empty(0)
    for r in range(max_rounds):
        sample = np.concatenate([sample, gen.scores(_random_windows(n_calib, width, vocab.size, rng))])
        gen.threshold = float(np.quantile(sample, 1.0 - target_gamma))
        check = gen.bits(_random_windows(n_calib, width, vocab.size, rng)).mean()
        if abs(check - target_gamma) <= tol:
            return gen
    raise CalibrationError(f"green fraction {check:.3f} not within {tol} of {target_gamma} "
                           f"after {max_rounds} rounds")


def is_green(gen: GeneratorModel, window: TokenSeq | Sequence[int]) -> int:
    ids = list(window)
    if len(ids) != gen.window + 1:
        raise ValueError(f"window must hold {gen.window + 1} tokens, got {len(ids)}")
    return int(gen.bits(np.array([ids]))[0])


def green_mask(gen: GeneratorModel, ref_ids: Sequence[int]) -> np.ndarray:
    """Green bit for every position ``i >= w`` of a reference sequence."""
    ids = np.asarray(ref_ids, dtype=np.int64)
    w = gen.window
    if ids.size <= w:
        return np.zeros(0, dtype=np.int8)
    windows = np.lib.stride_tricks.sliding_window_view(ids, w + 1)
    return gen.bits(windows)


class GreenSelector:
    """Incremental green-set selection over an llm-token prefix.

    Reference ids of the prefix are cached so each step only encodes the
    candidate position.  Results equal ``select_green`` on the same inputs.
    """

    def __init__(self, gen: GeneratorModel, llm_vocab: Vocabulary, ref_vocab: Vocabulary,
                 params: GenParams):
        if gen.window != params.window:
            raise ValueError("generator window differs from params.window")
        self.gen = gen
        self.params = params
        self.bridge = Bridge(llm_vocab, ref_vocab, params.bridge_n)
        self._ids: list[int] = []
        self._ref: list[int] = []

    def _sync(self, prefix: Sequence[int]) -> None:
        # bridged position i depends only on prefix[:i+1]; keep the shared head
        m = 0
        limit = min(len(prefix), len(self._ids))
        while m < limit and self._ids[m] == prefix[m]:
            m += 1
        del self._ids[m:], self._ref[m:]
        for i in range(m, len(prefix)):
            self._ids.append(prefix[i])
            self._ref.append(self.bridge.position(prefix, i))

    def select(self, prefix: Sequence[int], candidates: Sequence[int]) -> list[int]:
        w = self.params.window
        if len(prefix) < w:
            raise ValueError(f"prefix must hold at least w={w} tokens")
        cands = list(candidates)
        if not cands:
            return []
        self._sync(prefix)
        ctx = self._ref[len(prefix) - w: len(prefix)]
        windows = np.array([ctx + [self.bridge.candidate(prefix, c)] for c in cands])
        bits = self.gen.bits(windows)
        return [c for c, b in zip(cands, bits) if b]


def select_green(gen: GeneratorModel, prefix: TokenSeq | Sequence[int], candidates,
                 llm_vocab: Vocabulary, ref_vocab: Vocabulary, params: GenParams) -> set[int]:
    """Candidates whose bridged window ``[t_{i-w}, ..., t_{i-1}, t]`` is green.

    Window positions are bridge-encoded with up to ``N`` preceding llm tokens
    of context, exactly as the detector later sees the finished text.
    """
    sel = GreenSelector(gen, llm_vocab, ref_vocab, params)
    return set(sel.select(list(prefix), sorted(candidates)))


class WatermarkProcessor:
    """Logits hook: raise top-K green candidates by ``delta``."""

    def __init__(self, gen, llm_vocab, ref_vocab, params: GenParams):
        self.params = params
        self.selector = GreenSelector(gen, llm_vocab, ref_vocab, params)

    def __call__(self, context: Sequence[int], logits: np.ndarray) -> np.ndarray:
        if self.params.delta == 0 or len(context) < self.params.window:
            return logits
        k = min(self.params.top_k, logits.size)
        top = np.argpartition(-logits, k - 1)[:k]
        green = self.selector.select(context, top.tolist())
        if green:
            logits = logits.copy()
            logits[green] += self.params.delta
        return logits


def generate_watermarked(lm: ToyLM, gen: GeneratorModel, prompt: TokenSeq, params: GenParams,
                         cfg: DecodeConfig, llm_vocab: Vocabulary, ref_vocab: Vocabulary) -> TokenSeq:
    proc = WatermarkProcessor(gen, llm_vocab, ref_vocab, params)
    return generate(lm, prompt, cfg, proc)


def generate_with_markers(lm: ToyLM, gen: GeneratorModel, prompt: TokenSeq, params: GenParams,
                          cfg: DecodeConfig, llm_vocab: Vocabulary, ref_vocab: Vocabulary,
                          marker: str = "▁*") -> tuple[TokenSeq, TokenSeq]:
    """Emoji-attack generation: a marker follows every content token.

    Markers sit in the watermark generator's windows while content is chosen,
    but the language model conditions on the marker-free text (a model told
    to "insert * after each word" keeps writing fluently).  Returns the
    marked sequence and the stripped one, which is the attacked text.
    """
    mid = llm_vocab.id_of(marker)
    if mid is None or ref_vocab.id_of(marker.lstrip("▁")) is None:
        raise ValueError(f"marker {marker!r} missing from a vocabulary")
    proc = WatermarkProcessor(gen, llm_vocab, ref_vocab, params)
    rng = make_rng(cfg.seed)
    marked = list(prompt)
    content = list(prompt)
    n_prompt = len(marked)
    for _ in range(cfg.max_len):
        lg = lm.logits(content)
        if len(marked) >= params.window:
            lg = proc(marked, lg)
        # single-hypothesis decoding: beam configs decode greedily here
        t = int(np.argmax(lg)) if cfg.strategy == "beam" else _sample(lg, cfg.temperature, rng)
        marked.extend([t, mid])
        content.append(t)
    ns = prompt.namespace if isinstance(prompt, TokenSeq) else llm_vocab.namespace
    gen_marked = TokenSeq(tuple(marked[n_prompt:]), ns)
    stripped = TokenSeq(tuple(t for t in gen_marked.ids if t != mid), ns)
    return gen_marked, stripped
