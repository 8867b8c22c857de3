"""Order-sensitive watermark detector, noise-injected training, datasets.

Architecture: frozen shared embedding -> windows of ``w+1`` consecutive rows,
each flattened through a shared tanh feature layer -> mean pool over valid
windows -> tanh hidden layer -> 2-way softmax.  Inputs shorter than
``max_len`` are padded with null rows whose windows are masked out of the
pool.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import make_rng
from .smoothing import NoiseConfig, group_shuffle
from .tokenspace import Bridge, TokenSeq, Vocabulary, decode_llm
from .toylm import DecodeConfig, ToyLM
from .wmgen import GeneratorModel, GenParams, generate_watermarked, green_mask

log = logging.getLogger(__name__)

FEATURES = 64
HIDDEN = 32
PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    strategy: str = "duplicate"
    lr: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 7

    def __post_init__(self):
        if self.strategy not in ("joint", "duplicate"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


@dataclass
class Sample:
    ref_ids: tuple[int, ...]
    label: int
    text: str = ""
    meta: dict = field(default_factory=dict)


class DetectorModel:
    def __init__(self, table: np.ndarray, window: int = 2, max_len: int = 200,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0,
                 embedding_checksum: str = ""):
        self.table = table
        self.window = window
        self.max_len = max_len
        self.embedding_checksum = embedding_checksum
        self.in_dim = (window + 1) * table.shape[1]
        if params is None:
            params = self._init_params(seed)
        self.params = params

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = make_rng(seed, 0xDE7)
        spread = float(self.table.std()) or 1.0
        return {
            "W1": rng.normal(0.0, 1.0 / (spread * math.sqrt(self.in_dim)), (self.in_dim, FEATURES)),
            "b1": np.zeros(FEATURES),
            "W2": rng.normal(0.0, 1.0 / math.sqrt(FEATURES), (FEATURES, HIDDEN)),
            "b2": np.zeros(HIDDEN),
            "W3": rng.normal(0.0, 1.0 / math.sqrt(HIDDEN), (HIDDEN, 2)),
            "b3": np.zeros(2),
        }

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def embed(self, ids: Sequence[int]) -> np.ndarray:
        return self.table[np.asarray(ids, dtype=np.int64)].reshape(len(ids), self.dim)

    def copy(self) -> "DetectorModel":
        return DetectorModel(self.table, self.window, self.max_len,
                             {k: v.copy() for k, v in self.params.items()},
                             embedding_checksum=self.embedding_checksum)

    # -- forward / backward ------------------------------------------------------

    def _pad(self, E: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Accept ``(n, d)`` or ``(B, n, d)``; return padded batch and window mask."""
        E = np.asarray(E, dtype=np.float64)
        if E.ndim == 2:
            E = E[None]
        B, n, d = E.shape
        if d != self.dim:
            raise ValueError(f"embedding dimension {d} != detector dimension {self.dim}")
        if n > self.max_len:
            raise ValueError(f"{n} rows exceed max_len={self.max_len}; use sliding-window detection")
        k = self.window + 1
        L = max(n, k)
        if L > n:
            E = np.concatenate([E, np.zeros((B, L - n, d))], axis=1)
        n_win = L - k + 1
        mask = np.zeros((B, n_win))
        mask[:, : max(0, n - k + 1)] = 1.0
        return E, mask

    def _forward(self, E: np.ndarray, mask: np.ndarray):
        P = self.params
        B, L, d = E.shape
        k = self.window + 1
        n_win = L - k + 1
        X = np.concatenate([E[:, j: j + n_win] for j in range(k)], axis=2)  # (B, n_win, k*d)
        H = X @ P["W1"]
        H += P["b1"]
        np.tanh(H, out=H)
        cnt = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        pooled = np.matmul(mask[:, None, :], H)[:, 0] / cnt
        Z = np.tanh(pooled @ P["W2"] + P["b2"])
        logits = Z @ P["W3"] + P["b3"]
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        return probs, (X, H, mask, cnt, pooled, Z)

    def predict_proba(self, E: np.ndarray) -> np.ndarray:
        E, mask = self._pad(E)
        return self._forward(E, mask)[0]

    def classify(self, E: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(E), axis=1)

    def loss_and_grads(self, E: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
        """Mean cross-entropy over the batch and its parameter gradients."""
        if mask is None:
            E, mask = self._pad(E)
        P = self.params
        probs, (X, H, mask, cnt, pooled, Z) = self._forward(E, mask)
        B = E.shape[0]
        labels = np.asarray(labels, dtype=np.int64)
        loss = -np.mean(np.log(np.maximum(probs[np.arange(B), labels], 1e-300)))
        dlog = probs.copy()
        dlog[np.arange(B), labels] -= 1.0
        dlog /= B
        g = {"W3": Z.T @ dlog, "b3": dlog.sum(axis=0)}
        dZ = (dlog @ P["W3"].T) * (1.0 - Z ** 2)
        g["W2"] = pooled.T @ dZ
        g["b2"] = dZ.sum(axis=0)
        dpool = dZ @ P["W2"].T
        dH = (dpool / cnt)[:, None, :] * mask[..., None]
        dA = dH * (1.0 - H ** 2)
        g["W1"] = X.reshape(-1, X.shape[-1]).T @ dA.reshape(-1, dA.shape[-1])
        g["b1"] = dA.sum(axis=(0, 1))
        return float(loss), g

    # -- persistence -------------------------------------------------------------

    def to_payload(self) -> dict:
        return {
            "window": self.window,
            "max_len": self.max_len,
            "dims": {"in": self.in_dim, "features": FEATURES, "hidden": HIDDEN, "classes": 2},
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_payload(cls, payload: dict, vocab: Vocabulary) -> "DetectorModel":
        params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in payload["weights"].items()}
        return cls(vocab.table, payload["window"], payload["max_len"], params,
                   embedding_checksum=vocab.checksum())


def forward(det: DetectorModel, E: np.ndarray) -> tuple[float, float]:
    """``(p_unwatermarked, p_watermarked)`` for one embedding matrix."""
    p = det.predict_proba(E)[0]
    return float(p[0]), float(p[1])


# --- training -------------------------------------------------------------------

def _stack(det: DetectorModel, samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    L = det.max_len
    E = np.zeros((len(samples), L, det.dim))
    lengths = np.zeros(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        ids = s.ref_ids[:L]
        E[i, : len(ids)] = det.embed(ids)
        lengths[i] = len(ids)
    return E, lengths


def _noised(E: np.ndarray, lengths: np.ndarray, sigma: float, lam: int, rng) -> np.ndarray:
    """Gaussian noise on real rows and grouped shuffle of real positions."""
    out = E.copy()
    B, L, d = E.shape
    for i in range(B):
        n = int(lengths[i])
        W = E[i, :n]
        if sigma > 0:
            W = W + sigma * rng.standard_normal(W.shape)
        if lam > 1:
            pi = group_shuffle(n, lam, rng)
            Wp = np.empty_like(W)
            Wp[pi] = W
            W = Wp
        out[i, :n] = W
    return out


def _mask(det: DetectorModel, lengths: np.ndarray) -> np.ndarray:
    k = det.window + 1
    n_win = det.max_len - k + 1
    return (np.arange(n_win)[None, :] < (lengths[:, None] - k + 1)).astype(np.float64)


def train(det: DetectorModel, corpus: Sequence[Sample], cfg: TrainConfig,
          progress=None) -> tuple[DetectorModel, list[float]]:
    """Plain SGD on 2-class cross-entropy with noise injected each epoch.

    ``joint`` noises every sample with both perturbations.  ``duplicate``
    trains on two copies per sample per epoch: one with Gaussian noise only,
    one with grouped shuffle only.  Returns the trained copy and the mean
    loss of each epoch.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    det = det.copy()
    rng = make_rng(cfg.seed, 0x7A1)
    E, lengths = _stack(det, corpus)
    labels = np.array([s.label for s in corpus], dtype=np.int64)
    sigma, lam = cfg.noise.sigma, int(cfg.noise.lam)
    trace: list[float] = []
    for epoch in range(cfg.epochs):
        if cfg.strategy == "joint":
            views = [(np.arange(len(corpus)), sigma, lam)]
        else:
            views = [(np.arange(len(corpus)), sigma, 1), (np.arange(len(corpus)), 0.0, lam)]
        # (sample index, view) pairs, shuffled together
        pairs = np.array([(i, v) for v in range(len(views)) for i in views[v][0]])
        pairs = pairs[rng.permutation(len(pairs))]
        total, seen = 0.0, 0
        for start in range(0, len(pairs), cfg.batch_size):
            chunk = pairs[start: start + cfg.batch_size]
            xb = np.empty((len(chunk), det.max_len, det.dim))
            for v in range(len(views)):
                sel = chunk[:, 1] == v
                if sel.any():
                    idx = chunk[sel, 0]
                    xb[sel] = _noised(E[idx], lengths[idx], views[v][1], views[v][2], rng)
            loss, g = det.loss_and_grads(xb, labels[chunk[:, 0]], _mask(det, lengths[chunk[:, 0]]))
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            for name in PARAM_NAMES:
                det.params[name] -= cfg.lr * g[name]
            total += loss * len(chunk)
            seen += len(chunk)
        trace.append(total / seen)
        log.info("epoch %d loss %.4f (%d examples)", epoch, trace[-1], seen)
        if progress is not None:
            progress(epoch, trace[-1], seen)
    return det, trace


def predict_labels(det: DetectorModel, samples: Sequence[Sample], batch: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(samples), batch):
        chunk = samples[start: start + batch]
        E, lengths = _stack(det, chunk)
        probs, _ = det._forward(E, _mask(det, lengths))
        out.append(np.argmax(probs, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# --- datasets ---------------------------------------------------------------------

def z_score_ids(gen: GeneratorModel, ref_ids: Sequence[int], gamma: float | None = None) -> float:
    gamma = gen.gamma if gamma is None else gamma
    m = green_mask(gen, ref_ids)
    T = m.size
    if T == 0:
        raise ValueError("sequence too short to score")
    return float((m.sum() - gamma * T) / math.sqrt(T * gamma * (1 - gamma)))


def build_dataset(lm: ToyLM, gen: GeneratorModel, n_pos: int, n_neg: int,
                  human_corpus: Sequence[TokenSeq], params: GenParams, cfg: DecodeConfig,
                  llm_vocab: Vocabulary, ref_vocab: Vocabulary, prompt_len: int = 30,
                  seed: int = 0) -> list[Sample]:
    """Watermarked generations (label 1) and human segments (label 0).

    Prompts are the first ``prompt_len`` tokens of human documents; human
    negatives are ``prompt_len + max_len`` token segments of other documents
    with the leading ``prompt_len`` tokens dropped, so both classes are
    scored without their prompt.  Each sample keeps ``max_len`` reference ids.
    """
    if n_pos < 1 or n_neg < 1:
        raise ValueError("n_pos and n_neg must be >= 1")
    span = prompt_len + cfg.max_len
    segments: list[tuple[int, ...]] = []
    for doc in human_corpus:
        ids = doc.ids
        for s in range(0, len(ids) - span + 1, span):
            segments.append(ids[s: s + span])
    if len(segments) < n_pos + n_neg:
        raise ValueError(f"human corpus yields {len(segments)} segments of {span} tokens; "
                         f"need {n_pos + n_neg}")
    order = make_rng(seed, 0xDA7).permutation(len(segments))
    bridge = Bridge(llm_vocab, ref_vocab, params.bridge_n)
    samples: list[Sample] = []
    for j in range(n_pos):
        seg = segments[order[j]]
        prompt = TokenSeq(seg[:prompt_len], llm_vocab.namespace)
        c = DecodeConfig(cfg.strategy, cfg.temperature, cfg.beam_width, cfg.max_len, cfg.seed + j)
        out = generate_watermarked(lm, gen, prompt, params, c, llm_vocab, ref_vocab)
        full = list(prompt.ids) + list(out.ids)
        ref = tuple(bridge.encode(full)[prompt_len:])
        samples.append(Sample(ref, 1, decode_llm(out.ids, llm_vocab),
                              {"z": z_score_ids(gen, ref), "llm_ids": list(out.ids),
                               "prompt_ids": list(prompt.ids), "source": "generated"}))
    for j in range(n_neg):
        seg = segments[order[n_pos + j]]
        ref = tuple(bridge.encode(seg)[prompt_len:])
        samples.append(Sample(ref, 0, decode_llm(seg[prompt_len:], llm_vocab),
                              {"z": z_score_ids(gen, ref), "llm_ids": list(seg[prompt_len:]),
                               "prompt_ids": list(seg[:prompt_len]), "source": "human"}))
    return samples
