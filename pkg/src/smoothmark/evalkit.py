"""Metrics, sliding-window detection, embedding statistics and reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .rng import make_rng
from .smoothing import ABSTAIN, CertifiedResult
from .tokenspace import TokenSeq
from .wmgen import GeneratorModel, green_mask

MAX_PAIRS = 1_000_000


def z_score(seq: TokenSeq | Sequence[int], gen: GeneratorModel, gamma: float | None = None) -> float:
    """Green-count z statistic over the ``T = |seq| - w`` scored positions."""
    gamma = gen.gamma if gamma is None else gamma
    ids = list(seq)
    if len(ids) <= gen.window:
        raise ValueError(f"sequence of {len(ids)} tokens is too short for window {gen.window}")
    m = green_mask(gen, ids)
    T = m.size
    return float((m.sum() - gamma * T) / math.sqrt(T * gamma * (1.0 - gamma)))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int
    abstained: int = 0

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "abstained": self.abstained, "tpr": self.tpr, "fpr": self.fpr, "f1": self.f1}


def confusion_metrics(preds: Sequence[int], truth: Sequence[int],
                      abstain_policy: str = "count_as_negative") -> Confusion:
    """Confusion counts with watermarked (1) as the positive class.

    ``count_as_negative`` scores ABSTAIN as an unwatermarked prediction;
    ``exclude`` drops abstained samples.
    """
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(truth, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError("preds and truth differ in length")
    if abstain_policy not in ("count_as_negative", "exclude"):
        raise ValueError(f"unknown abstain policy {abstain_policy!r}")
    ab = p == ABSTAIN
    if abstain_policy == "exclude":
        p, y = p[~ab], y[~ab]
    else:
        p = np.where(ab, 0, p)
    return Confusion(int(((p == 1) & (y == 1)).sum()), int(((p == 1) & (y == 0)).sum()),
                     int(((p == 0) & (y == 0)).sum()), int(((p == 0) & (y == 1)).sum()), int(ab.sum()))


def f1_from_rates(tpr: float, fpr: float, n_pos: int, n_neg: int) -> float:
    """F1 implied by TPR/FPR on ``n_pos`` positives and ``n_neg`` negatives."""
    tp = tpr * n_pos
    return 2 * tp / (2 * tp + fpr * n_neg + (1 - tpr) * n_pos)


def certified_accuracy(results: Sequence[CertifiedResult], truth: Sequence[int],
                       radius_grid: Sequence[float], space: str = "embedding") -> list[float]:
    """Fraction of samples that are correct and certified beyond each radius.

    A sample counts at radius ``r`` when its label is right and its radius in
    ``space`` is at least ``r``.  Abstentions never count.
    """
    if space not in ("embedding", "permutation"):
        raise ValueError(f"unknown space {space!r}")
    if len(results) != len(truth):
        raise ValueError("results and truth differ in length")
    if not results:
        return [0.0 for _ in radius_grid]
    rad = np.array([r.rad_e if space == "embedding" else r.rad_p for r in results])
    ok = np.array([r.label == t and r.label != ABSTAIN for r, t in zip(results, truth)])
    return [float((ok & (rad >= g)).mean()) for g in radius_grid]


def window_starts(n: int, window: int = 200, stride: int = 100) -> list[int]:
    """Window offsets covering ``[0, n)``; the last window ends at ``n``."""
    if not window >= stride >= 1:
        raise ValueError("need window >= stride >= 1")
    if n <= window:
        return [0]
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


def sliding_window_detect(detect: Callable[[TokenSeq, int], int], seq: TokenSeq,
                          window: int = 200, stride: int = 100) -> tuple[int, list[int]]:
    """Positive overall if any window is detected as watermarked.

    ``detect(segment, start)`` returns a label; the start offset lets callers
    derive per-window seeds.  Returns the overall label and per-window labels.
    """
    labels = [detect(seq[s: s + window], s) for s in window_starts(len(seq), window, stride)]
    return (1 if any(lab == 1 for lab in labels) else 0), labels


def embedding_stats(vectors: np.ndarray, bins: int = 50, seed: int = 0,
                    max_pairs: int = MAX_PAIRS) -> dict:
    """Norm and pairwise-distance summaries of an embedding table.

    Means are exact.  Histograms use every pair up to ``max_pairs`` and a
    seeded uniform sample of pairs beyond that.
    """
    V = np.asarray(vectors, dtype=np.float64)
    n = V.shape[0]
    if n < 2:
        raise ValueError("need at least two vectors")
    norms = np.linalg.norm(V, axis=1)
    sq = (V ** 2).sum(axis=1)
    total, count = 0.0, 0
    for start in range(0, n, 512):
        rows = V[start: start + 512]
        d2 = sq[start: start + 512, None] - 2.0 * rows @ V.T + sq[None, :]
        d = np.sqrt(np.maximum(d2, 0.0))
        i = np.arange(start, start + rows.shape[0])[:, None]
        upper = np.arange(n)[None, :] > i
        total += float(d[upper].sum())
        count += int(upper.sum())
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        a, b = np.triu_indices(n, k=1)
    else:
        rng = make_rng(seed, 0xE57)
        a = rng.integers(0, n, max_pairs)
        b = (a + rng.integers(1, n, max_pairs)) % n
    dists = np.linalg.norm(V[a] - V[b], axis=1)
    nh, ne = np.histogram(norms, bins=bins)
    dh, de = np.histogram(dists, bins=bins)
    return {
        "n_vectors": n,
        "dim": V.shape[1],
        "norm_mean": float(norms.mean()),
        "norm_std": float(norms.std()),
        "distance_mean": total / count,
        "distance_pairs": count,
        "histogram_pairs": int(a.size),
        "norm_hist": {"counts": nh.tolist(), "edges": ne.tolist()},
        "distance_hist": {"counts": dh.tolist(), "edges": de.tolist()},
    }


def tokens_tolerated(rad_e: float, mean_distance: float) -> int:
    """Substitutions of average size fitting inside an l2 radius: ``floor((rad/d)^2)``."""
    if mean_distance <= 0:
        raise ValueError("mean distance must be positive")
    if not math.isfinite(rad_e):
        raise ValueError("radius must be finite")
    return math.floor((rad_e / mean_distance) ** 2)


# --- reports ------------------------------------------------------------------------

@dataclass
class EvalReport:
    metadata: dict
    aggregates: dict
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {"metadata": self.metadata, "aggregates": self.aggregates, "records": self.records}
        return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = sorted({k for r in self.records for k in r})
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: _cell(r.get(k)) for k in cols})
        return buf.getvalue()


def _clean(obj):
    # inf radii (pA == 1) become strings so reports stay strict JSON
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _cell(v):
    v = _clean(v)
    if isinstance(v, (list, dict)):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else v


def emit_report(report: EvalReport, path: str | Path | None = None, fmt: str = "json") -> str:
    """Serialize ``report`` (byte-stable for identical inputs); write it when ``path`` is set."""
    if fmt == "json":
        text = report.to_json()
    elif fmt == "csv":
        text = report.to_csv()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_report(path: str | Path) -> EvalReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return EvalReport(doc["metadata"], doc["aggregates"], doc.get("records", []))


# --- evaluation pipeline ------------------------------------------------------------

EMBEDDING_GRID = tuple(float(x) for x in np.arange(0.0, 10.01, 0.5))
PERMUTATION_GRID = tuple(float(x) for x in np.arange(0.0, 8.01, 0.5))


def _human_material(negatives: Sequence[Sequence[int]], start: int, length: int) -> TokenSeq:
    ids: list[int] = []
    j = start
    while len(ids) < length:
        if j - start >= len(negatives):
            raise ValueError(f"not enough human tokens for a {length}-token host text")
        ids.extend(negatives[j % len(negatives)])
        j += 1
    return TokenSeq(tuple(ids[:length]), "ref")


def evaluate(det, samples, noise, N0: int = 1000, alpha: float = 0.05, mode: str = "single",
             seed: int = 0, attack=None, vocab=None, gen: GeneratorModel | None = None,
             smoothed: bool = True, window: int = 200, stride: int = 100, workers: int = 1,
             metadata: dict | None = None) -> EvalReport:
    """Run (optionally attacked) detection over ``samples`` and summarize.

    Each sample gets its own attack and certification streams derived from
    ``seed`` and its index.  Copy-paste attacks embed every positive sample
    into human text built from the negatives and are scored both on the
    leading ``max_len`` tokens and with sliding windows.
    """
    from .attacks import apply_edit, copy_paste
    from .smoothing import certify

    def run(seq: TokenSeq, i: int, start: int = 0) -> CertifiedResult | int:
        if smoothed:
            return certify(det, seq, noise, N0, alpha, mode, rng=make_rng(seed, 0xCE7, i, start),
                           workers=workers)
        return int(det.classify(det.embed(seq.ids))[0])

    def label_of(r) -> int:
        return r.label if isinstance(r, CertifiedResult) else r

    records: list[dict] = []
    results: list[CertifiedResult] = []
    truth: list[int] = []
    window_preds: list[int] = []
    cp = attack is not None and attack.kind == "copy_paste"
    if cp:
        negatives = [s.ref_ids for s in samples if s.label == 0]
        samples = [s for s in samples if s.label == 1]
    for i, s in enumerate(samples):
        seq = TokenSeq(tuple(s.ref_ids), "ref")
        rec: dict = {"index": i, "label": int(s.label), "source": s.meta.get("source", "")}
        if cp:
            host = _human_material(negatives, i % max(1, len(negatives)), attack.human_len)
            seq, at = copy_paste(seq, host, attack.n_wm, attack.human_len, make_rng(seed, 0xA77, i))
            rec["insert_at"] = at
            overall, per = sliding_window_detect(lambda seg, st: label_of(run(seg, i, st)), seq, window, stride)
            window_preds.append(overall)
            rec["window_pred"] = overall
            rec["window_labels"] = per
        elif attack is not None:
            seq = apply_edit(seq, attack, vocab, make_rng(seed, 0xA77, i))
        whole = seq[: det.max_len]
        r = run(whole, i, 0)
        rec["length"] = len(seq)
        rec["pred"] = label_of(r)
        if isinstance(r, CertifiedResult):
            results.append(r)
            rec.update({k: v for k, v in r.to_dict().items()
                        if k in ("p_value", "pA_lower", "rad_e", "rad_p", "n_A", "n_B")})
        if gen is not None and len(seq) > gen.window:
            rec["z"] = z_score(seq, gen)
        truth.append(int(s.label))
        records.append(rec)

    preds = [r["pred"] for r in records]
    conf = confusion_metrics(preds, truth)
    agg: dict = {"n": len(records), "whole": conf.as_dict()}
    if cp:
        agg["window"] = confusion_metrics(window_preds, truth).as_dict()
    if results:
        agg["certified_accuracy"] = {
            "embedding": dict(zip([str(g) for g in EMBEDDING_GRID],
                                  certified_accuracy(results, truth, EMBEDDING_GRID, "embedding"))),
            "permutation": dict(zip([str(g) for g in PERMUTATION_GRID],
                                    certified_accuracy(results, truth, PERMUTATION_GRID, "permutation"))),
        }
        certified = [r for r in results if r.label != ABSTAIN]
        agg["abstain_rate"] = 1.0 - len(certified) / len(results)
        agg["mean_rad_e"] = float(np.mean([r.rad_e for r in certified])) if certified else 0.0
        agg["mean_rad_p"] = float(np.mean([r.rad_p for r in certified])) if certified else 0.0
    meta = {
        "N0": N0, "alpha": alpha, "mode": mode, "seed": seed, "smoothed": smoothed,
        "sigma": noise.sigma, "lambda": int(noise.lam),
        "attack": None if attack is None else {"kind": attack.kind, "fraction": attack.fraction,
                                               "n_wm": attack.n_wm, "human_len": attack.human_len},
        "window": window, "stride": stride,
    }
    meta.update(metadata or {})
    return EvalReport(meta, agg, records)
