"""Noise functions, the smoothed detector, and Monte-Carlo certification.

A base classifier here is anything with ``classify(E) -> labels`` taking a
``(batch, n, d)`` array of embedding matrices.  Labels are 0 (unwatermarked)
and 1 (watermarked); ``ABSTAIN`` is -1.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np
from scipy import special, stats

from .rng import as_rng
from .tokenspace import TokenSeq

ABSTAIN = -1
LABEL_NAMES = {0: "unwatermarked", 1: "watermarked", ABSTAIN: "ABSTAIN"}
DRAW_BATCH = 100


class Classifier(Protocol):
    def classify(self, E: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float = 15.0
    lam: int = 8

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if int(self.lam) != self.lam or self.lam < 1:
            raise ValueError("lambda must be an integer >= 1")


@dataclass
class CertifiedResult:
    label: int
    p_value: float
    pA_lower: float
    pB_upper: float
    rad_e: float
    rad_p: float
    n_A: int
    n_B: int
    N0: int
    alpha: float
    sigma: float = 0.0
    lam: int = 1
    mode: str = "single"

    @property
    def abstained(self) -> bool:
        return self.label == ABSTAIN

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_name"] = self.label_name
        return d


# --- perturbations --------------------------------------------------------------

def phi(W: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise to every entry."""
    W = np.asarray(W, dtype=np.float64)
    if sigma == 0:
        return W.copy()
    return W + sigma * as_rng(rng).standard_normal(W.shape)


def group_shuffle(n: int, lam: int, rng, batch: int | None = None) -> np.ndarray:
    """Uniform permutation of positions within consecutive groups of length ``lam``."""
    groups = np.arange(n) // lam
    shape = (n,) if batch is None else (batch, n)
    if lam == 1 or n == 0:
        return np.broadcast_to(np.arange(n), shape).copy()
    keys = groups + as_rng(rng).random(shape)
    return np.argsort(keys, axis=-1, kind="stable")


def theta(U: np.ndarray, lam: int, rng) -> np.ndarray:
    """Shuffle target positions within groups: ``U'[i] = pi[U[i]]``.

    Each entry moves by at most ``lam - 1`` index units.
    """
    U = np.asarray(U, dtype=np.int64)
    if lam < 1:
        raise ValueError("lambda must be >= 1")
    return group_shuffle(U.size, lam, rng)[U]


# --- statistics -------------------------------------------------------------------

def norm_inv_cdf(p: float) -> float:
    """Standard normal quantile."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return float(special.ndtri(p))


def clopper_pearson_lower(k: int, n: int, alpha: float) -> float:
    """One-sided lower confidence bound for a binomial proportion.

    Largest p with ``P(X >= k | n, p) <= alpha``; the Beta quantile
    ``B(alpha; k, n-k+1)``.
    """
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if k == 0:
        return 0.0
    if k == n:
        return alpha ** (1.0 / n)
    return float(stats.beta.ppf(alpha, k, n - k + 1))


def binom_two_sided_p(k: int, n: int) -> float:
    """Exact two-sided p-value of ``k`` successes under Binomial(n, 1/2)."""
    if n < 0 or not 0 <= k <= n:
        raise ValueError(f"need 0 <= k <= n, got k={k}, n={n}")
    if n == 0:
        return 1.0
    lo = stats.binom.logcdf(k, n, 0.5)
    hi = stats.binom.logsf(k - 1, n, 0.5)
    return float(min(1.0, 2.0 * math.exp(min(lo, hi))))


def radii(sigma: float, lam: float, pA_lower: float, pB_upper: float) -> tuple[float, float]:
    """``(sigma * Phi^-1(pA), lam * (pA - pB))``, both clamped at zero."""
    if not 0.0 <= pB_upper <= pA_lower <= 1.0:
        raise ValueError(f"need 0 <= pB <= pA <= 1, got pA={pA_lower}, pB={pB_upper}")
    if pA_lower <= 0.5:
        rad_e = 0.0
    elif pA_lower >= 1.0:
        rad_e = math.inf
    else:
        rad_e = max(0.0, sigma * norm_inv_cdf(pA_lower))
    return rad_e, max(0.0, lam * (pA_lower - pB_upper))


# --- Monte-Carlo ---------------------------------------------------------------------

def noisy_batch(W: np.ndarray, U: np.ndarray, noise: NoiseConfig, size: int, rng) -> np.ndarray:
    """``size`` draws of ``compose(phi(W), theta(U))`` stacked on axis 0."""
    rng = as_rng(rng)
    n, d = W.shape
    Wn = np.broadcast_to(W, (size, n, d))
    if noise.sigma > 0:
        Wn = Wn + noise.sigma * rng.standard_normal((size, n, d))
    pi = group_shuffle(n, int(noise.lam), rng, batch=size)
    target = np.take_along_axis(pi, np.broadcast_to(U, (size, n)), axis=1)
    out = np.empty((size, n, d))
    out[np.arange(size)[:, None], target] = Wn
    return out


def sample_counts(det: Classifier, W: np.ndarray, U: np.ndarray, noise: NoiseConfig, N: int,
                  rng, n_classes: int = 2, workers: int = 1) -> np.ndarray:
    """Class counts of the base classifier over ``N`` independent noise draws.

    Draws are split into fixed-size batches, each with its own child stream,
    so the counts do not depend on ``workers``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    U = np.asarray(U, dtype=np.int64)
    sizes = [DRAW_BATCH] * (N // DRAW_BATCH) + ([N % DRAW_BATCH] if N % DRAW_BATCH else [])
    children = as_rng(rng).spawn(len(sizes))

    def run(job):
        size, child = job
        labels = np.asarray(det.classify(noisy_batch(W, U, noise, size, child)))
        return np.bincount(labels, minlength=n_classes)

    jobs = list(zip(sizes, children))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    return np.sum(parts, axis=0)


def _as_wu(det, x) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(x, TokenSeq):
        W = det.embed(x.ids)
        return W, np.arange(len(x))
    W, U = x
    return np.asarray(W, dtype=np.float64), np.asarray(U, dtype=np.int64)


def smoothed_predict(det: Classifier, x, noise: NoiseConfig, N: int, alpha: float | None, rng,
                     workers: int = 1) -> int:
    """Majority label under noise; with ``alpha`` set, abstain unless the
    two-sided binomial test is significant."""
    W, U = _as_wu(det, x)
    counts = sample_counts(det, W, U, noise, N, rng, workers=workers)
    top = int(np.argmax(counts))
    if counts[top] * 2 == N:
        return ABSTAIN
    if alpha is not None and binom_two_sided_p(int(counts[top]), N) > alpha:
        return ABSTAIN
    return top


def certify(det: Classifier, x, noise: NoiseConfig, N0: int = 1000, alpha: float = 0.05,
            mode: str = "single", rng=None, n_select: int = 100, workers: int = 1) -> CertifiedResult:
    """Certified label with embedding (l2) and permutation (l1) radii.

    ``single`` mode takes one batch of ``N0`` draws, gates on the two-sided
    binomial test of the vote split, and bounds the majority probability
    from the same draws.  ``two_stage`` picks the class from ``n_select``
    draws and bounds it with ``N0`` fresh ones.
    """
    if N0 < 1:
        raise ValueError("N0 must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if mode not in ("single", "two_stage"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = as_rng(rng)
    W, U = _as_wu(det, x)
    base = dict(N0=N0, alpha=alpha, sigma=noise.sigma, lam=int(noise.lam), mode=mode)
    if mode == "single":
        counts = sample_counts(det, W, U, noise, N0, rng, workers=workers)
        c_a = int(np.argmax(counts))
    else:
        sel = sample_counts(det, W, U, noise, n_select, rng, workers=workers)
        c_a = int(np.argmax(sel))
        counts = sample_counts(det, W, U, noise, N0, rng, workers=workers)
    n_a = int(counts[c_a])
    n_b = int(N0 - n_a)
    p_value = binom_two_sided_p(n_a, N0)
    if p_value > alpha or n_a <= n_b:
        return CertifiedResult(ABSTAIN, p_value, 0.0, 0.0, 0.0, 0.0, n_a, n_b, **base)
    pa = clopper_pearson_lower(n_a, N0, alpha)
    pb = 1.0 - pa
    rad_e, rad_p = radii(noise.sigma, noise.lam, pa, pb)
    return CertifiedResult(c_a, p_value, pa, pb, rad_e, rad_p, n_a, n_b, **base)


def timed_certify(*args, **kwargs) -> tuple[CertifiedResult, float]:
    t0 = time.perf_counter()
    res = certify(*args, **kwargs)
    return res, time.perf_counter() - t0
