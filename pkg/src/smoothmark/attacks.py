"""Watermark-removal attacks on reference token sequences and on (W, U)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .rng import as_rng
from .tokenspace import TokenSeq, Vocabulary, is_permutation

EDIT_KINDS = ("delete", "swap", "substitute")
KINDS = EDIT_KINDS + ("copy_paste",)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    fraction: float = 0.0
    seed: int = 0
    n_wm: int = 150
    human_len: int = 600

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "AttackSpec":
        """``kind:fraction`` or ``copy_paste:n_wm:human_len``."""
        parts = text.split(":")
        if parts[0] == "copy_paste":
            n_wm = int(parts[1]) if len(parts) > 1 else 150
            human_len = int(parts[2]) if len(parts) > 2 else 600
            return cls("copy_paste", 0.0, seed, n_wm, human_len)
        return cls(parts[0], float(parts[1]) if len(parts) > 1 else 0.0, seed)


@lru_cache(maxsize=8)
def nearest_neighbors(vocab: Vocabulary) -> np.ndarray:
    """For every id (OOV buckets included) the closest in-vocabulary id other than itself."""
    V = vocab.vectors
    T = vocab.table
    sq_v = (V ** 2).sum(axis=1)
    out = np.empty(T.shape[0], dtype=np.int64)
    for start in range(0, T.shape[0], 512):
        rows = T[start: start + 512]
        d2 = (rows ** 2).sum(axis=1)[:, None] - 2.0 * rows @ V.T + sq_v[None, :]
        ids = np.arange(start, start + rows.shape[0])
        own = ids < vocab.size
        d2[np.nonzero(own)[0], ids[own]] = np.inf
        out[start: start + rows.shape[0]] = np.argmin(d2, axis=1)
    return out


def apply_edit(seq: TokenSeq, spec: AttackSpec, vocab: Vocabulary | None = None, rng=None) -> TokenSeq:
    """Delete, swap or substitute ``floor(fraction * n)`` tokens.

    ``swap`` performs that many random adjacent transpositions;
    ``substitute`` replaces distinct positions with their nearest embedding
    neighbour.
    """
    rng = as_rng(spec.seed if rng is None else rng)
    ids = list(seq.ids)
    n = len(ids)
    m = math.floor(spec.fraction * n)
    if m == 0 or n == 0:
        return TokenSeq(tuple(ids), seq.namespace)
    if spec.kind == "delete":
        drop = set(rng.choice(n, size=m, replace=False).tolist())
        ids = [t for i, t in enumerate(ids) if i not in drop]
    elif spec.kind == "swap":
        if n >= 2:
            for i in rng.integers(0, n - 1, size=m):
                ids[i], ids[i + 1] = ids[i + 1], ids[i]
    elif spec.kind == "substitute":
        if vocab is None:
            raise ValueError("substitution needs the reference vocabulary")
        nn = nearest_neighbors(vocab)
        for i in rng.choice(n, size=m, replace=False):
            ids[i] = int(nn[ids[i]])
    else:
        raise ValueError(f"{spec.kind!r} is not an edit attack")
    return TokenSeq(tuple(ids), seq.namespace)


def copy_paste(wm: TokenSeq, human: TokenSeq, n_wm: int, human_len: int, rng=None) -> tuple[TokenSeq, int]:
    """Insert a contiguous ``n_wm``-token watermarked block into ``human_len`` human tokens.

    Returns the attacked sequence and the offset of the block.
    """
    if n_wm < 0 or human_len < 0:
        raise ValueError("lengths must be non-negative")
    if len(wm) < n_wm or len(human) < human_len:
        raise ValueError(f"insufficient material: |wm|={len(wm)} < {n_wm} or |human|={len(human)} < {human_len}")
    rng = as_rng(rng)
    src = int(rng.integers(0, len(wm) - n_wm + 1))
    block = wm.ids[src: src + n_wm]
    at = int(rng.integers(0, human_len + 1))
    h = human.ids[:human_len]
    return TokenSeq(h[:at] + block + h[at:], wm.namespace), at


def permutation_displacement(U: np.ndarray, U2: np.ndarray) -> int:
    """l1 displacement ``sum_i |U2_i - U_i|`` between two arrangements."""
    U = np.asarray(U, dtype=np.int64)
    U2 = np.asarray(U2, dtype=np.int64)
    if U.shape != U2.shape:
        raise ValueError("arrangements differ in length")
    if not (is_permutation(U) and is_permutation(U2)):
        raise ValueError("arguments must be permutations")
    return int(np.abs(U2 - U).sum())


# --- perturbations inside a certified region ---------------------------------

def gaussian_direction(shape: tuple[int, ...], norm: float, rng) -> np.ndarray:
    """Random isotropic direction scaled to Frobenius norm ``norm``."""
    g = as_rng(rng).standard_normal(shape)
    return g * (norm / np.linalg.norm(g))


def bounded_group_shuffle(U: np.ndarray, lam: int, budget: float, rng, max_swaps: int | None = None) -> np.ndarray:
    """Adjacent swaps of target positions inside length-``lam`` groups.

    Swaps are applied while the l1 displacement from ``U`` stays strictly
    below ``budget``; the result is a grouped shuffle of ``U``.
    """
    rng = as_rng(rng)
    U = np.asarray(U, dtype=np.int64)
    n = U.size
    out = U.copy()
    if lam < 2 or n < 2 or budget <= 2:
        return out
    where = np.empty(n, dtype=np.int64)
    where[out] = np.arange(n)
    max_swaps = max_swaps if max_swaps is not None else int(budget)
    cur = 0
    for _ in range(max_swaps):
        p = int(rng.integers(0, n - 1))
        if p // lam != (p + 1) // lam:
            continue
        i, j = where[p], where[p + 1]
        new = cur - abs(out[i] - U[i]) - abs(out[j] - U[j]) + abs(p + 1 - U[i]) + abs(p - U[j])
        if new >= budget:
            continue
        out[i], out[j] = p + 1, p
        where[p], where[p + 1] = j, i
        cur = new
    return out
