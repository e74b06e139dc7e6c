"""Reference aggregation rules: FedAvg, (Multi-)Krum, trimmed mean,
coordinate-wise median and FoolsGold."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .model import GradientUpdate
from .robust import lower_median

FOOLSGOLD_WEIGHT_FLOOR = 1e-5
AGGREGATOR_KINDS = ("fedavg", "tinyguard", "krum", "multikrum", "trimmed_mean", "coord_median", "foolsgold")


@dataclass(frozen=True)
class AggregatorChoice:
    """Which aggregation rule a run uses, plus its knobs.

    ``krum_f=None`` means ceil(0.2 n); ``multikrum_m=None`` means n - f;
    ``foolsgold_window=None`` keeps the whole history.
    """

    kind: str = "tinyguard"
    krum_f: int | None = None
    multikrum_m: int | None = None
    trim_fraction: float = 0.2
    foolsgold_window: int | None = None

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigurationError(f"unknown defense {self.kind!r}; expected one of {AGGREGATOR_KINDS}")
        if not 0 <= self.trim_fraction < 0.5:
            raise ConfigurationError(f"trim fraction must be in [0, 0.5), got {self.trim_fraction}")
        if self.krum_f is not None and self.krum_f < 0:
            raise ConfigurationError("krum f must be >= 0")
        if self.multikrum_m is not None and self.multikrum_m < 1:
            raise ConfigurationError("multikrum m must be >= 1")
        if self.foolsgold_window is not None and self.foolsgold_window < 1:
            raise ConfigurationError("foolsgold window must be >= 1")

    def resolved_f(self, n: int) -> int:
        return default_krum_f(n) if self.krum_f is None else self.krum_f

    def resolved_m(self, n: int) -> int:
        if self.kind == "krum":
            return 1
        return n - self.resolved_f(n) if self.multikrum_m is None else self.multikrum_m

    def check_clients(self, n: int) -> None:
        """Raise if this rule cannot run with n clients."""
        if self.kind in ("krum", "multikrum"):
            f = self.resolved_f(n)
            if n < 2 * f + 3:
                raise ConfigurationError(f"Krum needs n >= 2f+3 (n={n}, f={f})")
            if not 1 <= self.resolved_m(n) <= n:
                raise ConfigurationError(f"Multi-Krum needs 1 <= m <= n (n={n})")
        if self.kind == "trimmed_mean" and n - 2 * math.floor(self.trim_fraction * n) < 1:
            raise ConfigurationError(f"trim fraction {self.trim_fraction} leaves nothing of {n}")


def _stack(gradients: Sequence[GradientUpdate]) -> np.ndarray:
    if not gradients:
        raise ConfigurationError("no gradients to aggregate")
    layout = gradients[0].layout
    if any(g.layout != layout for g in gradients):
        raise DimensionError("gradients have different layouts")
    return np.vstack([g.values for g in gradients])


def _result(values: np.ndarray, gradients: Sequence[GradientUpdate], samples: int | None = None) -> GradientUpdate:
    if samples is None:
        samples = sum(g.sample_count for g in gradients)
    return GradientUpdate(values, gradients[0].layout, client_id=-1, sample_count=samples)


def fedavg_mean(gradients: Sequence[GradientUpdate], weights=None) -> GradientUpdate:
    """Coordinate mean, optionally weighted (e.g. by sample counts)."""
    gradients = list(gradients)
    mat = _stack(gradients)
    if weights is None:
        return _result(np.mean(mat, axis=0), gradients)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(gradients),):
        raise DimensionError(f"{w.size} weights for {len(gradients)} gradients")
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigurationError("weights must be non-negative with a positive sum")
    return _result((w / w.sum()) @ mat, gradients)


def default_krum_f(n: int, fraction: float = 0.2) -> int:
    return math.ceil(fraction * n)


def pairwise_sq_distances(mat: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, computed row by row (O(n^2 d))."""
    n = mat.shape[0]
    out = np.zeros((n, n))
    for i in range(n - 1):
        diff = mat[i + 1:] - mat[i]
        d2 = np.einsum("ij,ij->i", diff, diff)
        out[i, i + 1:] = d2
        out[i + 1:, i] = d2
    return out


def krum_scores(mat: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances to each row's n-f-2 nearest other rows."""
    n = mat.shape[0]
    dist = pairwise_sq_distances(mat)
    closest = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(dist[i], i)
        scores[i] = np.sort(others)[:closest].sum()
    return scores


def krum_select(gradients: Sequence[GradientUpdate], f: int, m: int = 1) -> list[int]:
    """Positions of the m lowest-scoring gradients, ties to the lower client_id."""
    gradients = list(gradients)
    n = len(gradients)
    if f < 0:
        raise ConfigurationError("f must be >= 0")
    if n < 2 * f + 3:
        raise ConfigurationError(f"Krum needs n >= 2f+3 (n={n}, f={f})")
    if not 1 <= m <= n:
        raise ConfigurationError(f"Multi-Krum needs 1 <= m <= n, got m={m}")
    scores = krum_scores(_stack(gradients), f)
    ids = np.array([g.client_id for g in gradients])
    order = np.lexsort((ids, scores))
    return [int(i) for i in order[:m]]


def krum(gradients: Sequence[GradientUpdate], f: int, m: int = 1) -> GradientUpdate:
    """Krum (m=1) or Multi-Krum (mean of the m best-scored gradients)."""
    gradients = list(gradients)
    chosen = krum_select(gradients, f, m)
    if m == 1:
        g = gradients[chosen[0]]
        return _result(g.values.copy(), gradients, g.sample_count)
    picked = [gradients[i] for i in chosen]
    return _result(np.mean(_stack(picked), axis=0), gradients, sum(g.sample_count for g in picked))


def trimmed_mean(gradients: Sequence[GradientUpdate], trim_fraction: float = 0.2) -> GradientUpdate:
    gradients = list(gradients)
    if not 0 <= trim_fraction < 0.5:
        raise ConfigurationError(f"trim fraction must be in [0, 0.5), got {trim_fraction}")
    mat = _stack(gradients)
    n = mat.shape[0]
    cut = math.floor(trim_fraction * n)
    if n - 2 * cut < 1:
        raise ConfigurationError(f"trimming {cut} per side leaves nothing of {n}")
    if cut == 0:
        return _result(np.mean(mat, axis=0), gradients)
    return _result(np.sort(mat, axis=0)[cut:n - cut].mean(axis=0), gradients)


def coord_median(gradients: Sequence[GradientUpdate]) -> GradientUpdate:
    gradients = list(gradients)
    return _result(lower_median(_stack(gradients), axis=0), gradients)


def foolsgold_weights(history: np.ndarray) -> np.ndarray:
    """FoolsGold client weights from accumulated update histories (one row each).

    Cosine similarity, pardoning of clients that are less similar than their
    most-similar peer, ``1 - max similarity``, rescaling so the best client
    sits at 0.99, then the logit ``ln(w / (1 - w)) + 0.5`` clipped to [0, 1].
    Weights never go below ``FOOLSGOLD_WEIGHT_FLOOR``.
    """
    n = history.shape[0]
    if n == 1:
        return np.ones(1)
    norms = np.linalg.norm(history, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = history / safe[:, None]
    cs = unit @ unit.T
    np.fill_diagonal(cs, 0.0)
    maxcs = cs.max(axis=1)
    # pardon i towards j when j is the more suspicious of the pair
    ratio = np.ones_like(cs)
    pardon = (maxcs[:, None] < maxcs[None, :]) & (maxcs[None, :] > 0)
    ratio[pardon] = (maxcs[:, None] / np.where(maxcs > 0, maxcs, 1.0)[None, :])[pardon]
    np.fill_diagonal(ratio, 1.0)
    cs = cs * ratio
    np.fill_diagonal(cs, -np.inf)
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    # rounding leaves ~1e-16 for identical histories; the rescale below would blow that up to 1
    wv[wv < 1e-12] = 0.0
    top = wv.max()
    if top > 0:
        wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        logit = np.log(wv / (1.0 - wv)) + 0.5
    wv = np.clip(np.nan_to_num(logit, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)
    return np.maximum(wv, FOOLSGOLD_WEIGHT_FLOOR)


class FoolsGold:
    """Stateful FoolsGold aggregator keyed by client id.

    Weights for a round come from the histories accumulated over previous
    rounds; the round's own updates are added afterwards. With no history
    yet every client gets the same weight. A ``window`` limits each history
    to the most recent rounds.
    """

    def __init__(self, window: int | None = None):
        self.window = window
        self.history: dict[int, np.ndarray] = {}
        self.recent: dict[int, deque] = {}
        self.last_weights: np.ndarray | None = None

    def aggregate(self, gradients: Sequence[GradientUpdate]) -> GradientUpdate:
        gradients = list(gradients)
        if self.window is None:
            out, self.last_weights = foolsgold(gradients, self.history)
            return out
        sums = {cid: np.sum(rows, axis=0) for cid, rows in self.recent.items()}
        out, self.last_weights = foolsgold(gradients, sums)
        for g in gradients:
            self.recent.setdefault(g.client_id, deque(maxlen=self.window)).append(g.values.copy())
        return out


def foolsgold(gradients: Sequence[GradientUpdate], history: dict[int, np.ndarray]):
    """One FoolsGold round; mutates ``history`` in place.

    Returns ``(aggregate, weights)``.
    """
    gradients = list(gradients)
    mat = _stack(gradients)
    ids = [g.client_id for g in gradients]
    if all(cid not in history for cid in ids):
        weights = np.ones(len(ids))
    else:
        hist = np.vstack([history.get(cid, np.zeros(mat.shape[1])) for cid in ids])
        weights = foolsgold_weights(hist)
    for cid, row in zip(ids, mat):
        history[cid] = history[cid] + row if cid in history else row.copy()
    w = weights / weights.sum()
    return _result(w @ mat, gradients), weights
