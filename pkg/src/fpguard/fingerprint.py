"""Statistical fingerprints of flat update vectors.

Feature order (frozen, append-only):

    l2, l1, linf, ratio_1 .. ratio_L, mean, variance, skewness, sparsity, topk

so a fingerprint has ``L + 8`` entries for a layout with ``L`` segments.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError
from .model import GradientUpdate, LayerLayout

DEFAULT_EPSILON = 1e-6
SKEW_VARIANCE_FLOOR = 1e-24


def feature_names(num_layers: int) -> list[str]:
    return (
        ["l2", "l1", "linf"]
        + [f"ratio_{l + 1}" for l in range(num_layers)]
        + ["mean", "variance", "skewness", "sparsity", "topk"]
    )


def num_features(num_layers: int) -> int:
    return num_layers + 8


def default_k(dim: int) -> int:
    return max(1, math.ceil(0.01 * dim))


@dataclass(frozen=True)
class Fingerprint:
    features: np.ndarray
    layout_L: int

    def __post_init__(self):
        if self.features.shape != (num_features(self.layout_L),):
            raise ConfigurationError(f"fingerprint for L={self.layout_L} needs {num_features(self.layout_L)} features")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(feature_names(self.layout_L), map(float, self.features)))


def _values(g) -> np.ndarray:
    return np.asarray(g.values if isinstance(g, GradientUpdate) else g, dtype=np.float64)


def compute_norms(g) -> tuple[float, float, float]:
    v = _values(g)
    if v.size == 0:
        return 0.0, 0.0, 0.0
    a = np.abs(v)
    return float(np.sqrt(v @ v)), float(a.sum()), float(a.max())


def compute_layer_ratios(g, layout: LayerLayout | None = None) -> np.ndarray:
    """Per-layer L2 share ``|g_l| / |g|``; all zeros for a zero vector."""
    if layout is None:
        layout = g.layout
    v = _values(g)
    per_layer = np.array([np.sqrt(part @ part) for part in layout.split(v)])
    total = np.sqrt(v @ v)
    if total == 0.0:
        return np.zeros(layout.num_layers)
    return per_layer / total


def compute_moments(g) -> tuple[float, float, float]:
    """Population mean, variance and skewness (skewness 0 for near-constant vectors)."""
    v = _values(g)
    if v.size == 0:
        raise ConfigurationError("moments need d >= 1")
    mu = float(v.mean())
    c = v - mu
    var = float(c @ c) / v.size
    if var < SKEW_VARIANCE_FLOOR:
        return mu, var, 0.0
    skew = float((c * c) @ c) / (v.size * var ** 1.5)
    return mu, var, skew


def compute_sparsity(g, epsilon: float = DEFAULT_EPSILON) -> float:
    if epsilon <= 0:
        raise ConfigurationError("sparsity threshold must be > 0")
    v = _values(g)
    return float(np.count_nonzero(np.abs(v) < epsilon)) / v.size


def compute_topk_concentration(g, k: int) -> float:
    """Share of the L1 mass held by the k largest magnitudes (0 for a zero vector)."""
    v = _values(g)
    if not 1 <= k <= v.size:
        raise ConfigurationError(f"top-k needs 1 <= k <= d, got k={k}, d={v.size}")
    a = np.abs(v)
    l1 = a.sum()
    if l1 == 0.0:
        return 0.0
    if k == v.size:
        return 1.0
    top = np.partition(a, v.size - k)[v.size - k:]
    return float(top.sum() / l1)


def extract_fingerprint(
    g,
    epsilon: float = DEFAULT_EPSILON,
    k: int | None = None,
    layout: LayerLayout | None = None,
) -> Fingerprint:
    if layout is None:
        layout = g.layout
    v = _values(g)
    if k is None:
        k = default_k(v.size)
    l2, l1, linf = compute_norms(v)
    ratios = compute_layer_ratios(v, layout)
    mu, var, skew = compute_moments(v)
    rho = compute_sparsity(v, epsilon)
    tau = compute_topk_concentration(v, k)
    feats = np.concatenate([[l2, l1, linf], ratios, [mu, var, skew, rho, tau]])
    return Fingerprint(feats, layout.num_layers)


def fingerprint_matrix(
    updates: Sequence[GradientUpdate], epsilon: float = DEFAULT_EPSILON, k: int | None = None
) -> np.ndarray:
    """Stack fingerprints of ``updates`` into an (n, L+8) array."""
    return np.vstack([extract_fingerprint(u, epsilon, k).features for u in updates])


def write_fingerprints_csv(path, client_ids: Iterable[int], fingerprints: Sequence[Fingerprint]) -> None:
    fingerprints = list(fingerprints)
    if not fingerprints:
        raise ConfigurationError("nothing to write")
    names = feature_names(fingerprints[0].layout_L)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client_id", *names])
        for cid, fp in zip(client_ids, fingerprints):
            w.writerow([int(cid), *(repr(float(x)) for x in fp.features)])


def read_fingerprints_csv(path) -> tuple[list[int], list[Fingerprint]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    L = len(header) - 1 - 8
    ids = [int(r[0]) for r in body]
    fps = [Fingerprint(np.array([float(x) for x in r[1:]]), L) for r in body]
    return ids, fps
