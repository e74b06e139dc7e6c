"""Fingerprint-based Byzantine filtering in front of a plain mean.

Pipeline per round:

1. fingerprint every update,
2. take the coordinate-wise median fingerprint as the centroid and score
   each client by its distance to it,
3. normalise scores with median/MAD and flag scores above
   ``median + lambda * MAD`` of the normalised scores,
4. average the unflagged updates with equal weights.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError
from .fingerprint import DEFAULT_EPSILON, Fingerprint, extract_fingerprint
from .model import GradientUpdate
from .robust import MAD_FLOOR, lower_median, mad


@dataclass(frozen=True)
class DetectorConfig:
    lam: float = 2.5
    standardize_features: bool = True
    epsilon: float = DEFAULT_EPSILON
    k: int | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be > 0, got {self.lam}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.k is not None and self.k < 1:
            raise ConfigurationError("k must be >= 1")


@dataclass
class AnomalyReport:
    client_ids: list[int]
    raw_scores: np.ndarray
    normalized_scores: np.ndarray
    threshold: float
    flagged: set[int]
    centroid: Fingerprint
    fallback: bool = False
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "client_ids": [int(c) for c in self.client_ids],
            "raw_scores": [float(s) for s in self.raw_scores],
            "normalized_scores": [float(s) for s in self.normalized_scores],
            "threshold": float(self.threshold),
            "flagged": sorted(int(c) for c in self.flagged),
            "centroid": [float(x) for x in self.centroid.features],
            "fallback": self.fallback,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _as_matrix(fingerprints) -> tuple[np.ndarray, int]:
    if isinstance(fingerprints, np.ndarray):
        mat = np.atleast_2d(fingerprints)
        return mat, mat.shape[1] - 8
    fingerprints = list(fingerprints)
    if not fingerprints:
        raise ConfigurationError("need at least one fingerprint")
    lengths = {fp.features.shape[0] for fp in fingerprints}
    if len(lengths) != 1:
        raise DimensionError(f"fingerprints have mixed lengths {sorted(lengths)}")
    return np.vstack([fp.features for fp in fingerprints]), fingerprints[0].layout_L


def robust_centroid(fingerprints) -> Fingerprint:
    """Coordinate-wise lower median of the fingerprints."""
    mat, L = _as_matrix(fingerprints)
    return Fingerprint(np.asarray(lower_median(mat, axis=0), dtype=np.float64).reshape(-1), L)


def anomaly_scores(fingerprints, centroid: Fingerprint, standardize: bool = True) -> np.ndarray:
    """Euclidean distance of each fingerprint to the centroid.

    With ``standardize`` every feature column is rescaled to
    ``(x - median) / MAD`` first; columns whose MAD is below 1e-12 carry no
    spread and are left out. The centroid maps to the origin in that space.
    """
    mat, _ = _as_matrix(fingerprints)
    diff = mat - centroid.features
    if standardize:
        scale = mad(mat, axis=0)
        keep = scale >= MAD_FLOOR
        diff = diff[:, keep] / scale[keep]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def normalize_scores(raw) -> np.ndarray:
    """(s - median(s)) / MAD(s); all zeros when MAD(s) < 1e-12."""
    raw = np.asarray(raw, dtype=np.float64)
    spread = mad(raw)
    if spread < MAD_FLOOR:
        return np.zeros_like(raw)
    return (raw - lower_median(raw)) / spread


def adaptive_threshold(normalized, lam: float) -> float:
    if not lam > 0:
        raise ConfigurationError(f"lambda must be > 0, got {lam}")
    normalized = np.asarray(normalized, dtype=np.float64)
    return float(lower_median(normalized) + lam * mad(normalized))


def detect(fingerprints, lam: float, standardize: bool = True):
    """Centroid, raw scores, normalised scores, threshold and flag mask."""
    centroid = robust_centroid(fingerprints)
    raw = anomaly_scores(fingerprints, centroid, standardize)
    norm = normalize_scores(raw)
    tau = adaptive_threshold(norm, lam)
    return centroid, raw, norm, tau, norm > tau


def tinyguard_aggregate(
    gradients: Sequence[GradientUpdate], config: DetectorConfig = DetectorConfig()
) -> tuple[GradientUpdate, AnomalyReport]:
    """Filter updates by fingerprint outlyingness, then average the rest unweighted."""
    gradients = list(gradients)
    if not gradients:
        raise ConfigurationError("no gradients to aggregate")
    layout = gradients[0].layout
    if any(g.layout != layout for g in gradients):
        raise DimensionError("gradients have different layouts")

    t0 = time.perf_counter()
    fps = [extract_fingerprint(g, config.epsilon, config.k) for g in gradients]
    t1 = time.perf_counter()
    centroid, raw, norm, tau, mask = detect(fps, config.lam, config.standardize_features)
    t2 = time.perf_counter()

    fallback = bool(mask.all())
    if fallback:
        mask = np.zeros_like(mask)
    keep = np.flatnonzero(~mask)
    agg = np.mean(np.vstack([gradients[i].values for i in keep]), axis=0)
    samples = sum(gradients[i].sample_count for i in keep)
    t3 = time.perf_counter()

    ids = [g.client_id for g in gradients]
    report = AnomalyReport(
        client_ids=ids,
        raw_scores=raw,
        normalized_scores=norm,
        threshold=tau,
        flagged={ids[i] for i in np.flatnonzero(mask)},
        centroid=centroid,
        fallback=fallback,
        timings={
            "extraction_ms": 1e3 * (t1 - t0),
            "scoring_ms": 1e3 * (t2 - t1),
            "aggregation_ms": 1e3 * (t3 - t2),
        },
    )
    return GradientUpdate(agg, layout, client_id=-1, sample_count=samples), report
