"""Byzantine update generators.

Gradient-level attacks replace a Byzantine client's submission. Label
flipping is data-level and lives in :mod:`fpguard.data`; the dispatcher
here leaves gradients alone for it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .fingerprint import DEFAULT_EPSILON, default_k, extract_fingerprint
from .model import GradientUpdate, LayerLayout
from .robust import MAD_FLOOR, mad

ATTACK_KINDS = ("none", "random_noise", "sign_flip", "scaling", "label_flip", "adaptive_pgd")


@dataclass(frozen=True)
class AttackChoice:
    kind: str = "none"
    sigma: float = 1.0
    alpha: float = 1.0
    beta: float = 5.0
    lambda_s: float = 1.0
    lambda_a: float = 1.0
    steps: int = 200
    step_size: float = 0.05  # fraction of the honest reference norm
    decay: float = 0.99
    coords_per_step: int = 256

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if not (self.sigma > 0 and self.alpha > 0 and self.beta > 0):
            raise ConfigurationError("sigma, alpha and beta must be > 0")
        if self.lambda_s < 0 or not self.lambda_a > 0 or self.steps < 1:
            raise ConfigurationError("adaptive attack needs lambda_s >= 0, lambda_a > 0, steps >= 1")
        if not self.step_size > 0 or not 0 < self.decay <= 1 or self.coords_per_step < 1:
            raise ConfigurationError("invalid PGD step settings")


@dataclass(frozen=True)
class AdaptiveAttackResult:
    adversarial: GradientUpdate
    fingerprint_mse: float
    attack_alignment: float


def random_noise_attack(template: GradientUpdate, sigma: float, seed) -> GradientUpdate:
    if not sigma > 0:
        raise ConfigurationError("sigma must be > 0")
    rng = np.random.default_rng(seed)
    return template.replace(rng.normal(0.0, sigma, size=template.values.shape))


def sign_flip_attack(honest: GradientUpdate, alpha: float) -> GradientUpdate:
    if not alpha > 0:
        raise ConfigurationError("alpha must be > 0")
    return honest.replace(-alpha * honest.values)


def scaling_attack(honest: GradientUpdate, beta: float) -> GradientUpdate:
    if not beta > 0:
        raise ConfigurationError("beta must be > 0")
    return honest.replace(beta * honest.values)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def feature_weights(scale) -> np.ndarray:
    """1/scale^2 per feature, 0 where the scale is degenerate."""
    scale = np.asarray(scale, dtype=np.float64)
    w = np.zeros_like(scale)
    ok = scale >= MAD_FLOOR
    w[ok] = 1.0 / scale[ok] ** 2
    return w


def standardized_mse(phi: np.ndarray, ref: np.ndarray, weights: np.ndarray) -> float:
    used = np.count_nonzero(weights)
    if used == 0:
        return 0.0
    return float(np.sum(weights * (phi - ref) ** 2) / used)


class _PerturbedFingerprints:
    """Exact fingerprints of ``g + h e_j`` for many (j, h) in O(1) each.

    Caches the sums the features are built from so a single-coordinate
    change can be applied without touching the other d-1 entries.
    """

    def __init__(self, g: np.ndarray, layout: LayerLayout, epsilon: float, k: int):
        self.g = g
        self.d = g.size
        self.eps = epsilon
        self.k = k
        self.layer_of = layout.layer_index()
        self.L = layout.num_layers
        a = np.abs(g)
        self.a = a
        sq = g * g
        self.s1 = g.sum()
        self.s2 = sq.sum()
        self.s3 = (sq * g).sum()
        self.l1 = a.sum()
        self.layer_sq = np.bincount(self.layer_of, weights=sq, minlength=self.L)
        top2 = np.argsort(a)[-2:] if self.d > 1 else np.array([0, 0])
        self.argmax = int(top2[-1])
        self.max1 = a[top2[-1]]
        self.max2 = a[top2[0]] if self.d > 1 else 0.0
        self.zeros = np.count_nonzero(a < epsilon)
        if k < self.d:
            part = np.argpartition(a, self.d - k)
            self.in_top = np.zeros(self.d, dtype=bool)
            self.in_top[part[self.d - k:]] = True
            self.top_sum = a[self.in_top].sum()
            self.kth = a[self.in_top].min()
            self.next_out = a[~self.in_top].max()

    def features(self, idx: np.ndarray, h: np.ndarray) -> np.ndarray:
        g, d = self.g, self.d
        old = g[idx]
        new = old + h
        old_a, new_a = np.abs(old), np.abs(new)
        s2 = self.s2 - old * old + new * new
        l2 = np.sqrt(np.maximum(s2, 0.0))
        l1 = self.l1 - old_a + new_a
        linf = np.where(idx == self.argmax, np.maximum(new_a, self.max2), np.maximum(self.max1, new_a))

        layer_sq = np.broadcast_to(self.layer_sq, (idx.size, self.L)).copy()
        rows = np.arange(idx.size)
        layer_sq[rows, self.layer_of[idx]] += new * new - old * old
        safe_l2 = np.where(l2 > 0, l2, 1.0)
        ratios = np.where(l2[:, None] > 0, np.sqrt(np.maximum(layer_sq, 0.0)) / safe_l2[:, None], 0.0)

        mu = (self.s1 - old + new) / d
        e2 = s2 / d
        e3 = (self.s3 - old ** 3 + new ** 3) / d
        var = np.maximum(e2 - mu * mu, 0.0)
        m3 = e3 - 3 * mu * e2 + 2 * mu ** 3
        flat = var < 1e-24
        skew = np.where(flat, 0.0, m3 / np.where(flat, 1.0, var) ** 1.5)

        rho = (self.zeros - (old_a < self.eps) + (new_a < self.eps)) / d

        if self.k >= d:
            top = l1
        else:
            member = self.in_top[idx]
            top = np.where(
                member,
                self.top_sum - old_a + np.maximum(new_a, self.next_out),
                np.where(new_a > self.kth, self.top_sum - self.kth + new_a, self.top_sum),
            )
        tau = np.where(l1 > 0, top / np.where(l1 > 0, l1, 1.0), 0.0)
        return np.column_stack([l2, l1, linf, ratios, mu, var, skew, rho, tau])


def perturbed_fingerprints(g: GradientUpdate, idx, h, epsilon=DEFAULT_EPSILON, k=None) -> np.ndarray:
    """Fingerprint rows of ``g`` with coordinate ``idx[r]`` shifted by ``h[r]``."""
    k = default_k(g.values.size) if k is None else k
    cache = _PerturbedFingerprints(g.values, g.layout, epsilon, k)
    return cache.features(np.asarray(idx), np.asarray(h, dtype=np.float64))


def _probe_steps(values: np.ndarray, base: float, epsilon: float) -> np.ndarray:
    """Finite-difference offsets that never straddle the sparsity band.

    A probe pair g_j +/- h where only one side lands in |x| < epsilon turns
    the sparsity count's unit jump into a huge spurious slope. Coordinates
    close to zero get ``h = |g_j| + 2 epsilon`` so both probes leave the band.
    """
    a = np.abs(values)
    return np.where(a < base + epsilon, np.maximum(base, a + 2 * epsilon), base)


def adaptive_pgd_attack(
    honest_ref: GradientUpdate,
    poison_dir: GradientUpdate,
    lambda_s: float,
    lambda_a: float = 1.0,
    steps: int = 200,
    step_size: float = 0.05,
    seed=0,
    *,
    feature_scale=None,
    coords_per_step: int = 256,
    decay: float = 0.99,
    epsilon: float = DEFAULT_EPSILON,
    k: int | None = None,
    init: str = "random",
    callback=None,
) -> AdaptiveAttackResult:
    """White-box attacker trading fingerprint mimicry against poison alignment.

    Minimises ``lambda_s * ||phi(g) - phi(ref)||^2 - lambda_a * cos(g, v)`` on
    the sphere ``||g|| = ||ref||`` by projected descent. Fingerprint distances
    are measured after dividing each feature by ``feature_scale`` (defaults
    to 1). The fingerprint term's gradient is a central finite difference
    over ``coords_per_step`` random coordinates per step, rescaled by
    ``d / coords_per_step``; the cosine term's gradient is analytic. Each
    step moves ``step_size * ||ref||`` along the normalised tangent
    direction, projects back onto the sphere, and shrinks the step length by
    ``decay``.

    ``init="random"`` starts from a seeded random point on the sphere;
    ``init="reference"`` starts from the honest reference itself.
    ``callback(g)``, if given, sees every iterate.
    """
    if lambda_s < 0 or not lambda_a > 0 or steps < 1:
        raise ConfigurationError("need lambda_s >= 0, lambda_a > 0, steps >= 1")
    v = np.asarray(poison_dir.values, dtype=np.float64)
    v_norm = np.linalg.norm(v)
    if v_norm == 0:
        raise ConfigurationError("poison direction must be nonzero")
    ref = honest_ref.values.astype(np.float64)
    radius = np.linalg.norm(ref)
    if radius == 0:
        raise ConfigurationError("honest reference must be nonzero")
    layout = honest_ref.layout
    d = ref.size
    k = default_k(d) if k is None else k
    phi_ref = extract_fingerprint(ref, epsilon, k, layout).features
    scale = np.ones_like(phi_ref) if feature_scale is None else np.asarray(feature_scale, dtype=np.float64)
    weights = feature_weights(scale)
    rng = np.random.default_rng(seed)
    n_coords = min(coords_per_step, d)
    v_unit = v / v_norm

    if init == "random":
        g = rng.normal(size=d)
        g *= radius / np.linalg.norm(g)
    elif init == "reference":
        g = ref.copy()
    else:
        raise ConfigurationError(f"unknown init {init!r}")
    step = step_size * radius
    for _ in range(steps):
        g_norm = np.linalg.norm(g)
        cos = float(g @ v_unit) / g_norm
        grad = -lambda_a * (v_unit / g_norm - cos * g / g_norm ** 2)
        if lambda_s > 0:
            idx = rng.choice(d, size=n_coords, replace=False)
            h = _probe_steps(g[idx], 1e-3 * g_norm / np.sqrt(d), epsilon)
            cache = _PerturbedFingerprints(g, layout, epsilon, k)
            both = cache.features(np.concatenate([idx, idx]), np.concatenate([h, -h]))
            obj = ((both - phi_ref) ** 2) @ weights
            fd = (obj[:n_coords] - obj[n_coords:]) / (2 * h)
            np.add.at(grad, idx, lambda_s * fd * (d / n_coords))
        tangent = grad - (grad @ g) / g_norm ** 2 * g
        t_norm = np.linalg.norm(tangent)
        if t_norm == 0:
            break
        g = g - step * tangent / t_norm
        g *= radius / np.linalg.norm(g)
        step *= decay
        if callback is not None:
            callback(g)

    phi = extract_fingerprint(g, epsilon, k, layout).features
    adv = GradientUpdate(g, layout, honest_ref.client_id, honest_ref.sample_count)
    return AdaptiveAttackResult(adv, standardized_mse(phi, phi_ref, weights), cosine(g, v))


@dataclass
class RoundContext:
    """What a (possibly omniscient) attacker sees in one round."""

    gradients: list[GradientUpdate]
    round_index: int = 0
    seed: int = 0


def honest_statistics(gradients: Sequence[GradientUpdate], byzantine_ids, epsilon=DEFAULT_EPSILON, k=None):
    """Mean honest gradient and per-feature MAD of honest fingerprints."""
    honest = [g for g in gradients if g.client_id not in byzantine_ids]
    if not honest:
        raise ConfigurationError("adaptive attack needs at least one honest client")
    mean = np.mean(np.vstack([g.values for g in honest]), axis=0)
    fps = np.vstack([extract_fingerprint(g, epsilon, k).features for g in honest])
    return honest[0].replace(mean), mad(fps, axis=0), fps


def apply_attack(context: RoundContext, choice: AttackChoice, byzantine_ids) -> list[GradientUpdate]:
    """Replace Byzantine submissions according to ``choice``; honest ones pass through untouched."""
    byz = set(int(b) for b in byzantine_ids)
    ids = {g.client_id for g in context.gradients}
    if not byz <= ids:
        raise ConfigurationError(f"Byzantine ids {sorted(byz - ids)} are not clients")
    if choice.kind not in ATTACK_KINDS:
        raise ConfigurationError(f"unknown attack kind {choice.kind!r}")
    if choice.kind in ("none", "label_flip") or not byz:
        return list(context.gradients)

    adversarial = None
    if choice.kind == "adaptive_pgd":
        ref, scale, _ = honest_statistics(context.gradients, byz)
        if np.linalg.norm(ref.values) == 0:
            return list(context.gradients)
        res = adaptive_pgd_attack(
            ref, ref.replace(-ref.values), choice.lambda_s, choice.lambda_a, choice.steps,
            choice.step_size, seed=[context.seed, context.round_index],
            feature_scale=scale, coords_per_step=choice.coords_per_step, decay=choice.decay,
        )
        adversarial = res.adversarial.values

    out = []
    for g in context.gradients:
        if g.client_id not in byz:
            out.append(g)
        elif choice.kind == "random_noise":
            out.append(random_noise_attack(g, choice.sigma, [context.seed, context.round_index, g.client_id]))
        elif choice.kind == "sign_flip":
            out.append(sign_flip_attack(g, choice.alpha))
        elif choice.kind == "scaling":
            out.append(scaling_attack(g, choice.beta))
        else:
            out.append(g.replace(adversarial.copy()))
    return out
