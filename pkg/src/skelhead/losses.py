"""Classification loss plus the two auxiliary feature losses.

All features entering the auxiliary losses are flattened per sample (one
vector per sample and channel group).  Distances use the modified cosine
distance ``d(u, v) = 1 - exp(-alpha * (cos(u, v) + 1))``, which grows with
similarity and lies in ``[0, 1 - exp(-2 alpha)]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .sfhead import SFHeadFeatures
from .tensor import Tensor

__all__ = [
    "LossConfig",
    "LossBreakdown",
    "modified_cosine_distance",
    "pairwise_distance",
    "feature_redundancy_loss",
    "redundancy_from_distances",
    "compensation_term",
    "consistency_terms",
    "feature_consistency_loss",
    "cross_entropy",
    "total_loss",
]

NORM_GUARD = 1e-12


@dataclass
class LossConfig:
    alpha: float = 1.0
    tau: float = 1.0
    m_scale: float = 0.4
    m_margin: float = 0.4
    gamma: float = 2.0
    epsilon: float = 0.05
    lambda_con: float = 0.2
    lambda_red: float = 0.1
    frl_literal: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.m_margin <= 0:
            raise ValueError("m_margin must be > 0")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.lambda_con < 0 or self.lambda_red < 0:
            raise ValueError("loss weights must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    ce: Tensor
    con: Tensor
    red: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("ce", "con", "red", "total")}


def _flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, D); a tensor without batch axis becomes one row."""
    if x.ndim <= 1:
        return T.reshape(x, (1, -1))
    return T.reshape(x, (x.shape[0], -1))


def _cos_to_distance(cos: Tensor, alpha: float) -> Tensor:
    return T.sub(1.0, T.exp(T.mul(T.add(cos, 1.0), -alpha)))


def modified_cosine_distance(u: Tensor, v: Tensor, alpha: float = 1.0) -> Tensor:
    """Row-wise distance between matching rows of ``u`` and ``v`` (last axis is the vector)."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {v.shape}")
    nu = T.add(T.l2_norm(u, -1), NORM_GUARD)
    nv = T.add(T.l2_norm(v, -1), NORM_GUARD)
    cos = T.div(T.sum_axis(T.mul(u, v), -1), T.mul(nu, nv))
    return _cos_to_distance(cos, alpha)


def pairwise_distance(u: Tensor, v: Tensor, alpha: float = 1.0) -> Tensor:
    """(N, D) x (M, D) -> (N, M) matrix of d(u_i, v_j)."""
    un = T.div(u, T.reshape(T.add(T.l2_norm(u, -1), NORM_GUARD), (-1, 1)))
    vn = T.div(v, T.reshape(T.add(T.l2_norm(v, -1), NORM_GUARD), (-1, 1)))
    cos = T.matmul(un, T.permute(vn, (1, 0)))
    return _cos_to_distance(cos, alpha)


def redundancy_from_distances(dist: Tensor, cfg: LossConfig) -> Tensor:
    """-(1/2N) sum_i log softmax_j(m * d_ij / tau)[i] for an (N, N) distance matrix.

    Row ``i`` holds d(f_s^i, f_t^j).  With ``cfg.frl_literal`` every
    denominator term uses the matched distance d_ii instead, which makes the
    loss the constant log(N)/2.
    """
    n = dist.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    logits = T.mul(dist, cfg.m_scale / cfg.tau)
    eye = np.eye(n, dtype=bool)
    diag = T.sum_axis(T.where(eye, logits, 0.0), 1)
    if cfg.frl_literal:
        logits = T.mul(T.reshape(diag, (n, 1)), np.ones((1, n), dtype=dist.dtype))
    lse = T.logsumexp_lastdim(logits)
    return T.mul(T.sum_axis(T.sub(lse, diag)), 1.0 / (2 * n))


def feature_redundancy_loss(f_s: Tensor, f_t: Tensor, cfg: LossConfig) -> Tensor:
    """Batch contrast between each sample's spatial and temporal features."""
    fs, ft = _flatten(f_s), _flatten(f_t)
    return redundancy_from_distances(pairwise_distance(fs, ft, cfg.alpha), cfg)


def compensation_term(d: Tensor, cfg: LossConfig) -> Tensor:
    """(1 - d)^gamma * log(d) where min(d, 1 - d) > epsilon, else exactly 0.

    The gate is a constant mask: no gradient flows through it.
    """
    mask = np.minimum(d.data, 1.0 - d.data) > cfg.epsilon
    safe = T.where(mask, d, 0.5)
    active = T.mul(T.power(T.sub(1.0, safe), cfg.gamma), T.log(safe))
    return T.where(mask, active, 0.0)


def consistency_terms(d: Tensor, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Soft-margin base term log(e^m + (1 - e^m) d) and the compensation term."""
    em = math.exp(cfg.m_margin)
    base = T.log(T.add(T.mul(d, 1.0 - em), em))
    return base, compensation_term(d, cfg)


def feature_consistency_loss(bundles: Sequence[SFHeadFeatures], cfg: LossConfig) -> Tensor:
    """Mean over samples of sum over F = [f_c, f_s, f_t, f_o] of base + compensation.

    Each bundle holds one channel group for a whole batch; the per-bundle
    losses are averaged so the magnitude does not depend on the group count.
    """
    if not bundles:
        raise ValueError("no feature bundles")
    total: Tensor | None = None
    for b in bundles:
        fa = _flatten(b.f_a)
        per_sample: Tensor | None = None
        for member in b.members():
            base, phi = consistency_terms(modified_cosine_distance(fa, _flatten(member), cfg.alpha), cfg)
            term = T.add(base, phi)
            per_sample = term if per_sample is None else T.add(per_sample, term)
        loss = T.reduce_mean_axis(per_sample, 0)
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, 1.0 / len(bundles))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, z = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z:
        raise ValueError(f"label out of range for {z} classes")
    onehot = np.zeros((n, z), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    logp = T.log_softmax_lastdim(logits)
    return T.mul(T.sum_axis(T.mul(logp, onehot)), -1.0 / n)


def total_loss(ce: Tensor, con: Tensor, red: Tensor, cfg: LossConfig) -> LossBreakdown:
    """ce + lambda_con * con + lambda_red * red."""
    for name, value in (("ce", ce), ("con", con), ("red", red)):
        if not np.all(np.isfinite(value.data)):
            raise FloatingPointError(f"non-finite {name} loss")
    total = T.add(T.add(ce, T.mul(con, cfg.lambda_con)), T.mul(red, cfg.lambda_red))
    return LossBreakdown(ce, con, red, total)
