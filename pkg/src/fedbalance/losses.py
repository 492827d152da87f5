"""Pluggable classification losses returning values and logit gradients.

Every loss exposes a single-sample form matching its definition plus a
vectorized batch form used by the training loop. Gradients are taken with
respect to the logits (pre-softmax), so a model update needs no extra
softmax Jacobian handling. Batch forms return per-sample losses whose
mean is the batch objective, and per-sample logit gradients whose mean
feeds backpropagation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericWarning

LOSS_KINDS = ("ce", "ratio", "focal", "ghmc", "mse", "mfe")

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class RatioVector:
    """Per-class gradient-magnitude ratios broadcast for loss scaling.

    ``ra[p]`` is the absolute mean of class p's own-node update ratios;
    large values mark classes whose updates the aggregate round barely
    reflects, i.e. under-represented classes.
    """

    ra: np.ndarray
    round_updated: int = 0

    def __post_init__(self) -> None:
        ra = np.asarray(self.ra, dtype=np.float64)
        object.__setattr__(self, "ra", ra)
        if ra.ndim != 1:
            raise ValueError("ratio vector must be 1-D")
        if not np.isfinite(ra).all() or (ra < 0).any():
            raise ValueError("ratio entries must be finite and non-negative")

    @classmethod
    def neutral(cls, class_count: int) -> "RatioVector":
        return cls(np.ones(class_count), round_updated=0)


@dataclass
class LossConfig:
    kind: str = "ce"
    alpha: float = 1.0
    beta: float = 0.1
    focal_gamma: float = 2.0
    ghmc_bins: int = 10
    ghmc_momentum: float = 0.75
    minority_set: tuple[int, ...] | None = None
    # apply the ratio-scaled loss from round 1 instead of waiting for the
    # detector to fire
    ratio_from_start: bool = False
    # ceiling on the per-class ratio as used for loss scaling; a starved
    # class's measured ratio can run to 1e3 and beyond, and an unbounded
    # linear weight destabilizes SGD
    ratio_cap: float | None = 50.0

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.ghmc_bins < 1:
            raise ConfigError("ghmc_bins must be >= 1")
        if not 0.0 <= self.ghmc_momentum < 1.0:
            raise ConfigError("ghmc_momentum must be in [0, 1)")
        if self.ratio_cap is not None and self.ratio_cap <= 0:
            raise ConfigError("ratio_cap must be positive or None")


def _clamped_log_prob(p: np.ndarray) -> np.ndarray:
    if (p < PROB_FLOOR).any():
        warnings.warn(
            f"probability below {PROB_FLOOR} clamped before log", NumericWarning
        )
        p = np.maximum(p, PROB_FLOOR)
    return np.log(p)


def _check_labels(probs: np.ndarray, labels: np.ndarray) -> None:
    q = probs.shape[1]
    if labels.min() < 0 or labels.max() >= q:
        raise IndexError(f"class index out of range for {q} classes")


def ce_batch(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy: loss -log f_p, logit gradient probs - onehot."""
    _check_labels(probs, labels)
    n = probs.shape[0]
    rows = np.arange(n)
    losses = -_clamped_log_prob(probs[rows, labels])
    grads = probs.copy()
    grads[rows, labels] -= 1.0
    return losses, grads


def ce_loss(probs: np.ndarray, true_class: int) -> tuple[float, np.ndarray]:
    losses, grads = ce_batch(np.asarray(probs, dtype=np.float64)[None, :], np.array([true_class]))
    return float(losses[0]), grads[0]


def ratio_batch(
    probs: np.ndarray,
    labels: np.ndarray,
    ratios: RatioVector,
    cfg: LossConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy scaled per class by (alpha + beta * Ra_p)."""
    if ratios.ra.shape[0] != probs.shape[1]:
        raise ValueError(
            f"ratio vector length {ratios.ra.shape[0]} != class count {probs.shape[1]}"
        )
    losses, grads = ce_batch(probs, labels)
    ra = ratios.ra
    if cfg.ratio_cap is not None:
        ra = np.minimum(ra, cfg.ratio_cap)
    factor = cfg.alpha + cfg.beta * ra[labels]
    return factor * losses, factor[:, None] * grads


def ratio_loss(
    probs: np.ndarray, true_class: int, ratios: RatioVector, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    losses, grads = ratio_batch(
        np.asarray(probs, dtype=np.float64)[None, :], np.array([true_class]), ratios, cfg
    )
    return float(losses[0]), grads[0]


def focal_batch(
    probs: np.ndarray, labels: np.ndarray, cfg: LossConfig
) -> tuple[np.ndarray, np.ndarray]:
    """-(1 - f_p)^gamma * log f_p with the analytic logit gradient.

    d loss/d z_j factors through d f_p/d z_j = f_p (delta_jp - f_j).
    """
    _check_labels(probs, labels)
    g = cfg.focal_gamma
    n = probs.shape[0]
    rows = np.arange(n)
    fp = probs[rows, labels]
    log_fp = _clamped_log_prob(fp)
    one_minus = 1.0 - fp
    losses = -np.power(one_minus, g) * log_fp
    # d loss / d f_p; the gamma=0 case reduces to -1/f_p (cross-entropy)
    if g == 0.0:
        dl_dfp = -1.0 / np.maximum(fp, PROB_FLOOR)
    else:
        dl_dfp = g * np.power(one_minus, g - 1.0) * log_fp - np.power(
            one_minus, g
        ) / np.maximum(fp, PROB_FLOOR)
    dfp_dz = -probs * fp[:, None]
    dfp_dz[rows, labels] += fp
    grads = dl_dfp[:, None] * dfp_dz
    return losses, grads


def focal_loss(
    probs: np.ndarray, true_class: int, cfg: LossConfig
) -> tuple[float, np.ndarray]:
    losses, grads = focal_batch(
        np.asarray(probs, dtype=np.float64)[None, :], np.array([true_class]), cfg
    )
    return float(losses[0]), grads[0]


class GhmcState:
    """Running bin-count memory for gradient-density harmonizing."""

    def __init__(self, cfg: LossConfig) -> None:
        self.bins = cfg.ghmc_bins
        self.momentum = cfg.ghmc_momentum
        self.counts = np.zeros(cfg.ghmc_bins)


def ghmc_batch(
    probs: np.ndarray,
    labels: np.ndarray,
    cfg: LossConfig,
    state: GhmcState | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-entropy reweighted inversely to gradient-norm bin density.

    The gradient norm |f_p - 1| of each sample falls into one of
    ``ghmc_bins`` equal-width bins over [0, 1]; crowded bins get
    down-weighted. Bin counts carry momentum across batches when a state
    object is supplied. Weights are normalized to mean 1 per batch and
    treated as constants by the gradient.
    """
    if probs.shape[0] == 0:
        raise ValueError("ghmc needs a non-empty batch")
    _check_labels(probs, labels)
    n = probs.shape[0]
    rows = np.arange(n)
    norm = np.abs(probs[rows, labels] - 1.0)
    edges = np.clip((norm * cfg.ghmc_bins).astype(np.int64), 0, cfg.ghmc_bins - 1)
    fresh = np.bincount(edges, minlength=cfg.ghmc_bins).astype(np.float64)
    if state is None:
        counts = fresh
    else:
        state.counts = cfg.ghmc_momentum * state.counts + (1.0 - cfg.ghmc_momentum) * fresh
        counts = state.counts
    nonempty = int((fresh > 0).sum())
    density = counts[edges] * nonempty
    weights = n / np.maximum(density, PROB_FLOOR)
    weights /= weights.mean()
    losses, grads = ce_batch(probs, labels)
    return weights * losses, weights[:, None] * grads


def mse_batch(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Squared error ||probs - onehot||^2 with its softmax-aware gradient."""
    _check_labels(probs, labels)
    n = probs.shape[0]
    rows = np.arange(n)
    err = probs.copy()
    err[rows, labels] -= 1.0
    losses = (err**2).sum(axis=1)
    # chain through the softmax Jacobian diag(f) - f f^T
    d = 2.0 * err
    grads = probs * (d - (d * probs).sum(axis=1, keepdims=True))
    return losses, grads


def mse_loss(probs: np.ndarray, true_class: int) -> tuple[float, np.ndarray]:
    losses, grads = mse_batch(
        np.asarray(probs, dtype=np.float64)[None, :], np.array([true_class])
    )
    return float(losses[0]), grads[0]


def mfe_batch(
    probs: np.ndarray,
    labels: np.ndarray,
    minority_set: tuple[int, ...],
) -> tuple[np.ndarray, np.ndarray]:
    """Mean false-positive error plus mean false-negative error.

    Minority-class samples are the positives. Each group's squared errors
    are averaged separately and the two means added; a group with no
    samples contributes nothing. Per-sample values are scaled so their
    batch mean equals that objective.
    """
    if not minority_set:
        raise ConfigError("mfe needs a non-empty minority class set")
    _check_labels(probs, labels)
    q = probs.shape[1]
    if not set(minority_set) & set(range(q)):
        raise ConfigError(f"minority set {minority_set} shares no class with 0..{q - 1}")
    n = probs.shape[0]
    positive = np.isin(labels, list(minority_set))
    losses, grads = mse_batch(probs, labels)
    scale = np.zeros(n)
    for mask in (positive, ~positive):
        count = int(mask.sum())
        if count:
            scale[mask] = n / count
    return scale * losses, scale[:, None] * grads


def mfe_loss(
    probs: np.ndarray, labels: np.ndarray, minority_set: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray]:
    return mfe_batch(np.asarray(probs, dtype=np.float64), np.asarray(labels), minority_set)


class BatchLoss:
    """Configured loss ready for the training loop.

    Call with (probs, labels, ratios) and get per-sample losses and logit
    gradients. The ratio vector is ignored by every kind except
    ``ratio``; GHMC keeps its bin-count memory inside this object.
    """

    def __init__(self, cfg: LossConfig) -> None:
        self.cfg = cfg
        self._ghmc = GhmcState(cfg) if cfg.kind == "ghmc" else None

    def __call__(
        self,
        probs: np.ndarray,
        labels: np.ndarray,
        ratios: RatioVector | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        kind = self.cfg.kind
        if kind == "ce":
            return ce_batch(probs, labels)
        if kind == "ratio":
            if ratios is None:
                ratios = RatioVector.neutral(probs.shape[1])
            return ratio_batch(probs, labels, ratios, self.cfg)
        if kind == "focal":
            return focal_batch(probs, labels, self.cfg)
        if kind == "ghmc":
            return ghmc_batch(probs, labels, self.cfg, self._ghmc)
        if kind == "mse":
            return mse_batch(probs, labels)
        if kind == "mfe":
            if self.cfg.minority_set is None:
                raise ConfigError("mfe requires minority_set in the loss config")
            return mfe_batch(probs, labels, self.cfg.minority_set)
        raise ConfigError(f"unknown loss kind {kind!r}")
