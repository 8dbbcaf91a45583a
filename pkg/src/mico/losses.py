"""Task losses: discrete-time survival negative log-likelihood and
cross-entropy for subtype classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError


@dataclass
class SurvivalLabel:
    time: float
    event: bool
    bin: int = -1

    def __post_init__(self):
        if self.time < 0 or not np.isfinite(self.time):
            raise DataError(f"survival time must be finite and non-negative, got {self.time}")


@dataclass
class SubtypeLabel:
    class_index: int

    def __post_init__(self):
        if self.class_index < 0:
            raise DataError(f"class index must be non-negative, got {self.class_index}")


def _flat_logits(logits: Tensor, n: int, what: str) -> Tensor:
    if logits.data.size != n:
        raise ConfigError(f"{what}: expected {n} logits, got shape {logits.data.shape}")
    return ad.reshape(logits, (n,)) if logits.data.shape != (n,) else logits


def survival_nll(hazard_logits: Tensor, label: SurvivalLabel, n_bins: int) -> Tensor:
    """Discrete-time hazard NLL.

    Hazards p_b = sigmoid(logit_b), survival S_b = prod_{j<=b} (1 - p_j).
    Observed event in bin b contributes -log S_{b-1} - log p_b; a censored
    sample in bin b contributes -log S_b.
    """
    if n_bins < 2:
        raise ConfigError(f"survival_nll: need at least 2 bins, got {n_bins}")
    b = label.bin
    if not 0 <= b < n_bins:
        raise ConfigError(f"survival_nll: bin {b} out of range [0, {n_bins})")
    x = _flat_logits(hazard_logits, n_bins, "survival_nll")

    log_p = ad.log_sigmoid(x)            # log hazard
    log_q = ad.log_sigmoid(ad.neg(x))    # log (1 - hazard)

    surv_mask = np.zeros(n_bins)
    event_mask = np.zeros(n_bins)
    if label.event:
        surv_mask[:b] = 1.0
        event_mask[b] = 1.0
    else:
        surv_mask[:b + 1] = 1.0
    ll = ad.add(ad.sum_(ad.mul(Tensor(surv_mask), log_q)),
                ad.sum_(ad.mul(Tensor(event_mask), log_p)))
    return ad.neg(ll)


def survival_curve(hazard_logits: np.ndarray) -> np.ndarray:
    """S_b = prod_{j<=b} (1 - sigmoid(logit_j)) as a plain array."""
    p = 1.0 / (1.0 + np.exp(-np.asarray(hazard_logits, dtype=np.float64).reshape(-1)))
    return np.cumprod(1.0 - p)


def risk_score(hazard_logits: np.ndarray) -> float:
    """Cumulative event probability 1 - S_{B-1}; higher means higher risk."""
    return float(1.0 - survival_curve(hazard_logits)[-1])


def cross_entropy(logits: Tensor, label: SubtypeLabel, n_classes: int) -> Tensor:
    """-log softmax(logits)[class]."""
    if n_classes < 2:
        raise ConfigError(f"cross_entropy: need at least 2 classes, got {n_classes}")
    c = label.class_index
    if c >= n_classes:
        raise ConfigError(f"cross_entropy: class {c} out of range [0, {n_classes})")
    z = _flat_logits(logits, n_classes, "cross_entropy")
    onehot = np.zeros(n_classes)
    onehot[c] = 1.0
    return ad.sub(ad.logsumexp(z), ad.sum_(ad.mul(Tensor(onehot), z)))


def quantile_bin_edges(times, n_bins: int) -> np.ndarray:
    """Interior quantile edges from the training split (censored and
    uncensored times pooled)."""
    t = np.asarray(times, dtype=np.float64)
    if t.size < n_bins:
        raise DataError(f"need at least {n_bins} times to form {n_bins} quantile bins")
    qs = np.arange(1, n_bins) / n_bins
    return np.quantile(t, qs)


def time_to_bin(time: float, edges: np.ndarray) -> int:
    return int(np.searchsorted(np.asarray(edges, dtype=np.float64), time, side="right"))
