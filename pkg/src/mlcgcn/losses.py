"""Composite training objective: cross entropy plus an intra-class graph penalty."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_FLOOR, Tensor
from .errors import ContractError


@dataclass
class BatchTargets:
    """Per-sample target distributions [N x c]; one-hot rows or mixed rows."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ContractError(f"targets must be [N x c], got shape {self.probs.shape}")

    @classmethod
    def from_labels(cls, labels, classes):
        labels = np.asarray(labels, dtype=int)
        onehot = np.zeros((len(labels), classes))
        onehot[np.arange(len(labels)), labels] = 1.0
        return cls(onehot)

    @property
    def n(self):
        return self.probs.shape[0]

    @property
    def dominant(self):
        """Hard class per row: the largest-weight class (ties to the lowest index)."""
        return self.probs.argmax(axis=1)


def cross_entropy(probs, targets: BatchTargets):
    """Mean soft-target cross entropy of predicted probabilities [N x c].

    Logs are clamped at 1e-12; with one-hot rows this is the standard
    multi-class cross entropy.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    n = probs.data.shape[0]
    if n == 0:
        raise ContractError("cross_entropy on an empty batch")
    if probs.data.shape != targets.probs.shape:
        raise ContractError(
            f"probs shape {probs.data.shape} does not match targets {targets.probs.shape}"
        )
    logp = ad.log(ad.clamp_min(probs, LOG_FLOOR))
    weighted = ad.mul(logp, Tensor(targets.probs))
    return ad.scale(ad.sum_all(weighted), -1.0 / n)


def group_loss(adjacencies, labels, levels):
    """Mean squared Frobenius distance of each sample's generated graphs from
    its class's within-batch mean, averaged over levels.

    `adjacencies` is a list (per sample) of lists (per level) of [n x n]
    tensors. Classes with a single member contribute zero; absent classes are
    skipped. Always >= 0; zero iff every graph equals its class mean.
    """
    if levels < 1:
        raise ContractError(f"levels must be >= 1, got {levels}")
    if len(adjacencies) == 0:
        raise ContractError("group_loss on an empty batch")
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(adjacencies):
        raise ContractError("one label per sample required")

    total = None
    for level in range(levels):
        for cls in np.unique(labels):
            members = [adjacencies[u][level] for u in np.flatnonzero(labels == cls)]
            if len(members) < 2:
                continue  # a lone sample equals its own mean
            mean = members[0]
            for m in members[1:]:
                mean = ad.add(mean, m)
            mean = ad.scale(mean, 1.0 / len(members))
            for m in members:
                diff = ad.sub(m, mean)
                term = ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / len(members))
                total = term if total is None else ad.add(total, term)
    if total is None:
        return Tensor(0.0)
    return ad.scale(total, 1.0 / levels)


def total_loss(ce, group, alpha=1.0):
    """Weighted objective: cross entropy + alpha * group penalty."""
    if alpha < 0:
        raise ContractError(f"alpha must be >= 0, got {alpha}")
    ce = ce if isinstance(ce, Tensor) else Tensor(ce)
    if alpha == 0:
        return ce
    group = group if isinstance(group, Tensor) else Tensor(group)
    return ad.add(ce, ad.scale(group, alpha))
