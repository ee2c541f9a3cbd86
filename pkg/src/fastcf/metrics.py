"""Evaluation metrics for counterfactual quality and shortcut severity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError, UndefinedMetricError

__all__ = [
    "PairedConfidences",
    "l1_distance",
    "mad",
    "md",
    "flip_ratio",
    "auroc",
    "frechet_gaussian_distance",
]


@dataclass(frozen=True)
class PairedConfidences:
    """Target-class probabilities for originals and their counterfactuals.

    ``shortcut_labels`` carries each original's true shortcut label for the
    grouped mean-difference metric; it may be omitted otherwise.
    """

    original: np.ndarray
    counterfactual: np.ndarray
    shortcut_labels: np.ndarray | None = None

    def __post_init__(self):
        f = np.asarray(self.original, np.float64)
        fc = np.asarray(self.counterfactual, np.float64)
        if f.shape != fc.shape or f.ndim != 1:
            raise ShapeError("paired confidences must be two equal-length vectors")
        for name, arr in (("original", f), ("counterfactual", fc)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise ParameterError(f"{name} confidences must lie in [0, 1]")
        object.__setattr__(self, "original", f)
        object.__setattr__(self, "counterfactual", fc)
        if self.shortcut_labels is not None:
            s = np.asarray(self.shortcut_labels, np.int64)
            if s.shape != f.shape:
                raise ShapeError("shortcut labels must align with the confidence pairs")
            object.__setattr__(self, "shortcut_labels", s)

    def __len__(self):
        return self.original.size


def l1_distance(x, x_c) -> float:
    """Mean absolute difference between two equal-shape arrays."""
    x, x_c = np.asarray(x, np.float64), np.asarray(x_c, np.float64)
    if x.shape != x_c.shape:
        raise ShapeError(f"shapes differ: {x.shape} vs {x_c.shape}")
    return float(np.abs(x - x_c).mean())


def mad(p: PairedConfidences) -> float:
    """Mean absolute confidence difference; 1 means a complete flip."""
    if len(p) == 0:
        raise ParameterError("no confidence pairs")
    return float(np.abs(p.original - p.counterfactual).mean())


def md(p: PairedConfidences, group: int | None = None) -> float:
    """Mean signed confidence difference, optionally over one shortcut group.

    Positive values mean the counterfactual lowered the confidence.
    """
    f, fc = p.original, p.counterfactual
    if group is not None:
        if p.shortcut_labels is None:
            raise ParameterError("grouped mean difference needs shortcut labels")
        keep = p.shortcut_labels == group
        f, fc = f[keep], fc[keep]
    if f.size == 0:
        raise ParameterError("empty group")
    return float((f - fc).mean())


def flip_ratio(p: PairedConfidences, threshold: float = 0.5) -> float:
    """Fraction of counterfactuals whose target-class confidence clears the bar."""
    if len(p) == 0:
        raise ParameterError("no confidence pairs")
    return float((p.counterfactual >= threshold).mean())


def auroc(scores, labels) -> float:
    """Rank-based AUROC (Mann-Whitney); tied scores contribute half credit."""
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average ranks across ties
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def frechet_gaussian_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussians fit to two feature sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the matrix
    square root taken through symmetric eigendecompositions whose negative
    eigenvalues are clamped at zero.
    """
    a = np.atleast_2d(np.asarray(feats_a, np.float64))
    b = np.atleast_2d(np.asarray(feats_b, np.float64))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("feature sets must be 2-D with a common dimension")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ParameterError("need at least two feature vectors per set")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1])
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1])

    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(np.square(mu_a - mu_b).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(d2, 0.0)


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T
