"""Ranking / classification metrics and permutation feature importance."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataContractError


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ConfigError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DataContractError("labels must contain both anomalous and nominal nodes")
    return scores, labels


def pr_steps(scores, labels):
    """Precision/recall at each distinct score, descending.

    Every distinct score value is one threshold (flag ``score >= t``), so
    tied scores enter together. Returns (thresholds, tp, fp, precision, recall).
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # keep the last position of each run of equal scores
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp, thr = tp[last], fp[last], s[last]
    precision = tp / (tp + fp)
    recall = tp / labels.sum()
    return thr, tp, fp, precision, recall


def average_precision(scores, labels):
    """Step-wise AP: sum over thresholds of (R_n - R_{n-1}) * P_n."""
    _, _, _, precision, recall = pr_steps(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def auroc(scores, labels):
    """Mann-Whitney AUROC with half credit for tied positive/negative pairs."""
    scores, labels = _check_binary(scores, labels)
    # average ranks handle ties exactly
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size)
    start = 0
    boundaries = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    for end in boundaries:
        ranks[start:end + 1] = 0.5 * (start + end) + 1.0
        start = end + 1
    full = np.empty_like(ranks)
    full[order] = ranks
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    u = full[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float


def confusion(scores, labels, threshold, two_sided=False) -> Confusion:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    flagged = (np.abs(scores) if two_sided else scores) >= threshold
    tp = int(np.sum(flagged & labels))
    fp = int(np.sum(flagged & ~labels))
    fn = int(np.sum(~flagged & labels))
    tn = int(np.sum(~flagged & ~labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Confusion(tp, fp, tn, fn, precision, recall, f1)


@dataclass
class EvalReport:
    model: str
    variant: str
    ap: float
    auroc: float
    f1: float
    fp: int
    fn: int
    tp: int
    tn: int
    threshold: float
    loss: float | None
    precision: float = 0.0
    recall: float = 0.0
    gaussian_fpr_estimate: float | None = None
    empirical_fpr: float | None = None
    score_mean: float = 0.0
    score_std: float = 1.0
    feature_importances: dict = field(default_factory=dict)
    feature_importances_raw: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def permutation_importance(params, graphs, features, metric="ap", repeats=5, seed=0,
                           variant="signed_smoothed", **score_kw):
    """Drop in detection quality when each input column is shuffled.

    Each column is permuted independently within every layer, the layers are
    re-scored, and the drop against the unshuffled baseline is averaged over
    ``repeats``. ``metric`` is "ap" (drop in AP) or "mse" (rise in MSE).
    Returns (clamped, raw) dicts keyed by feature name; clamped values are
    ``max(raw, 0)``.
    """
    from .anomaly import score_pipeline
    from .models import predict

    if repeats < 1:
        raise ConfigError("repeats must be at least 1")
    if metric not in ("ap", "mse"):
        raise ConfigError(f"unknown importance metric {metric!r}")
    labels = np.concatenate([g.scan.anomaly_mask for g in graphs])
    std = params.standardizer

    def quality(X_per_graph):
        if metric == "ap":
            z = np.concatenate([
                score_pipeline(params, g, variant, X=X, **score_kw).selected
                for g, X in zip(graphs, X_per_graph)])
            return average_precision(z, labels)
        errs = [np.mean((predict(params, g, X=X) - std.transform(g.scan.Y)) ** 2)
                for g, X in zip(graphs, X_per_graph)]
        return -float(np.mean(errs))

    base_X = [g.scan.X for g in graphs]
    baseline = quality(base_X)
    raw = {}
    for col, name in enumerate(features):
        drops = []
        for r in range(repeats):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), col, r]))
            shuffled = []
            for X in base_X:
                Xs = X.copy()
                Xs[:, col] = X[rng.permutation(X.shape[0]), col]
                shuffled.append(Xs)
            drops.append(baseline - quality(shuffled))
        raw[name] = float(np.mean(drops))
    return {k: max(v, 0.0) for k, v in raw.items()}, raw
