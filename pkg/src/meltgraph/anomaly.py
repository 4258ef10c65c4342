"""Prediction-error anomaly scores, graph smoothing of scores, thresholds."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special

from .errors import ConfigError, DataContractError
from .graph_build import apply_smoothing
from .metrics import confusion, pr_steps
from .models import predict

VARIANTS = ("signed_smoothed", "signed_raw", "absolute")


def _pair(pred, obs):
    pred = np.asarray(pred, dtype=np.float64)
    obs = np.asarray(obs, dtype=np.float64)
    if pred.shape != obs.shape:
        raise ConfigError(f"prediction shape {pred.shape} != observation shape {obs.shape}")
    return pred.reshape(pred.shape[0], -1), obs.reshape(obs.shape[0], -1)


def score_signed(pred, obs):
    """Per-node sum over channels of (predicted - observed).

    A weaker-than-expected melt pool therefore scores positive.
    """
    pred, obs = _pair(pred, obs)
    return (pred - obs).sum(axis=1)


def score_absolute(pred, obs):
    pred, obs = _pair(pred, obs)
    return np.abs(pred - obs).sum(axis=1)


@dataclass
class AnomalyScores:
    z: np.ndarray           # signed error per node
    z_abs: np.ndarray       # absolute error per node
    z_smoothed: np.ndarray  # final score for `variant`
    variant: str

    @property
    def selected(self):
        return self.z_smoothed


def score_pipeline(params, graph, variant="signed_smoothed", X=None, self_loops=True,
                   passes=1) -> AnomalyScores:
    """predict -> per-node error -> graph smoothing (skipped for ``signed_raw``).

    ``absolute`` smooths the absolute error. Scores are in standardised
    label units. The autoencoder is scored on its melt-pool channels only.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown score variant {variant!r}; choose from {VARIANTS}")
    obs = params.standardizer.transform(graph.scan.Y)
    pred = predict(params, graph, X=X, Y_std=obs)
    z = score_signed(pred, obs)
    z_abs = score_absolute(pred, obs)
    if variant == "signed_raw":
        final = z.copy()
    else:
        base = z if variant == "signed_smoothed" else z_abs
        final = apply_smoothing(graph.operator(self_loops), base, passes)
    return AnomalyScores(z, z_abs, final, variant)


def upper_tail(t_star):
    """Standard normal survival function 1 - Phi(t*)."""
    return special.ndtr(-np.asarray(t_star, dtype=np.float64))


def normal_quantile(p):
    return special.ndtri(np.asarray(p, dtype=np.float64))


def gaussian_fpr_estimate(nominal_scores, threshold):
    """Expected false-positive rate if nominal scores were Gaussian."""
    s = np.asarray(nominal_scores, dtype=np.float64)
    if s.size < 30:
        raise DataContractError(f"need at least 30 nominal scores, got {s.size}")
    sd = s.std(ddof=1)
    if not sd > 0:
        raise DataContractError("nominal scores have zero variance")
    return float(upper_tail((threshold - s.mean()) / sd))


def qq_points(scores):
    """(theoretical, empirical) quantile pairs of the standardised scores."""
    s = np.asarray(scores, dtype=np.float64)
    n = s.size
    if n < 2:
        raise DataContractError("qq_points needs at least 2 scores")
    sd = s.std(ddof=1)
    emp = np.sort((s - s.mean()) / sd) if sd > 0 else np.zeros(n)
    theo = normal_quantile((np.arange(1, n + 1) - 0.5) / n)
    return np.column_stack([theo, emp])


@dataclass
class ThresholdReport:
    threshold: float
    precision: float
    recall: float
    f1: float
    curve: list = field(default_factory=list)  # (threshold, precision, recall)
    gaussian_fpr_estimate: float | None = None
    empirical_fpr: float = 0.0
    two_sided: bool = False

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


def select_threshold(scores, labels, two_sided=False) -> ThresholdReport:
    """Max-F1 threshold on the precision-recall curve.

    Candidates are the distinct score values; a node is flagged when its
    score (or its magnitude, if ``two_sided``) is >= the threshold. Equal F1
    goes to the smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    ranked = np.abs(scores) if two_sided else scores
    thr, tp, fp, precision, recall = pr_steps(ranked, labels)
    n_pos = int(labels.sum())
    f1 = 2.0 * tp / (tp + fp + n_pos)
    best = np.flatnonzero(f1 == f1.max())[-1]  # thresholds descend: last = smallest
    t = float(thr[best])
    c = confusion(scores, labels, t, two_sided=two_sided)
    nominal = scores[~labels]
    gauss = gaussian_fpr_estimate(nominal, t) if nominal.size >= 30 and nominal.std() > 0 else None
    return ThresholdReport(
        threshold=t, precision=c.precision, recall=c.recall, f1=c.f1,
        curve=[(float(a), float(b), float(r)) for a, b, r in zip(thr, precision, recall)],
        gaussian_fpr_estimate=gauss,
        empirical_fpr=c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0,
        two_sided=two_sided)


def nominal_reference(params, graphs, variant="signed_smoothed", **score_kw):
    """Mean and std of final scores over nominal nodes, for standardising."""
    vals = []
    for g in graphs:
        s = score_pipeline(params, g, variant, **score_kw).selected
        vals.append(s[~g.scan.anomaly_mask])
    allv = np.concatenate(vals)
    sd = allv.std(ddof=1)
    if not sd > 0:
        raise DataContractError("reference scores have zero variance")
    return float(allv.mean()), float(sd)
