"""Calibration metrics: Brier score, ECE, reliability bins, misclassification
entropy, and a temperature-scaling baseline fitted by NLL minimization.

All logarithms are natural. Confidence means the maximum predicted
probability; predicted class is the argmax with ties going to the lowest
class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ContractError


@dataclass
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    accuracy: float


@dataclass
class CalibrationReport:
    accuracy: float
    brier: float
    ece: float
    miscls_entropy: float
    bins: list


def _as_probs(probs):
    if len(probs) and hasattr(probs[0], "probs"):
        probs = [p.probs for p in probs]
    P = np.asarray(probs, dtype=float)
    return np.atleast_2d(P)


def brier(probs, labels):
    """Mean over samples of the summed squared gap to the one-hot label."""
    P = _as_probs(probs)
    y = np.asarray(labels, dtype=int)
    if P.shape[0] != y.shape[0]:
        raise ContractError("probs and labels must have equal length")
    if P.shape[0] == 0:
        raise ContractError("brier needs at least one sample")
    onehot = np.zeros_like(P)
    onehot[np.arange(P.shape[0]), y] = 1.0
    return float(((P - onehot) ** 2).sum(axis=1).mean())


def ece(probs, labels, n_bins=5):
    """Expected calibration error over equal-width confidence bins.

    Bins partition [0, 1]; a confidence exactly on an interior edge falls in
    the upper bin and the last bin is closed at 1. Empty bins contribute
    zero. Returns (ece, bins).
    """
    if n_bins < 1:
        raise ContractError("n_bins must be >= 1")
    P = _as_probs(probs)
    y = np.asarray(labels, dtype=int)
    if P.shape[0] != y.shape[0]:
        raise ContractError("probs and labels must have equal length")
    n = P.shape[0]
    conf = P.max(axis=1)
    correct = (P.argmax(axis=1) == y).astype(float)
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)

    bins = []
    total = 0.0
    for j in range(n_bins):
        mask = idx == j
        count = int(mask.sum())
        lower, upper = j / n_bins, (j + 1) / n_bins
        if count:
            mean_conf = float(conf[mask].mean())
            acc = float(correct[mask].mean())
            total += (count / n) * abs(acc - mean_conf)
        else:
            mean_conf, acc = 0.0, 0.0
        bins.append(ReliabilityBin(lower, upper, count, mean_conf, acc))
    return float(total), bins


def miscls_entropy(probs, labels):
    """Mean Shannon entropy of the misclassified predictions.

    Returns (entropy, all_correct); entropy is 0 when nothing was
    misclassified.
    """
    P = _as_probs(probs)
    y = np.asarray(labels, dtype=int)
    wrong = P.argmax(axis=1) != y
    if not wrong.any():
        return 0.0, True
    Pw = P[wrong]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(Pw > 0.0, Pw * np.log(Pw), 0.0)
    return float(-terms.sum(axis=1).mean()), False


def nll(logits, labels, temperature=1.0):
    """Mean negative log-likelihood of softmax(logits / T)."""
    L = np.asarray(logits, dtype=float) / temperature
    y = np.asarray(labels, dtype=int)
    return float((logsumexp(L, axis=1) - L[np.arange(L.shape[0]), y]).mean())


def fit_temperature(logits, labels, lo=0.05, hi=20.0, tol=1e-4):
    """Golden-section search for the NLL-minimizing temperature on log T.

    The returned temperature never has higher NLL than T = 1 (ties resolve
    to 1).
    """
    L = np.asarray(logits, dtype=float)
    if L.shape[0] == 0:
        raise ContractError("fit_temperature needs at least one sample")

    def f(log_t):
        return nll(L, labels, np.exp(log_t))

    a, b = np.log(lo), np.log(hi)
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    t_star = float(np.exp((a + b) / 2.0))
    if nll(L, labels, t_star) <= nll(L, labels, 1.0) - 1e-12:
        return t_star
    return 1.0


def calibration_report(probs, labels, n_bins=5):
    """Accuracy, Brier, ECE (with bins), and misclassification entropy."""
    P = _as_probs(probs)
    y = np.asarray(labels, dtype=int)
    acc = float((P.argmax(axis=1) == y).mean())
    e, bins = ece(P, y, n_bins)
    ent, _ = miscls_entropy(P, y)
    return CalibrationReport(acc, brier(P, y), e, ent, bins)
