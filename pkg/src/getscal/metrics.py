"""Calibration metrics over equal-mass bins.

All functions take a probability matrix (rows summing to one), integer labels
and an optional node mask (boolean vector or index array). Sorting is stable
so ties resolve by node index, and argmax ties resolve to the lowest class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import softmax


@dataclass(frozen=True)
class BinStats:
    bin_index: int
    node_count: int
    avg_confidence: float
    accuracy: float

    @property
    def gap(self) -> float:
        return abs(self.accuracy - self.avg_confidence)


@dataclass
class CalibrationReport:
    ece: float
    accuracy: float
    nll: float
    var_ece: float
    bins: list[BinStats] = field(default_factory=list)
    degree_bins: list[BinStats] = field(default_factory=list)


def _indices(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.arange(n)
    mask = np.asarray(mask)
    if mask.dtype == bool:
        return np.flatnonzero(mask)
    return mask.astype(np.int64)


def _check_probs(probs: np.ndarray):
    if probs.ndim != 2:
        raise ValueError(f"expected an N x K probability matrix, got shape {probs.shape}")
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > 1e-6)
    if len(bad):
        raise ValueError(f"row {bad[0]} of probs sums to {probs[bad[0]].sum():.8f}, not 1")


def equal_mass_bins(keys, num_bins: int) -> list[np.ndarray]:
    """Split positions ``0..N-1`` into ``num_bins`` groups of ascending ``keys``.

    The first ``N mod B`` groups hold one extra element; groups may be empty
    when ``N < B``.
    """
    keys = np.asarray(keys)
    if num_bins < 1:
        raise ValueError("need at least one bin")
    order = np.argsort(keys, kind="stable")
    n = len(order)
    base, extra = divmod(n, num_bins)
    sizes = [base + 1 if j < extra else base for j in range(num_bins)]
    bounds = np.cumsum([0] + sizes)
    return [order[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]


def _binned_gap(conf: np.ndarray, correct: np.ndarray, groups: list[np.ndarray]):
    n = len(conf)
    stats, total = [], 0.0
    for j, members in enumerate(groups):
        if len(members) == 0:
            stats.append(BinStats(j, 0, 0.0, 0.0))
            continue
        s = BinStats(j, len(members), float(conf[members].mean()), float(correct[members].mean()))
        total += len(members) / n * s.gap
        stats.append(s)
    return total, stats


def _conf_correct(probs, labels, mask):
    probs = np.asarray(probs, dtype=np.float64)
    _check_probs(probs)
    idx = _indices(mask, len(probs))
    if len(idx) == 0:
        raise ValueError("mask selects no nodes")
    p = probs[idx]
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == np.asarray(labels)[idx]).astype(np.float64)
    return idx, conf, correct


def ece(probs, labels, mask=None, num_bins: int = 10) -> tuple[float, list[BinStats]]:
    """Expected calibration error with equal-mass confidence bins."""
    _, conf, correct = _conf_correct(probs, labels, mask)
    return _binned_gap(conf, correct, equal_mass_bins(conf, num_bins))


def reliability_report(probs, labels, mask=None, num_bins: int = 10) -> list[BinStats]:
    return ece(probs, labels, mask, num_bins)[1]


def degree_binned_ece(probs, labels, degrees, mask=None,
                      num_bins: int = 10) -> tuple[float, list[BinStats]]:
    """ECE with nodes grouped into equal-mass bins of ascending degree."""
    idx, conf, correct = _conf_correct(probs, labels, mask)
    deg = np.asarray(degrees)[idx]
    return _binned_gap(conf, correct, equal_mass_bins(deg, num_bins))


def var_ece(degree_bins: list[BinStats]) -> float:
    """Population variance of ``|D_j|/N * |acc - conf|`` over nonempty bins."""
    filled = [b for b in degree_bins if b.node_count > 0]
    if not filled:
        raise ValueError("VarECE needs at least one nonempty bin")
    n = sum(b.node_count for b in filled)
    terms = np.array([b.node_count / n * b.gap for b in filled])
    return float(np.mean((terms - terms.mean()) ** 2))


def accuracy_and_nll(probs, labels, mask=None, *, from_logits: bool = False) -> tuple[float, float]:
    probs = np.asarray(probs, dtype=np.float64)
    idx = _indices(mask, len(probs))
    if len(idx) == 0:
        raise ValueError("mask selects no nodes")
    labels = np.asarray(labels)[idx]
    p = probs[idx]
    acc = float(np.mean(p.argmax(axis=1) == labels))
    if from_logits:
        shifted = p - p.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        nll = float(-np.mean(logp[np.arange(len(idx)), labels]))
    else:
        nll = float(-np.mean(np.log(np.maximum(p[np.arange(len(idx)), labels], 1e-300))))
    return acc, nll


def calibration_report(probs, labels, degrees, mask=None, num_bins: int = 10) -> CalibrationReport:
    e, bins = ece(probs, labels, mask, num_bins)
    _, dbins = degree_binned_ece(probs, labels, degrees, mask, num_bins)
    acc, nll = accuracy_and_nll(probs, labels, mask)
    return CalibrationReport(e, acc, nll, var_ece(dbins), bins, dbins)


def probabilities(logits) -> np.ndarray:
    return softmax(np.asarray(logits, dtype=np.float64))
