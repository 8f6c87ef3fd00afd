"""Accuracy, expected calibration error, OOD AUROC and generalization-error prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    probs: np.ndarray
    label: int

    @property
    def confidence(self) -> float:
        return float(np.max(self.probs))

    @property
    def correct(self) -> bool:
        # np.argmax picks the lowest index among ties
        return int(np.argmax(self.probs)) == self.label


def records_from(probs: np.ndarray, labels) -> list[PredictionRecord]:
    probs = np.asarray(probs, dtype=np.float64)
    return [PredictionRecord(p, int(y)) for p, y in zip(probs, labels)]


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    """(confidence, correct) arrays from records or from a (probs, labels) pair."""
    if isinstance(records, tuple):
        probs, labels = records
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels)
        return probs.max(axis=1), probs.argmax(axis=1) == labels
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    corr = np.array([r.correct for r in records], dtype=bool)
    return conf, corr


def accuracy(records) -> float:
    _, corr = _arrays(records)
    if corr.size == 0:
        raise MetricError("accuracy of an empty record set")
    return float(corr.mean())


def ece(records, n_bins: int = 15) -> float:
    """Top-1 ECE over ``n_bins`` uniform confidence bins weighted by bin fraction.

    Bin i covers [i/n, (i+1)/n); confidence 1.0 falls in the top bin.
    """
    conf, corr = _arrays(records)
    if conf.size == 0:
        raise MetricError("ECE of an empty record set")
    if n_bins < 1:
        raise MetricError("n_bins must be >= 1")
    idx = np.minimum(np.floor(conf * n_bins).astype(np.int64), n_bins - 1)
    count = np.bincount(idx, minlength=n_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=corr.astype(np.float64), minlength=n_bins)
    nz = count > 0
    gap = np.abs(acc_sum[nz] / count[nz] - conf_sum[nz] / count[nz])
    return float(np.sum(count[nz] / conf.size * gap))


def auroc(id_scores, ood_scores) -> float:
    """P(score_id > score_ood) + 0.5 P(tie): the Mann-Whitney U statistic normalized."""
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise MetricError("AUROC needs nonempty in- and out-of-distribution score lists")
    b_sorted = np.sort(b)
    below = np.searchsorted(b_sorted, a, side="left")
    not_above = np.searchsorted(b_sorted, a, side="right")
    # count ties twice as halves to keep the sum integral
    u2 = np.sum(below + not_above, dtype=np.int64)
    return float(u2 / (2.0 * a.size * b.size))


def predicted_accuracy(scores, tau: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    return float(np.mean(s > tau))


def gep_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.concatenate([[0.0, 1.0], mids]))


def tune_gep_threshold(val_records) -> float:
    """Threshold minimizing |val accuracy - fraction of scores above it|; lowest wins ties."""
    conf, corr = _arrays(val_records)
    if conf.size == 0:
        raise MetricError("cannot tune a GEP threshold on an empty validation set")
    acc = corr.mean()
    cands = gep_candidates(conf)
    s = np.sort(conf)
    above = (conf.size - np.searchsorted(s, cands, side="right")) / conf.size
    err = np.abs(acc - above)
    return float(cands[int(np.argmin(err))])


def gep_error(target_records, true_acc: float | None = None, tau: float = 0.5) -> float:
    conf, corr = _arrays(target_records)
    if conf.size == 0:
        raise MetricError("GEP error of an empty record set")
    if true_acc is None:
        true_acc = float(corr.mean())
    return float(abs(true_acc - np.mean(conf > tau)))
