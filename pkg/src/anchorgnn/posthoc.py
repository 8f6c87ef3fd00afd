"""Temperature and vector scaling fitted on in-distribution validation logits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_T_RANGE = (-3.0, 3.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class CalibrationError(ValueError):
    pass


def nll(logits: np.ndarray, labels) -> float:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def _check(logits, labels, min_rows: int):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise CalibrationError(f"logits {z.shape} and labels {y.shape} disagree")
    n, q = z.shape
    if n < min_rows:
        raise CalibrationError(f"need at least {min_rows} validation samples, got {n}")
    if np.unique(y).size < 2:
        raise CalibrationError("validation labels contain a single class")
    return z, y


@dataclass(frozen=True)
class TemperatureScaler:
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise CalibrationError(f"temperature must be positive, got {self.T}")

    def to_json(self) -> dict:
        return {"kind": "temperature", "T": self.T}


def fit_temperature(val_logits, val_labels, tol: float = 1e-5, warn: bool = True) -> TemperatureScaler:
    """Golden-section search for the NLL-minimizing log-temperature in [-3, 3].

    Returns the best temperature among all evaluated points, T = 1 included.
    Landing on the search boundary emits a RuntimeWarning unless ``warn`` is off
    (see ``at_boundary``).
    """
    z, y = _check(val_logits, val_labels, min_rows=np.asarray(val_logits).shape[1])

    def f(log_t: float) -> float:
        return nll(z / math.exp(log_t), y)

    lo, hi = LOG_T_RANGE
    seen = {0.0: f(0.0), lo: f(lo), hi: f(hi)}
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    seen[c], seen[d] = fc, fd
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - GOLDEN * (hi - lo)
            fc = f(c)
            seen[c] = fc
        else:
            lo, c, fc = c, d, fd
            d = lo + GOLDEN * (hi - lo)
            fd = f(d)
            seen[d] = fd
    best = min(seen, key=lambda k: (seen[k], abs(k)))
    if warn and at_boundary(math.exp(best), tol):
        warnings.warn(f"temperature hit the search boundary (log T = {best:.3f})", RuntimeWarning, stacklevel=2)
    return TemperatureScaler(math.exp(best))


def at_boundary(T: float, tol: float = 1e-5) -> bool:
    log_t = math.log(T)
    return abs(log_t - LOG_T_RANGE[0]) <= tol or abs(log_t - LOG_T_RANGE[1]) <= tol


def apply_temperature(scaler: TemperatureScaler, logits) -> np.ndarray:
    return ad.softmax(np.asarray(logits, dtype=np.float64) / scaler.T)


@dataclass(frozen=True)
class VectorScaler:
    w: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.b))):
            raise CalibrationError("vector-scaling parameters must be finite")

    def to_json(self) -> dict:
        return {"kind": "vector", "w": [float(v) for v in self.w], "b": [float(v) for v in self.b]}


def apply_vector_scaling(scaler: VectorScaler, logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return ad.softmax(z * scaler.w[None, :] + scaler.b[None, :])


def fit_vector_scaling(val_logits, val_labels, steps: int = 500, lr: float = 0.01,
                       patience: int = 50) -> VectorScaler:
    """Per-class scale and bias minimizing validation NLL, optimized with Adam from (w=1, b=0).

    Returns the best iterate seen, so the fitted NLL never exceeds the NLL at init.
    """
    z, y = _check(val_logits, val_labels, min_rows=2 * np.asarray(val_logits).shape[1])
    q = z.shape[1]
    params = {"w": Tensor(np.ones((1, q)), requires_grad=True), "b": Tensor(np.zeros((1, q)), requires_grad=True)}
    opt = ad.Adam(lr=lr)
    zt = Tensor(z)
    best_loss, best = math.inf, (np.ones(q), np.zeros(q))
    prev, rising = math.inf, 0
    for _ in range(steps + 1):
        loss = ad.softmax_cross_entropy(ad.add(ad.mul_row(zt, params["w"]), params["b"]), y)
        value = loss.item()
        if not math.isfinite(value):
            raise CalibrationError("vector scaling diverged (non-finite NLL)")
        if value < best_loss:
            best_loss = value
            best = (params["w"].data[0].copy(), params["b"].data[0].copy())
        rising = rising + 1 if value > prev else 0
        if rising >= patience:
            raise CalibrationError(f"vector scaling diverged: NLL rose for {patience} consecutive steps")
        prev = value
        ad.zero_grads(params.values())
        ad.backward(loss)
        opt.step(params)
    return VectorScaler(*best)


def scaler_from_json(d: dict):
    if d["kind"] == "temperature":
        return TemperatureScaler(float(d["T"]))
    if d["kind"] == "vector":
        return VectorScaler(np.array(d["w"]), np.array(d["b"]))
    raise CalibrationError(f"unknown scaler kind {d['kind']!r}")
