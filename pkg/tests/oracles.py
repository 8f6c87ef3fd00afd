"""Independent brute-force reference implementations used by the tests.

Nothing here calls into the package's numeric code paths being checked;
each oracle is a direct loop over the defining formula.
"""

from __future__ import annotations

import math

import numpy as np

from anchorgnn import autodiff as ad


# -- gradients -----------------------------------------------------------------

def gradcheck(build, arrays, h: float = 1e-6, rtol: float = 1e-5, floor: float = 1e-2):
    """Compare reverse-mode gradients of ``build(*tensors) -> 1x1`` with central differences.

    An entry passes when |ad - fd| <= rtol * max(|fd|, floor). Returns the
    largest ratio |ad - fd| / (rtol * max(|fd|, floor)), so a result <= 1 passes.
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    ad.backward(loss)
    worst = 0.0
    for k, a in enumerate(arrays):
        g_ad = tensors[k].grad if tensors[k].grad is not None else np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            fp = build(*[ad.Tensor(x) for x in plus]).item()
            fm = build(*[ad.Tensor(x) for x in minus]).item()
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(g_ad[idx] - fd) / (rtol * max(abs(fd), floor)))
    return worst


# -- aggregation ---------------------------------------------------------------

def aggregate_oracle(P):
    """mu, sigma (divisor K-1), renormalized mu * (1 - sigma) by explicit loops over a K x q matrix."""
    K, q = len(P), len(P[0])
    mu = [sum(P[k][c] for k in range(K)) / K for c in range(q)]
    if K == 1:
        return mu, [0.0] * q, list(mu)
    sigma = [math.sqrt(sum((P[k][c] - mu[c]) ** 2 for k in range(K)) / (K - 1)) for c in range(q)]
    raw = [max(mu[c] * (1.0 - sigma[c]), 0.0) for c in range(q)]
    s = sum(raw)
    calib = [r / s for r in raw] if s > 0 else list(mu)
    return mu, sigma, calib


# -- metrics -------------------------------------------------------------------

def _top1(probs, labels):
    conf, correct = [], []
    for p, y in zip(probs, labels):
        best = 0
        for c in range(1, len(p)):
            if p[c] > p[best]:
                best = c
        conf.append(float(p[best]))
        correct.append(best == int(y))
    return conf, correct


def ece_oracle(probs, labels, n_bins: int = 15) -> float:
    conf, correct = _top1(probs, labels)
    n = len(conf)
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [i for i in range(n) if lo <= conf[i] < hi or (b == n_bins - 1 and conf[i] >= hi)]
        if not members:
            continue
        acc = sum(correct[i] for i in members) / len(members)
        avg = sum(conf[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - avg)
    return total


def auroc_oracle(id_scores, ood_scores) -> float:
    wins = 0.0
    for a in id_scores:
        for b in ood_scores:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(id_scores) * len(ood_scores))


def gep_tau_oracle(probs, labels) -> float:
    conf, correct = _top1(probs, labels)
    acc = sum(correct) / len(correct)
    uniq = sorted(set(conf))
    cands = sorted({0.0, 1.0} | {(uniq[i] + uniq[i + 1]) / 2 for i in range(len(uniq) - 1)})
    best_tau, best_err = None, math.inf
    for tau in cands:
        err = abs(acc - sum(1 for c in conf if c > tau) / len(conf))
        if err < best_err:
            best_tau, best_err = tau, err
    return best_tau


# -- shuffling -----------------------------------------------------------------

def fisher_yates_oracle(m: int, rng: np.random.Generator) -> list[int]:
    perm = list(range(m))
    for i in range(m - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


# -- dense reference layers ----------------------------------------------------

def gcn_dense(x, a, w, b):
    a = np.array(a, dtype=np.float64)
    np.fill_diagonal(a, 0.0)
    a_hat = a + np.eye(len(a))
    d = a_hat.sum(axis=1)
    n = len(a)
    norm = np.zeros_like(a_hat)
    for i in range(n):
        for j in range(n):
            norm[i, j] = a_hat[i, j] / math.sqrt(d[i] * d[j])
    return np.maximum(norm @ x @ w + b, 0.0)
