"""Diagnostics on trained features: entropy-threshold divergence, proxy A-distance,
covariance eigen-spectrum and entropy curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .objectives import entropy_rows


def _encode_float(v):
    if v is None or math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


@dataclass
class DivergenceReport:
    h_div_estimate: float | None = None
    gamma_star: float | None = None
    a_distance: float | None = None
    domain_clf_error: float | None = None

    def to_dict(self) -> dict:
        return {k: _encode_float(v) for k, v in asdict(self).items()}


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    cumulative_mass: np.ndarray

    def top_mass(self, k: int) -> float:
        """Share of the trace carried by the ``k`` largest eigenvalues."""
        if not len(self.cumulative_mass):
            return 0.0
        return float(self.cumulative_mass[min(k, len(self.cumulative_mass)) - 1])

    def to_dict(self) -> dict:
        return {"eigenvalues": self.eigenvalues.tolist(), "cumulative_mass": self.cumulative_mass.tolist()}


def write_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# -- entropy-threshold divergence -----------------------------------------------


def entropy_threshold_divergence(source_probs, target_probs) -> tuple[float, float]:
    """Empirical divergence of the hypothesis class ``h(f) = [H(p(f)) >= gamma]``.

    Returns ``(2 * max_gamma |Pr_s[H >= gamma] - Pr_t[H >= gamma]|, gamma_star)``.
    Thresholds are -inf, +inf and every midpoint between consecutive distinct
    pooled entropies; this is exhaustive for the empirical measures. Ties pick
    the smallest threshold.
    """
    hs = entropy_rows(source_probs)
    ht = entropy_rows(target_probs)
    return threshold_divergence(hs, ht)


def threshold_divergence(hs, ht) -> tuple[float, float]:
    """Same as :func:`entropy_threshold_divergence` but on precomputed scores."""
    hs = np.sort(np.asarray(hs, dtype=np.float64))
    ht = np.sort(np.asarray(ht, dtype=np.float64))
    ns, nt = len(hs), len(ht)
    if ns == 0 or nt == 0:
        raise ContractError("both samples must be nonempty")
    pooled = np.unique(np.concatenate([hs, ht]))
    gammas = np.concatenate([[-np.inf], (pooled[:-1] + pooled[1:]) / 2.0, [np.inf]])
    # count of values >= gamma
    cs = ns - np.searchsorted(hs, gammas, side="left")
    ct = nt - np.searchsorted(ht, gammas, side="left")
    # integer cross-multiplication keeps the comparison exact
    diffs = [abs(int(a) * nt - int(b) * ns) for a, b in zip(cs, ct)]
    best = max(diffs)
    i = diffs.index(best)
    return 2 * best / (ns * nt), float(gammas[i])


# -- proxy A-distance -------------------------------------------------------------


def fit_logistic(X, y, tol: float = 1e-6, max_iter: int = 5000, lr: float = 1.0):
    """Full-batch gradient descent on mean logistic loss. Returns (w, b, iters)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        z = X @ w + b
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        r = p - y
        gw = X.T @ r / n
        gb = r.mean()
        if max(np.abs(gw).max(initial=0.0), abs(gb)) < tol:
            break
        w -= lr * gw
        b -= lr * gb
    return w, b, it


def proxy_a_distance(source_feats, target_feats, seed: int = 0) -> tuple[float, float]:
    """Train a linear domain classifier on half of each domain, test on the other half.

    Returns ``(2 * (1 - 2 * eps), eps)`` with ``eps`` the held-out error.
    """
    S = np.asarray(source_feats, dtype=np.float64)
    T = np.asarray(target_feats, dtype=np.float64)
    if len(S) < 10 or len(T) < 10:
        raise ContractError("need at least 10 samples per domain")
    rng = np.random.default_rng(seed)
    ps, pt = rng.permutation(len(S)), rng.permutation(len(T))
    hs, ht = len(S) // 2, len(T) // 2
    X_tr = np.vstack([S[ps[:hs]], T[pt[:ht]]])
    y_tr = np.r_[np.zeros(hs), np.ones(ht)]
    X_te = np.vstack([S[ps[hs:]], T[pt[ht:]]])
    y_te = np.r_[np.zeros(len(S) - hs), np.ones(len(T) - ht)]
    mu = X_tr.mean(axis=0)
    sd = X_tr.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    w, b, _ = fit_logistic((X_tr - mu) / sd, y_tr)
    pred = ((X_te - mu) / sd @ w + b) > 0
    eps = float(np.mean(pred != y_te.astype(bool)))
    return a_distance_from_error(eps), eps


def a_distance_from_error(eps: float) -> float:
    return 2.0 * (1.0 - 2.0 * eps)


# -- eigen-spectrum ------------------------------------------------------------


def jacobi_eigh(A, tol: float = 1e-10, max_sweeps: int = 100):
    """Cyclic Jacobi rotations on a symmetric matrix.

    Sweeps until the off-diagonal Frobenius norm is at most ``tol``. Returns
    (eigenvalues, eigenvectors as columns, sweeps), unsorted.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise ContractError(f"need a square matrix, got {A.shape}")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ContractError("matrix is not symmetric")
    A = (A + A.T) / 2.0
    V = np.eye(n)
    sweeps = 0
    while sweeps < max_sweeps and _off_norm(A) > tol:
        sweeps += 1
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                diff = A[q, q] - A[p, p]
                if abs(apq) < 1e-150 * abs(diff):
                    t = apq / diff  # theta would overflow; tan(phi) ~ 1/(2 theta)
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    return np.diag(A).copy(), V, sweeps


def _off_norm(A: np.ndarray) -> float:
    off = A - np.diag(np.diag(A))
    return float(np.sqrt(np.sum(off * off)))


def covariance(feats) -> np.ndarray:
    X = np.asarray(feats, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ContractError("features must be an n x d matrix with d > 0")
    if X.shape[0] < 2:
        raise ContractError("need at least two rows")
    C = X - X.mean(axis=0)
    return C.T @ C / (X.shape[0] - 1)


def covariance_spectrum(feats) -> SpectrumReport:
    """Descending, nonnegative eigenvalues of the sample covariance and their trace-normalized partial sums."""
    evals, _, _ = jacobi_eigh(covariance(feats))
    evals = np.sort(np.maximum(evals, 0.0))[::-1]
    total = evals.sum()
    cum = np.cumsum(evals) / total if total > 0 else np.zeros_like(evals)
    return SpectrumReport(evals, cum)


# -- curves -----------------------------------------------------------------------


def entropy_curve(records) -> list[tuple[int, float]]:
    if not records:
        raise ContractError("no metrics records")
    return [(r.iter, r.unlabeled_entropy_mean) for r in records]


def write_curve(series, path, header=("iter", "unlabeled_entropy_mean")) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for it, v in series:
            w.writerow([it, repr(float(v))])
