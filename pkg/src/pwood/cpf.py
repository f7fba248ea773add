"""Class-agnostic pseudo-label filtering.

Pools the teacher's per-cell confidence scores across classes, fits a
two-component 1-D Gaussian mixture by EM and derives a dynamic threshold
from the fitted positive component.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .detector import DensePrediction
from .errors import DegenerateScores

VAR_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 100

DENSITY_MODE = "density"
POSTERIOR_CROSSING = "posterior"


@dataclass
class Gmm1D:
    """Two-component 1-D Gaussian mixture; positive = high-score component."""

    w_p: float
    w_n: float
    mu_p: float
    mu_n: float
    var_p: float
    var_n: float

    def component_density(self, s: np.ndarray, positive: bool) -> np.ndarray:
        mu = self.mu_p if positive else self.mu_n
        var = self.var_p if positive else self.var_n
        return np.exp(-0.5 * (s - mu) ** 2 / var) / math.sqrt(2.0 * math.pi * var)

    def responsibilities(self, s: np.ndarray) -> np.ndarray:
        """Posterior probability that each score belongs to the positive part."""
        s = np.asarray(s, dtype=float)
        dp = self.w_p * self.component_density(s, True)
        dn = self.w_n * self.component_density(s, False)
        return dp / np.maximum(dp + dn, 1e-300)

    def loglik(self, s: np.ndarray) -> float:
        s = np.asarray(s, dtype=float)
        mix = self.w_p * self.component_density(s, True) + self.w_n * self.component_density(
            s, False
        )
        return float(np.log(np.maximum(mix, 1e-300)).sum())


@dataclass
class GmmFit:
    """EM result: the mixture plus convergence bookkeeping."""

    gmm: Gmm1D
    iterations: int
    loglik: float
    loglik_trace: list[float]


@dataclass
class CpfResult:
    gmm: Gmm1D
    threshold: float
    policy: str
    iterations: int
    loglik: float


def fit_gmm(scores, tol: float = EM_TOL, max_iter: int = EM_MAX_ITER) -> GmmFit:
    """EM fit of the two-component mixture to a score list.

    Initialization: positive mean at max(s), negative at min(s), both weights
    0.5, both variances the pooled sample variance (floored). Components are
    relabeled after the fit so mu_p >= mu_n.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    if len(s) < 2 or np.all(s == s[0]):
        raise DegenerateScores(f"need >= 2 distinct scores, got {len(s)}")
    var0 = max(float(s.var()), VAR_FLOOR)
    mu = np.array([float(s.max()), float(s.min())])  # [positive, negative]
    var = np.array([var0, var0])
    w = np.array([0.5, 0.5])

    def _mix_loglik():
        d = _component_matrix(s, mu, var)
        return float(np.log(np.maximum(d @ w, 1e-300)).sum())

    trace = [_mix_loglik()]
    it = 0
    for it in range(1, max_iter + 1):
        # E step
        d = _component_matrix(s, mu, var) * w  # (n, 2)
        resp = d / np.maximum(d.sum(axis=1, keepdims=True), 1e-300)
        # M step
        nk = np.maximum(resp.sum(axis=0), 1e-300)
        mu = (resp * s[:, None]).sum(axis=0) / nk
        var = np.maximum(
            (resp * (s[:, None] - mu) ** 2).sum(axis=0) / nk, VAR_FLOOR
        )
        w = nk / len(s)
        trace.append(_mix_loglik())
        if abs(trace[-1] - trace[-2]) < tol:
            break

    if mu[0] >= mu[1]:
        gmm = Gmm1D(w[0], w[1], mu[0], mu[1], var[0], var[1])
    else:
        gmm = Gmm1D(w[1], w[0], mu[1], mu[0], var[1], var[0])
    return GmmFit(gmm, it, trace[-1], trace)


def _component_matrix(s: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * (s[:, None] - mu) ** 2 / var) / np.sqrt(2.0 * math.pi * var)


def dynamic_threshold(fit: GmmFit, scores, policy: str = DENSITY_MODE) -> CpfResult:
    """Derive the filtering threshold from a fitted mixture.

    density (default): the observed score maximizing the weighted positive
    density w_p N(s; mu_p, var_p), i.e. the observed score nearest mu_p.
    posterior: the smallest observed score whose positive responsibility
    reaches 0.5.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    if len(s) == 0:
        raise DegenerateScores("no scores to threshold")
    gmm = fit.gmm
    if policy == DENSITY_MODE:
        dens = gmm.w_p * gmm.component_density(s, True)
        order = np.argsort(s, kind="stable")
        ss = s[order]
        best = int(np.argmax(dens[order]))
        threshold = float(ss[best])
    elif policy == POSTERIOR_CROSSING:
        ss = np.sort(s)
        resp = gmm.responsibilities(ss)
        hits = np.nonzero(resp >= 0.5)[0]
        threshold = float(ss[hits[0]]) if len(hits) else float(ss[-1])
    else:
        raise ValueError(f"unknown CPF policy {policy!r}")
    return CpfResult(gmm, threshold, policy, fit.iterations, fit.loglik)


def filter_pseudo_labels(
    dense: DensePrediction, result: CpfResult
) -> tuple[np.ndarray, np.ndarray]:
    """Active-cell mask and omega weights from a dense teacher prediction.

    Per-cell score = max class probability x centerness (class-agnostic);
    active cells are those at or above the threshold, weighted by their own
    score.
    """
    scores = dense.scores()
    active = scores >= result.threshold
    omega = np.where(active, scores, 0.0)
    return active, omega


def cpf_result_to_json(result: CpfResult) -> str:
    """The CLI/file interchange form of a CPF fit."""
    payload = {
        "w_p": result.gmm.w_p,
        "w_n": result.gmm.w_n,
        "mu_p": result.gmm.mu_p,
        "mu_n": result.gmm.mu_n,
        "var_p": result.gmm.var_p,
        "var_n": result.gmm.var_n,
        "threshold": result.threshold,
        "policy": result.policy,
        "iterations": result.iterations,
        "loglik": result.loglik,
    }
    return json.dumps(payload, indent=2, sort_keys=True)
