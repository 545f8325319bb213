"""Truncated stick-breaking mean-field VI for a DP Gaussian mixture on one minibatch.

The central snapshot acts as the prior: existing component ``k`` keeps its NIW
posterior ``eta_ok`` as the prior on its parameters and its expected count
``t_ok`` enters the stick prior ``Beta(1 + t_ok, alpha + sum_{l>k} t_ol)``
(the stick-breaking posterior given those counts). New components use the base
prior ``eta_0`` and ``Beta(1, alpha)``.

Initialization is a single greedy Chinese-restaurant pass over the points in a
seeded random order: each visited point joins the component with the highest
``log(count) + log predictive`` or, if ``log(alpha) + log predictive`` under
``eta_0`` is higher, opens a new component seeded at that point. The
number of opened components (at most ``k_max - k_o``) sets the truncation for
the coordinate ascent that follows.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betaln, digamma, gammaln, logsumexp, xlogy

from .expfam import LOG_2PI, NiwNatural, log_partition_many, stack, unstack, weighted_stats

EMPTY_THRESHOLD = 1e-3


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class MinibatchPosterior:
    k_o: int
    etas: tuple
    resp: np.ndarray
    s_stats: np.ndarray
    t_stats: np.ndarray
    elbo_trace: tuple = field(default=())

    @property
    def k_m(self) -> int:
        return len(self.etas)

    @property
    def n_new(self) -> int:
        return self.k_m - self.k_o


def stats_from_resp(resp) -> tuple[np.ndarray, np.ndarray]:
    """Regularization statistics ``s_k = sum_j log(1 - pi_jk)``, ``t_k = sum_j pi_jk``.

    A responsibility of exactly 1 yields ``s_k = -inf`` (the component is
    certainly nonempty).
    """
    resp = np.asarray(resp, dtype=float)
    if resp.ndim != 2:
        raise ValueError("responsibilities must be an N x K matrix")
    if resp.shape[0] == 0:
        return np.zeros(resp.shape[1]), np.zeros(resp.shape[1])
    with np.errstate(divide="ignore"):
        s = np.log1p(-np.clip(resp, 0.0, 1.0)).sum(0)
    return s, resp.sum(0)


# ---------------------------------------------------------------------------
# expectations under q

def _stick_expectations(g1: np.ndarray, g2: np.ndarray):
    """E[log v_k], E[log(1 - v_k)] for the first K-1 sticks; the last stick is 1."""
    dsum = digamma(g1 + g2)
    return digamma(g1) - dsum, digamma(g2) - dsum


def _expected_log_weights(elog_v, elog_1mv):
    k = len(elog_v) + 1
    out = np.zeros(k)
    out[:-1] = elog_v
    out[1:] += np.cumsum(elog_1mv)
    return out


def _expected_loglik(n1, n2, n3, n4, x):
    """E_q[log N(x_j | mu_k, Sigma_k)] for all points and components, shape (N, K)."""
    k, d = n1.shape
    kappa = n3
    nu = n4 - d - 2
    mu = n1 / kappa[:, None]
    scatter = n2 - np.einsum("ki,kj->kij", n1, n1) / kappa[:, None, None]
    chol = np.linalg.cholesky(scatter)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(-1)
    elogdet_prec = (digamma(0.5 * (nu[:, None] - np.arange(d))).sum(1)
                    + d * np.log(2.0) - logdet)
    diff = x[None, :, :] - mu[:, None, :]
    sol = np.linalg.solve(chol, diff.transpose(0, 2, 1))
    maha = (sol ** 2).sum(1)  # (K, N)
    out = (-0.5 * d * LOG_2PI + 0.5 * elogdet_prec - 0.5 * d / kappa)[:, None] - 0.5 * nu[:, None] * maha
    return out.T


# ---------------------------------------------------------------------------
# greedy initialization

class _PredictiveCache:
    """Student-t predictive parameters kept per component during the greedy pass."""

    def __init__(self, d: int, capacity: int):
        self.d = d
        self.mu = np.zeros((capacity, d))
        self.prec = np.zeros((capacity, d, d))
        self.const = np.zeros(capacity)
        self.dof = np.ones(capacity)

    def set(self, k: int, n1, n2, n3, n4):
        d = self.d
        nu = n4 - d - 2
        dof = nu - d + 1
        mu = n1 / n3
        scale = (n2 - np.outer(n1, n1) / n3) * (n3 + 1.0) / (n3 * dof)
        _, logdet = np.linalg.slogdet(scale)
        self.mu[k] = mu
        self.prec[k] = np.linalg.inv(scale)
        self.dof[k] = dof
        self.const[k] = (gammaln(0.5 * (dof + d)) - gammaln(0.5 * dof)
                         - 0.5 * d * np.log(dof * np.pi) - 0.5 * logdet)

    def logpdf(self, x, k: int):
        diff = x - self.mu[:k]
        maha = np.einsum("ki,kij,kj->k", diff, self.prec[:k], diff)
        return self.const[:k] - 0.5 * (self.dof[:k] + self.d) * np.log1p(maha / self.dof[:k])


def _greedy_init(x, prior, base, counts_o, alpha, k_max, rng):
    n, d = x.shape
    k_o = len(counts_o)
    n1 = np.zeros((k_max, d))
    n2 = np.zeros((k_max, d, d))
    n3 = np.zeros(k_max)
    n4 = np.zeros(k_max)
    n1[:k_o], n2[:k_o], n3[:k_o], n4[:k_o] = prior
    counts = np.zeros(k_max)
    counts[:k_o] = counts_o
    cache = _PredictiveCache(d, k_max + 1)
    for k in range(k_o):
        cache.set(k, n1[k], n2[k], n3[k], n4[k])
    cache.set(k_max, *base)
    base_slot = k_max

    # canonical row order first so the visit order does not depend on row positions
    canonical = np.lexsort(x.T[::-1])
    order = canonical[rng.permutation(n)]
    labels = np.empty(n, dtype=int)
    k = k_o
    log_alpha = np.log(alpha)
    for j in order:
        xj = x[j]
        if k > 0:
            scores = np.log(np.maximum(counts[:k], 1e-300)) + cache.logpdf(xj, k)
            best = int(np.argmax(scores))
            best_score = scores[best]
        else:
            best, best_score = -1, -np.inf
        if k < k_max:
            diff = xj - cache.mu[base_slot]
            maha = diff @ cache.prec[base_slot] @ diff
            new_score = log_alpha + cache.const[base_slot] - 0.5 * (cache.dof[base_slot] + d) * np.log1p(
                maha / cache.dof[base_slot])
            if new_score > best_score:
                best = k
                n1[k], n2[k], n3[k], n4[k] = base
                k += 1
        labels[j] = best
        counts[best] += 1.0
        n1[best] += xj
        n2[best] += np.outer(xj, xj)
        n3[best] += 1.0
        n4[best] += 1.0
        cache.set(best, n1[best], n2[best], n3[best], n4[best])
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    return resp


# ---------------------------------------------------------------------------
# coordinate ascent

def _stick_prior(t_o: np.ndarray, k_total: int, alpha: float):
    k_o = len(t_o)
    a = np.ones(k_total)
    b = np.full(k_total, float(alpha))
    if k_o:
        a[:k_o] += t_o
        tail = np.concatenate([np.cumsum(t_o[::-1])[::-1][1:], [0.0]])
        b[:k_o] += tail
    return a[:-1], b[:-1]


def _stick_update(a, b, counts):
    tail = np.cumsum(counts[::-1])[::-1]
    return a + counts[:-1], b + tail[1:]


def _elbo(x, resp, post, prior_a, a, b, g1, g2):
    n, d = x.shape
    a_post, _ = log_partition_many(*post)
    elog_v, elog_1mv = _stick_expectations(g1, g2)
    elogw = _expected_log_weights(elog_v, elog_1mv)
    value = (a_post - prior_a).sum() - 0.5 * n * d * LOG_2PI
    value += (resp @ elogw).sum() - xlogy(resp, resp).sum()
    value += ((a - g1) * elog_v + (b - g2) * elog_1mv - betaln(a, b) + betaln(g1, g2)).sum()
    return float(value)


def _posterior_arrays(prior, x, resp):
    s1, s2, s3, s4 = weighted_stats(x, resp)
    p1, p2, p3, p4 = prior
    return p1 + s1, p2 + s2, p3 + s3, p4 + s4


def run_minibatch_vi(data, prior_components: Sequence[NiwNatural], prior_stats, base_prior: NiwNatural,
                     alpha: float, k_max: int = 50, tol: float = 1e-6, max_iters: int = 500,
                     seed: int = 0) -> MinibatchPosterior:
    """Fit the minibatch posterior using the central snapshot as the prior.

    Parameters
    ----------
    data : (N, d) array
    prior_components : the K_o snapshot components ``eta_ok``
    prior_stats : K_o pairs ``(s_ok, t_ok)``
    base_prior : ``eta_0``
    alpha : DP concentration
    k_max : truncation level, must be at least K_o
    tol : relative ELBO change that stops the coordinate ascent
    max_iters : sweep limit
    seed : seeds the greedy visiting order
    """
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, base_prior.dim)
    if x.shape[0] < 1:
        raise ValueError("minibatch is empty")
    if x.shape[1] != base_prior.dim:
        raise ValueError(f"data dimension {x.shape[1]} does not match prior dimension {base_prior.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("minibatch contains non-finite values")
    k_o = len(prior_components)
    if k_max < k_o:
        raise ConfigurationError(f"k_max={k_max} is below the number of prior components {k_o}")
    if k_max < 1:
        raise ConfigurationError("k_max must be positive")
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    if len(prior_stats) != k_o:
        raise ConfigurationError("prior_stats length does not match prior_components")
    d = base_prior.dim
    t_o = np.array([float(t) for _, t in prior_stats]) if k_o else np.zeros(0)
    rng = np.random.default_rng(seed)
    base = stack([base_prior])
    base1 = tuple(arr[0] for arr in base)

    prior_o = stack(list(prior_components), d)
    resp = _greedy_init(x, prior_o, base1, t_o, alpha, k_max, rng)
    k = resp.shape[1]
    prior = tuple(np.concatenate([po, np.repeat(pb, k - k_o, axis=0)]) for po, pb in zip(prior_o, base))
    prior_a, prior_ok = log_partition_many(*prior)
    if not prior_ok.all():
        raise ValueError("prior components are not valid NIW parameters")
    a, b = _stick_prior(t_o, k, alpha)

    post = _posterior_arrays(prior, x, resp)
    g1, g2 = _stick_update(a, b, resp.sum(0))
    trace = []
    for it in range(max_iters):
        elog_v, elog_1mv = _stick_expectations(g1, g2)
        logits = _expected_log_weights(elog_v, elog_1mv)[None, :] + _expected_loglik(*post, x)
        resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        post = _posterior_arrays(prior, x, resp)
        g1, g2 = _stick_update(a, b, resp.sum(0))
        elbo = _elbo(x, resp, post, prior_a, a, b, g1, g2)
        trace.append(elbo)
        if it > 0 and abs(elbo - trace[-2]) <= tol * abs(elbo):
            break

    counts = resp.sum(0)
    keep = np.ones(k, dtype=bool)
    keep[k_o:] = counts[k_o:] >= EMPTY_THRESHOLD
    if not keep.all():
        resp = resp[:, keep]
        resp /= resp.sum(1, keepdims=True)
        prior = tuple(p[keep] for p in prior)
        post = _posterior_arrays(prior, x, resp)
    s, t = stats_from_resp(resp)
    resp.setflags(write=False)
    return MinibatchPosterior(k_o=k_o, etas=tuple(unstack(*post)), resp=resp, s_stats=s, t_stats=t,
                              elbo_trace=tuple(trace))
