"""Component identification between a minibatch posterior and the central posterior.

Indices are 0-based. For a merge, ``original`` is the snapshot the worker used
as its prior (K_o components) and ``intermediate`` is the central state at
merge time (K_i >= K_o components). Snapshot regularization statistics are
running totals over all data merged so far, so the intermediate totals already
contain the original ones; the disjoint-subset sums ``s_i + s_o`` and
``t_i + t_o`` of the score are read directly from the intermediate totals.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .assignment import solve_lap
from .expfam import NiwNatural, log_partition_many, stack
from .minibatch_vi import MinibatchPosterior

FORBIDDEN_SCORE = -1e30


@dataclass(frozen=True)
class RegStats:
    s: float
    t: float

    def __post_init__(self):
        if not self.s <= 0:
            raise ValueError(f"s must be <= 0, got {self.s}")
        if not self.t >= 0:
            raise ValueError(f"t must be >= 0, got {self.t}")


@dataclass(frozen=True)
class ScoreMatrix:
    k_o: int
    k_i: int
    k_m: int
    r: np.ndarray

    @property
    def side(self) -> int:
        return self.k_i + self.k_m - self.k_o


@dataclass(frozen=True)
class Matching:
    """``sigma[k]`` is the central slot receiving minibatch component ``k``."""

    sigma: tuple
    lap_solved: bool = False
    lap_seconds: float = 0.0

    @property
    def n_components(self) -> int:
        return max(self.sigma) + 1 if self.sigma else 0


def eta_tilde(etas: Sequence[NiwNatural], base_prior: NiwNatural, k: int) -> NiwNatural:
    """Stored component ``k`` or the base prior when the posterior lacks it."""
    if k < 0:
        raise IndexError("component index must be nonnegative")
    return etas[k] if k < len(etas) else base_prior


def reg_bound_term(s_tilde, t_tilde, alpha: float):
    """Per-component DP regularization lower-bound term.

    ``(1 - exp(s)) log(alpha) + log Gamma(max(2, t))``; works elementwise on
    arrays and returns a float for scalar input.
    """
    s = np.asarray(s_tilde, dtype=float)
    t = np.asarray(t_tilde, dtype=float)
    out = -np.expm1(s) * np.log(alpha) + gammaln(np.maximum(2.0, t))
    return float(out) if out.ndim == 0 else out


def eppf_log_unnorm(counts, alpha: float) -> float:
    """log of alpha^(|K|-1) prod_k (n_k - 1)! for nonempty cluster sizes ``counts``."""
    counts = np.asarray(counts, dtype=float)
    if counts.size == 0:
        raise ValueError("counts must be nonempty")
    if np.any(counts < 1):
        raise ValueError("cluster counts must be >= 1")
    return float((counts.size - 1) * np.log(alpha) + gammaln(counts).sum())


def mc_regularization(resp_blocks, alpha: float, n_samples: int, seed: int = 0):
    """Monte Carlo estimate of E_zeta[log unnormalized EPPF] and its standard error.

    Labels are drawn independently per row of the stacked responsibility
    blocks; blocks with fewer columns are zero-padded.
    """
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in resp_blocks]
    k = max(b.shape[1] for b in blocks)
    resp = np.concatenate([np.pad(b, ((0, 0), (0, k - b.shape[1]))) for b in blocks])
    n = resp.shape[0]
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(resp, axis=1)
    cdf[:, -1] = 1.0
    log_alpha = np.log(alpha)
    values = np.empty(n_samples)
    chunk = max(1, 2_000_000 // max(1, n * k))
    for start in range(0, n_samples, chunk):
        m = min(chunk, n_samples - start)
        u = rng.random((m, n, 1))
        labels = (cdf[None, :, :] < u).sum(-1)
        counts = np.zeros((m, k))
        np.add.at(counts, (np.repeat(np.arange(m), n), labels.ravel()), 1.0)
        nonempty = counts > 0
        values[start:start + m] = ((nonempty.sum(1) - 1) * log_alpha
                                   + np.where(nonempty, gammaln(np.maximum(counts, 1.0)), 0.0).sum(1))
    se = values.std(ddof=1) / np.sqrt(n_samples) if n_samples > 1 else 0.0
    return float(values.mean()), float(se)


# ---------------------------------------------------------------------------
# score matrix

def _regs(snap):
    return np.asarray(snap.s_stats, dtype=float), np.asarray(snap.t_stats, dtype=float)


def _check_consistent(original, intermediate, mb: MinibatchPosterior):
    k_o = len(original.etas)
    if mb.k_o != k_o:
        raise ValueError(f"minibatch was computed against {mb.k_o} prior components, snapshot has {k_o}")
    if len(intermediate.etas) < k_o:
        raise ValueError("intermediate posterior has fewer components than the original")
    return k_o, len(intermediate.etas), mb.k_m


def _score_block(rows, cols, original, intermediate, mb, base_prior, alpha):
    """Scores R[k, j] for the given minibatch-row and central-column index arrays."""
    d = base_prior.dim
    k_o, k_i, k_m = len(original.etas), len(intermediate.etas), mb.k_m
    base = [arr[0] for arr in stack([base_prior])]

    def padded(etas, size):
        arrs = stack(list(etas), d)
        extra = size - len(etas)
        if extra <= 0:
            return arrs
        return tuple(np.concatenate([a, np.repeat(b[None], extra, axis=0)]) for a, b in zip(arrs, base))

    side = k_i + k_m - k_o
    eo = padded(original.etas, side)
    ei = padded(intermediate.etas, side)
    em = padded(mb.etas, side)
    s_i, t_i = _regs(intermediate)
    s_i = np.concatenate([s_i, np.zeros(side - k_i)])
    t_i = np.concatenate([t_i, np.zeros(side - k_i)])
    s_m = np.concatenate([mb.s_stats, np.zeros(side - k_m)])
    t_m = np.concatenate([mb.t_stats, np.zeros(side - k_m)])

    kk, jj = np.meshgrid(rows, cols, indexing="ij")
    kk, jj = kk.ravel(), jj.ravel()
    comb = tuple(a_i[jj] + a_m[kk] - a_o[jj] for a_i, a_m, a_o in zip(ei, em, eo))
    a_val, valid = log_partition_many(*comb)
    reg = reg_bound_term(s_i[jj] + s_m[kk], t_i[jj] + t_m[kk], alpha)
    score = np.where(valid, a_val + reg, FORBIDDEN_SCORE)
    return score.reshape(len(rows), len(cols))


def build_score_matrix(original, intermediate, mb: MinibatchPosterior, base_prior: NiwNatural,
                       alpha: float) -> ScoreMatrix:
    """Full (K_i + K'_m)-square matrix of matching scores.

    Cells whose combined natural parameters are not a valid NIW are assigned
    ``FORBIDDEN_SCORE`` so the assignment problem stays solvable.
    """
    k_o, k_i, k_m = _check_consistent(original, intermediate, mb)
    side = k_i + k_m - k_o
    idx = np.arange(side)
    r = _score_block(idx, idx, original, intermediate, mb, base_prior, alpha) if side else np.zeros((0, 0))
    return ScoreMatrix(k_o=k_o, k_i=k_i, k_m=k_m, r=r)


def identify(original, intermediate, mb: MinibatchPosterior, base_prior: NiwNatural,
             alpha: float) -> Matching:
    """Optimal 1-to-1 map from minibatch components to central slots.

    The first K_o components map to themselves. When either side has no new
    components nothing is solved: new minibatch components take fresh slots
    in order. Otherwise the lower-right block of the score matrix is solved
    as a linear assignment problem.
    """
    k_o, k_i, k_m = _check_consistent(original, intermediate, mb)
    if k_m == k_o or k_i == k_o:
        return Matching(sigma=tuple(range(k_o)) + tuple(range(k_i, k_i + k_m - k_o)))
    idx = np.arange(k_o, k_i + k_m - k_o)
    block = _score_block(idx, idx, original, intermediate, mb, base_prior, alpha)
    # CPU time of this thread, so preemption by other workers is not counted
    t0 = time.thread_time()
    perm = solve_lap(block)
    elapsed = time.thread_time() - t0
    sigma = tuple(range(k_o)) + tuple(int(k_o + perm[a]) for a in range(k_m - k_o))
    return Matching(sigma=sigma, lap_solved=True, lap_seconds=elapsed)


def naive_matching(mb: MinibatchPosterior) -> Matching:
    """Index-order map sigma(k) = k, ignoring the identification problem."""
    return Matching(sigma=tuple(range(mb.k_m)))
