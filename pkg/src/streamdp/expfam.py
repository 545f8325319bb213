"""Normal-inverse-Wishart algebra in natural coordinates.

Convention used everywhere in the package (``d`` is the data dimension)::

    n1 = kappa * mu
    n2 = Psi + kappa * mu mu^T
    n3 = kappa
    n4 = nu + d + 2

With the component statistic ``T(mu, Sigma) = (Sigma^-1 mu, -1/2 Sigma^-1,
-1/2 mu^T Sigma^-1 mu, -1/2 log|Sigma|)`` and unit base measure, the NIW
density is ``exp(<eta, T> - A(eta))`` and one Gaussian observation ``x``
contributes the increment ``(x, x x^T, 1, 1)``. Conjugate updates and the
merge rule ``eta_i + eta_m - eta_o`` are therefore plain addition.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import gammaln

LOG_2PI = np.log(2.0 * np.pi)


class InvalidParameterError(ValueError):
    """Conventional NIW parameters outside their domain."""


class NiwDomainError(ValueError):
    """Natural parameters that do not describe a proper NIW density."""


def multigammaln(a, d: int):
    """log Gamma_d(a) = d(d-1)/4 log(pi) + sum_i log Gamma(a + (1 - i)/2)."""
    a = np.asarray(a, dtype=float)
    offsets = (1.0 - np.arange(1, d + 1)) / 2.0
    return d * (d - 1) / 4.0 * np.log(np.pi) + gammaln(a[..., None] + offsets).sum(-1)


def _freeze(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ConventionalNiw:
    mu: np.ndarray
    kappa: float
    psi: np.ndarray
    nu: float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        object.__setattr__(self, "mu", _freeze(mu))
        object.__setattr__(self, "psi", _freeze(psi))
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "nu", float(self.nu))

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def validate(self) -> None:
        d = self.dim
        if self.psi.shape != (d, d):
            raise InvalidParameterError(f"scatter shape {self.psi.shape} does not match dim {d}")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.psi))):
            raise InvalidParameterError("non-finite NIW parameters")
        if not self.kappa > 0:
            raise InvalidParameterError(f"kappa must be positive, got {self.kappa}")
        if not self.nu > d - 1:
            raise InvalidParameterError(f"nu must exceed d - 1 = {d - 1}, got {self.nu}")
        if not _is_spd(self.psi):
            raise InvalidParameterError("scatter matrix is not symmetric positive definite")


@dataclass(frozen=True)
class NiwNatural:
    """Natural parameters of one NIW component (also used for increments).

    Construction does not validate, since data increments are not proper
    NIW parameters on their own; call :meth:`check` where a density is
    required.
    """

    n1: np.ndarray
    n2: np.ndarray
    n3: float
    n4: float

    def __post_init__(self):
        object.__setattr__(self, "n1", _freeze(np.atleast_1d(self.n1)))
        object.__setattr__(self, "n2", _freeze(np.atleast_2d(self.n2)))
        object.__setattr__(self, "n3", float(self.n3))
        object.__setattr__(self, "n4", float(self.n4))

    @property
    def dim(self) -> int:
        return self.n1.shape[0]

    def __add__(self, other: "NiwNatural") -> "NiwNatural":
        return NiwNatural(self.n1 + other.n1, self.n2 + other.n2,
                          self.n3 + other.n3, self.n4 + other.n4)

    def __sub__(self, other: "NiwNatural") -> "NiwNatural":
        return NiwNatural(self.n1 - other.n1, self.n2 - other.n2,
                          self.n3 - other.n3, self.n4 - other.n4)

    def scatter(self) -> np.ndarray:
        return self.n2 - np.outer(self.n1, self.n1) / self.n3

    def is_valid(self) -> bool:
        d = self.dim
        if not (self.n3 > 0 and self.n4 - d - 2 > d - 1):
            return False
        return _is_spd(self.scatter())

    def check(self) -> "NiwNatural":
        if not self.n3 > 0:
            raise NiwDomainError(f"kappa term must be positive, got {self.n3}")
        nu = self.n4 - self.dim - 2
        if not nu > self.dim - 1:
            raise NiwDomainError(f"degrees of freedom {nu} not above d - 1")
        if not _is_spd(self.scatter()):
            raise NiwDomainError("recovered scatter matrix is not SPD")
        return self

    def to_dict(self) -> dict:
        return {"n1": self.n1.tolist(), "n2": self.n2.tolist(), "n3": self.n3, "n4": self.n4}

    @classmethod
    def from_dict(cls, doc: dict) -> "NiwNatural":
        return cls(np.asarray(doc["n1"], dtype=float), np.asarray(doc["n2"], dtype=float),
                   doc["n3"], doc["n4"])

    def allclose(self, other: "NiwNatural", rtol=0.0, atol=1e-12) -> bool:
        return (np.allclose(self.n1, other.n1, rtol=rtol, atol=atol)
                and np.allclose(self.n2, other.n2, rtol=rtol, atol=atol)
                and np.isclose(self.n3, other.n3, rtol=rtol, atol=atol)
                and np.isclose(self.n4, other.n4, rtol=rtol, atol=atol))


def zero_increment(d: int) -> NiwNatural:
    return NiwNatural(np.zeros(d), np.zeros((d, d)), 0.0, 0.0)


def _is_spd(m: np.ndarray) -> bool:
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        return False
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        return False
    return True


# ---------------------------------------------------------------------------
# parameterization bridge

def to_natural(p: ConventionalNiw) -> NiwNatural:
    p.validate()
    d = p.dim
    return NiwNatural(p.kappa * p.mu, p.psi + p.kappa * np.outer(p.mu, p.mu), p.kappa, p.nu + d + 2)


def from_natural(eta: NiwNatural) -> ConventionalNiw:
    eta.check()
    d = eta.dim
    return ConventionalNiw(eta.n1 / eta.n3, eta.n3, eta.scatter(), eta.n4 - d - 2)


# ---------------------------------------------------------------------------
# log-partition

def log_partition(eta: NiwNatural) -> float:
    """A(eta), the log normalizer of the NIW density in natural coordinates."""
    eta.check()
    d = eta.dim
    kappa = eta.n3
    nu = eta.n4 - d - 2
    chol = np.linalg.cholesky(eta.scatter())
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return float(0.5 * d * (LOG_2PI - np.log(kappa)) + 0.5 * nu * d * np.log(2.0)
                 + multigammaln(0.5 * nu, d) - 0.5 * nu * logdet)


def log_partition_many(n1, n2, n3, n4):
    """Vectorized A(eta) over a stack of K parameter sets.

    Returns ``(values, valid)``; entries failing the domain checks are set to
    ``nan`` and flagged ``False`` in ``valid`` instead of raising.
    """
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    n3 = np.asarray(n3, dtype=float)
    n4 = np.asarray(n4, dtype=float)
    k, d = n1.shape
    out = np.full(k, np.nan)
    valid = np.zeros(k, dtype=bool)
    if k == 0:
        return out, valid
    nu = n4 - d - 2
    ok = (n3 > 0) & (nu > d - 1)
    safe_kappa = np.where(ok, n3, 1.0)
    scatter = n2 - np.einsum("ki,kj->kij", n1, n1) / safe_kappa[:, None, None]
    ok &= np.all(np.isfinite(scatter), axis=(1, 2))
    ok &= np.all(np.abs(scatter - scatter.transpose(0, 2, 1))
                 <= 1e-10 * np.abs(scatter).max(axis=(1, 2))[:, None, None] + 1e-12, axis=(1, 2))
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return out, valid
    logdet = np.full(k, np.nan)
    try:
        chol = np.linalg.cholesky(scatter[idx])
        logdet[idx] = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(-1)
    except np.linalg.LinAlgError:
        for i in idx:
            try:
                c = np.linalg.cholesky(scatter[i])
            except np.linalg.LinAlgError:
                ok[i] = False
                continue
            logdet[i] = 2.0 * np.log(np.diag(c)).sum()
    idx = np.flatnonzero(ok)
    out[idx] = (0.5 * d * (LOG_2PI - np.log(n3[idx])) + 0.5 * nu[idx] * d * np.log(2.0)
                + multigammaln(0.5 * nu[idx], d) - 0.5 * nu[idx] * logdet[idx])
    valid[idx] = True
    return out, valid


def stack(etas: Sequence[NiwNatural], d: int | None = None):
    """Stack components into ``(n1, n2, n3, n4)`` arrays of leading size K."""
    if not etas:
        if d is None:
            raise ValueError("dimension required to stack an empty component list")
        return np.zeros((0, d)), np.zeros((0, d, d)), np.zeros(0), np.zeros(0)
    return (np.stack([e.n1 for e in etas]), np.stack([e.n2 for e in etas]),
            np.array([e.n3 for e in etas]), np.array([e.n4 for e in etas]))


def unstack(n1, n2, n3, n4) -> list[NiwNatural]:
    return [NiwNatural(n1[k], n2[k], n3[k], n4[k]) for k in range(len(n3))]


# ---------------------------------------------------------------------------
# conjugate updates

def data_stats(x, weight: float = 1.0) -> NiwNatural:
    """Natural-parameter increment contributed by ``x`` with soft weight ``weight``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or not np.all(np.isfinite(x)):
        raise ValueError("data_stats expects a finite d-vector")
    if not 0.0 <= weight <= 1.0:
        raise ValueError(f"weight must lie in [0, 1], got {weight}")
    return NiwNatural(weight * x, weight * np.outer(x, x), weight, weight)


def weighted_stats(x: np.ndarray, resp: np.ndarray):
    """Per-component increments for a data block under responsibilities.

    ``x`` is (N, d), ``resp`` is (N, K); returns stacked ``(n1, n2, n3, n4)``.
    """
    counts = resp.sum(0)
    return resp.T @ x, np.einsum("nk,ni,nj->kij", resp, x, x), counts, counts.copy()


def posterior_update(eta: NiwNatural, incr: NiwNatural) -> NiwNatural:
    return (eta + incr).check()


# ---------------------------------------------------------------------------
# predictive and marginal densities

def log_predictive(eta: NiwNatural, x) -> float:
    """Multivariate Student-t posterior predictive log density at ``x``."""
    eta.check()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(log_predictive_many(*stack([eta]), x[None, :])[0, 0])


def log_predictive_many(n1, n2, n3, n4, x: np.ndarray) -> np.ndarray:
    """Student-t predictive log densities, shape (N, K), for stacked components."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k, d = np.asarray(n1).shape
    kappa = np.asarray(n3, dtype=float)
    nu = np.asarray(n4, dtype=float) - d - 2
    mu = n1 / kappa[:, None]
    scatter = n2 - np.einsum("ki,kj->kij", n1, n1) / kappa[:, None, None]
    dof = nu - d + 1
    # predictive scale matrix = scatter * (kappa + 1) / (kappa * dof)
    factor = (kappa + 1.0) / (kappa * dof)
    chol = np.linalg.cholesky(scatter)
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(-1) + d * np.log(factor)
    diff = x[None, :, :] - mu[:, None, :]  # (K, N, d)
    sol = np.linalg.solve(chol, diff.transpose(0, 2, 1))  # (K, d, N)
    maha = (sol ** 2).sum(1) / factor[:, None]  # (K, N)
    out = (gammaln(0.5 * (dof + d)) - gammaln(0.5 * dof) - 0.5 * d * np.log(dof * np.pi)
           - 0.5 * logdet)[:, None] - 0.5 * (dof + d)[:, None] * np.log1p(maha / dof[:, None])
    return out.T


def log_marginal(eta_prior: NiwNatural, data) -> float:
    """log p(data) under the NIW-Gaussian model, via A(eta_post) - A(eta_prior)."""
    data = np.asarray(data, dtype=float)
    eta_prior.check()
    if data.size == 0:
        return 0.0
    data = data.reshape(len(data), eta_prior.dim)
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite data")
    n = data.shape[0]
    post = eta_prior + NiwNatural(data.sum(0), data.T @ data, n, n)
    return log_partition(post) - log_partition(eta_prior) - 0.5 * n * eta_prior.dim * LOG_2PI
