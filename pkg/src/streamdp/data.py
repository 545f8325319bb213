"""Dataset files and synthetic Gaussian mixture generation.

Dataset format (CSV, UTF-8)::

    d,<dimension>
    n,<row count>
    <x_1>,...,<x_d>
    ...

Values are written with Python's shortest round-trip ``repr`` so that
write -> read -> write is byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import invwishart

from .expfam import ConventionalNiw


class DatasetFormatError(ValueError):
    pass


def write_dataset(path, x) -> None:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError("dataset must be a 2-D array")
    if not np.all(np.isfinite(x)):
        raise ValueError("dataset contains non-finite values")
    n, d = x.shape
    lines = [f"d,{d}", f"n,{n}"]
    lines.extend(",".join(repr(float(v)) for v in row) for row in x)
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if len(text) < 2:
        raise DatasetFormatError(f"{path}: missing header")
    try:
        key_d, d = text[0].split(",")
        key_n, n = text[1].split(",")
        d, n = int(d), int(n)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: malformed header") from exc
    if key_d != "d" or key_n != "n" or d < 1 or n < 0:
        raise DatasetFormatError(f"{path}: header must be 'd,<dim>' then 'n,<count>'")
    rows = [line for line in text[2:] if line.strip()]
    if len(rows) != n:
        raise DatasetFormatError(f"{path}: header says {n} rows, found {len(rows)}")
    out = np.empty((n, d))
    for i, line in enumerate(rows):
        parts = line.split(",")
        if len(parts) != d:
            raise DatasetFormatError(f"{path}: row {i} has {len(parts)} values, expected {d}")
        try:
            out[i] = [float(p) for p in parts]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: row {i} is not numeric") from exc
    if not np.all(np.isfinite(out)):
        raise DatasetFormatError(f"{path}: non-finite values")
    return out


def write_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=int)
    Path(path).write_text("\n".join([f"n,{len(labels)}"] + [str(v) for v in labels]) + "\n")


def read_labels(path) -> np.ndarray:
    text = Path(path).read_text().split()
    n = int(text[0].split(",")[1])
    labels = np.array([int(v) for v in text[1:]], dtype=int)
    if len(labels) != n:
        raise DatasetFormatError(f"{path}: header says {n} labels, found {len(labels)}")
    return labels


@dataclass
class SyntheticMixture:
    x: np.ndarray
    labels: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def truth_dict(self) -> dict:
        return {"means": self.means.tolist(), "covs": self.covs.tolist(), "weights": self.weights.tolist()}


def sample_mixture_params(d: int, n_clusters: int, prior: ConventionalNiw, rng):
    """Draw ``n_clusters`` (mean, covariance) pairs from the NIW prior."""
    prior.validate()
    if prior.dim != d:
        raise ValueError(f"prior dimension {prior.dim} does not match d={d}")
    covs = invwishart.rvs(df=prior.nu, scale=prior.psi, size=n_clusters, random_state=rng)
    covs = np.asarray(covs, dtype=float).reshape(n_clusters, d, d)
    means = np.stack([rng.multivariate_normal(prior.mu, c / prior.kappa) for c in covs])
    return means, covs


def draw_from_mixture(n: int, means, covs, weights, rng):
    labels = rng.choice(len(weights), size=n, p=weights)
    chols = np.linalg.cholesky(covs)
    z = rng.standard_normal((n, means.shape[1]))
    x = means[labels] + np.einsum("nij,nj->ni", chols[labels], z)
    return x, labels


def generate(n: int, d: int, n_clusters: int, prior: ConventionalNiw, seed: int = 0,
             n_test: int = 0):
    """Synthetic DP-style Gaussian mixture with symmetric weights.

    Returns the training :class:`SyntheticMixture` and, when ``n_test > 0``,
    a test mixture drawn from the same components (otherwise ``None``).
    """
    if n < 1 or d < 1 or n_clusters < 1:
        raise ValueError("n, d and n_clusters must be positive")
    rng = np.random.default_rng(seed)
    means, covs = sample_mixture_params(d, n_clusters, prior, rng)
    weights = np.full(n_clusters, 1.0 / n_clusters)
    x, labels = draw_from_mixture(n, means, covs, weights, rng)
    train = SyntheticMixture(x, labels, means, covs, weights)
    test = None
    if n_test:
        xt, lt = draw_from_mixture(n_test, means, covs, weights, rng)
        test = SyntheticMixture(xt, lt, means, covs, weights)
    return train, test


def write_truth(path, mix: SyntheticMixture) -> None:
    Path(path).write_text(json.dumps(mix.truth_dict(), indent=1))
