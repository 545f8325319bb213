"""Shared central posterior: immutable snapshots, an exclusive merge lock, and the merge rule.

Readers take :class:`Snapshot` values without waiting on the merge lock; a
merge builds the next snapshot completely and publishes it with a single
reference swap, so partially merged states are never observable.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .component_id import Matching, RegStats, identify, naive_matching
from .expfam import NiwDomainError, NiwNatural
from .minibatch_vi import MinibatchPosterior

FORMAT_NAME = "streamdp.central-posterior"
FORMAT_VERSION = 1


class ProtocolError(ValueError):
    """A merge request inconsistent with the store it targets."""


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Snapshot:
    version: int
    etas: tuple
    s_stats: np.ndarray
    t_stats: np.ndarray

    @property
    def k(self) -> int:
        return len(self.etas)

    @property
    def reg_stats(self) -> list[RegStats]:
        return [RegStats(float(s), float(t)) for s, t in zip(self.s_stats, self.t_stats)]

    @property
    def prior_stats(self) -> list[tuple[float, float]]:
        return list(zip(self.s_stats.tolist(), self.t_stats.tolist()))


@dataclass(frozen=True)
class MergeReport:
    version: int
    k_o: int
    k_before: int
    k_after: int
    k_m: int
    matching: Matching
    lock_seconds: float
    snapshot: Snapshot

    @property
    def n_new(self) -> int:
        return self.k_m - self.k_o


class CentralPosterior:
    """The central DP mixture posterior shared by all workers."""

    def __init__(self, base_prior: NiwNatural, alpha: float):
        base_prior.check()
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.base_prior = base_prior
        self.alpha = float(alpha)
        self._state = Snapshot(0, (), _frozen([]), _frozen([]))
        self._merge_lock = threading.Lock()

    @property
    def dim(self) -> int:
        return self.base_prior.dim

    @property
    def k(self) -> int:
        return self._state.k

    @property
    def version(self) -> int:
        return self._state.version

    @property
    def etas(self) -> tuple:
        return self._state.etas

    @property
    def reg_stats(self) -> list[RegStats]:
        return self._state.reg_stats

    def snapshot(self) -> Snapshot:
        return self._state

    def merge(self, original: Snapshot, mb: MinibatchPosterior, component_id: bool = True) -> MergeReport:
        """Identify components and commit ``mb`` into the store under the merge lock.

        On any failure the store (including its version) is left unchanged.
        """
        self._validate(original, mb)
        with self._merge_lock:
            t0 = time.perf_counter()
            intermediate = self._state
            if original.version > intermediate.version or original.k > intermediate.k:
                raise ProtocolError("original snapshot is newer than the store")
            if component_id:
                matching = identify(original, intermediate, mb, self.base_prior, self.alpha)
            else:
                matching = naive_matching(mb)
            new_state = self._combine(original, intermediate, mb, matching)
            self._state = new_state
            held = time.perf_counter() - t0
        return MergeReport(version=new_state.version, k_o=original.k, k_before=intermediate.k,
                           k_after=new_state.k, k_m=mb.k_m, matching=matching, lock_seconds=held,
                           snapshot=new_state)

    def _validate(self, original: Snapshot, mb: MinibatchPosterior) -> None:
        if mb.k_o != original.k:
            raise ProtocolError(f"minibatch used {mb.k_o} prior components, snapshot has {original.k}")
        for eta in mb.etas:
            if eta.dim != self.dim:
                raise ProtocolError(f"minibatch component of dimension {eta.dim}, store has {self.dim}")
        if mb.k_m and len(mb.s_stats) != mb.k_m:
            raise ProtocolError("minibatch statistics do not match its component count")

    def _combine(self, original: Snapshot, intermediate: Snapshot, mb: MinibatchPosterior,
                 matching: Matching) -> Snapshot:
        sigma = matching.sigma
        k_o, k_i = original.k, intermediate.k
        k_new = max([k_i] + [j + 1 for j in sigma])
        etas = list(intermediate.etas) + [self.base_prior] * (k_new - k_i)
        s = np.concatenate([intermediate.s_stats, np.zeros(k_new - k_i)])
        t = np.concatenate([intermediate.t_stats, np.zeros(k_new - k_i)])
        for k, j in enumerate(sigma):
            eta_o = original.etas[j] if j < k_o else self.base_prior
            combined = etas[j] + (mb.etas[k] - eta_o)
            try:
                combined.check()
            except NiwDomainError as exc:
                raise NiwDomainError(f"merged component {j} is invalid: {exc}") from exc
            etas[j] = combined
            s[j] += mb.s_stats[k]
            t[j] += mb.t_stats[k]
        return Snapshot(intermediate.version + 1, tuple(etas), _frozen(s), _frozen(t))

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        state = self._state
        return {
            "format": FORMAT_NAME,
            "format_version": FORMAT_VERSION,
            "dim": self.dim,
            "alpha": self.alpha,
            "version": state.version,
            "base_prior": self.base_prior.to_dict(),
            "components": [dict(eta.to_dict(), s=float(s), t=float(t))
                           for eta, s, t in zip(state.etas, state.s_stats, state.t_stats)],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CentralPosterior":
        if doc.get("format") != FORMAT_NAME:
            raise ValueError(f"not a central posterior document: format={doc.get('format')!r}")
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported format_version {doc.get('format_version')}")
        central = cls(NiwNatural.from_dict(doc["base_prior"]), doc["alpha"])
        comps = doc["components"]
        etas = tuple(NiwNatural.from_dict(c) for c in comps)
        for eta in etas:
            if eta.dim != doc["dim"]:
                raise ValueError("component dimension does not match document dim")
        central._state = Snapshot(int(doc["version"]), etas, _frozen([c["s"] for c in comps]),
                                  _frozen([c["t"] for c in comps]))
        return central

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "CentralPosterior":
        return cls.from_dict(json.loads(Path(path).read_text()))
