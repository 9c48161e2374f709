"""Distortion norms, Frechet distance between Gaussian fits, gradient deviation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._rng import make_rng
from .errors import InvalidStatsError, ParameterError

EMBEDDING_KINDS = ("identity", "average-pool", "random-projection")
TRAJECTORY_HEADER = ["query", "frechet", "embedding", "batch"]


@dataclass(frozen=True)
class FrechetStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise ParameterError(f"covariance shape {cov.shape} does not match mean length {mu.size}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-9 * max(1.0, float(np.abs(cov).max()))):
            raise InvalidStatsError("covariance is not symmetric")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class EmbeddingSpec:
    """``block`` is the pooling window (h, w); ``m`` the projection width."""

    kind: str = "identity"
    block: tuple | None = None
    m: int | None = None
    seed: int = 0
    image_shape: tuple | None = None

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ParameterError(f"unknown embedding kind {self.kind!r}")
        if self.kind == "average-pool":
            if self.block is None or self.image_shape is None:
                raise ParameterError("average-pool needs block and image_shape")
            b = (self.block, self.block) if np.isscalar(self.block) else tuple(self.block)
            object.__setattr__(self, "block", tuple(int(v) for v in b))
            object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
            if len(self.image_shape) != 3:
                raise ParameterError("image_shape must be (C, H, W)")
            _, H, W = self.image_shape
            bh, bw = self.block
            if bh < 1 or bw < 1 or H % bh or W % bw:
                raise ParameterError(f"block {self.block} does not divide image {H}x{W}")
        if self.kind == "random-projection" and (self.m is None or self.m < 1):
            raise ParameterError("random-projection needs m >= 1")


@dataclass(frozen=True)
class DeviationReport:
    linf: float
    l2: float


@dataclass(frozen=True)
class DeviationSummary:
    linf_mean: float
    linf_std: float
    l2_mean: float
    l2_std: float
    count: int


def distortion(x, x0, p: str = "l2") -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    if x.size != x0.size:
        raise ParameterError(f"length mismatch: {x.size} vs {x0.size}")
    diff = x - x0
    if p == "l2":
        return float(np.linalg.norm(diff))
    if p == "linf":
        return float(np.abs(diff).max()) if diff.size else 0.0
    raise ParameterError(f"unknown norm {p!r}")


def fit_gaussian_stats(embeddings) -> FrechetStats:
    """Sample mean and unbiased (n - 1) covariance."""
    E = np.asarray(embeddings, dtype=np.float64)
    if E.ndim == 1:
        E = E[:, None]
    if E.ndim != 2 or E.shape[0] < 2:
        raise ParameterError("need at least two embedding vectors of equal length")
    mu = E.mean(axis=0)
    C = E - mu
    cov = C.T @ C / (E.shape[0] - 1)
    return FrechetStats(mu, 0.5 * (cov + cov.T))


def _clamp(vals: np.ndarray) -> np.ndarray:
    # Eigenvalues within rounding noise of zero are zero; a square root would
    # otherwise amplify that noise to about sqrt(eps) of the spectrum scale.
    floor = 64 * np.finfo(float).eps * max(float(np.abs(vals).max(initial=0.0)), np.finfo(float).tiny)
    return np.where(vals > floor, vals, 0.0)


def _psd_sqrt(S: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return (vecs * np.sqrt(_clamp(vals))) @ vecs.T


def _check_psd(cov: np.ndarray, which: str) -> None:
    lo = float(np.linalg.eigvalsh(cov).min()) if cov.size else 0.0
    if lo < -1e-6:
        raise InvalidStatsError(f"{which} covariance has eigenvalue {lo:.3g} < -1e-6")


def frechet_distance(s1: FrechetStats, s2: FrechetStats) -> float:
    """``||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``, clamped at 0."""
    if s1.dim != s2.dim:
        raise ParameterError(f"dimension mismatch: {s1.dim} vs {s2.dim}")
    _check_psd(s1.covariance, "first")
    _check_psd(s2.covariance, "second")
    r1 = _psd_sqrt(s1.covariance)
    mid = r1 @ s2.covariance @ r1
    vals = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    cross = float(np.sqrt(_clamp(vals)).sum())
    dm = s1.mean - s2.mean
    val = float(dm @ dm) + float(np.trace(s1.covariance) + np.trace(s2.covariance)) - 2.0 * cross
    return max(val, 0.0)


def _projection(spec: EmbeddingSpec, d: int) -> np.ndarray:
    return make_rng(spec.seed, "projection", d, spec.m).standard_normal((d, spec.m)) / math.sqrt(spec.m)


def embed(samples, spec: EmbeddingSpec) -> np.ndarray:
    """Map each full vector to its embedding; returns an ``(n, m)`` array."""
    X = np.asarray(samples, dtype=np.float64)
    if spec.kind == "average-pool":
        C, H, W = spec.image_shape
        X = X.reshape(-1, C, H, W)
        bh, bw = spec.block
        pooled = X.reshape(-1, C, H // bh, bh, W // bw, bw).mean(axis=(3, 5))
        return pooled.reshape(pooled.shape[0], -1)
    X = X.reshape(X.shape[0], -1) if X.ndim > 1 else X[None, :]
    if spec.kind == "identity":
        return X.copy()
    return X @ _projection(spec, X.shape[1])


def manifold_distance_trajectory(traces, reference_set, spec: EmbeddingSpec,
                                 checkpoints: Sequence[int]) -> list[tuple[int, float]]:
    """Frechet distance between the embedded batch of snapshots and the references.

    ``traces`` is one trace per attacked sample (or a list of ready-made
    ``{query: sample}`` snapshot maps). At each checkpoint the latest snapshot
    at or before it is used.
    """
    traces = list(traces)
    if len(traces) < 2:
        raise ParameterError("need a batch of at least two attacked samples")
    ref = fit_gaussian_stats(embed(reference_set, spec))
    out = []
    for c in checkpoints:
        batch = []
        for tr in traces:
            snaps = getattr(tr, "snapshots", tr)
            keys = [k for k in snaps if k <= c]
            if not keys:
                raise KeyError(f"missing snapshot for checkpoint {c}")
            batch.append(np.asarray(snaps[max(keys)]).ravel())
        out.append((int(c), frechet_distance(fit_gaussian_stats(embed(batch, spec)), ref)))
    return out


def gradient_deviation(true_g, est_g) -> DeviationReport:
    a = np.asarray(true_g, dtype=np.float64).ravel()
    b = np.asarray(est_g, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ParameterError(f"length mismatch: {a.size} vs {b.size}")
    diff = a - b
    return DeviationReport(float(np.abs(diff).max()) if diff.size else 0.0,
                           float(np.linalg.norm(diff)))


def summarize_deviations(reports: Sequence[DeviationReport]) -> DeviationSummary:
    """Mean and population standard deviation of each column."""
    if not reports:
        raise ParameterError("need at least one deviation report")
    linf = np.array([r.linf for r in reports])
    l2 = np.array([r.l2 for r in reports])
    return DeviationSummary(float(linf.mean()), float(linf.std()), float(l2.mean()),
                            float(l2.std()), len(reports))
