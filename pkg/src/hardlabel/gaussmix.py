"""The (theta*, sigma)-Gaussian mixture data model and its linear classifiers.

Labels live in {-1, +1} here. Mapping to class indices happens in
:mod:`hardlabel.oracle`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from ._rng import make_rng
from .errors import ParameterError

_CHUNK = 1 << 16


@dataclass(frozen=True)
class GaussianModelSpec:
    theta_star: np.ndarray
    sigma: float
    d: int
    c: float = 0.5
    c1: float = 0.5
    c2: float = 1.0
    robust: bool = False

    def __post_init__(self):
        if self.d < 1:
            raise ParameterError(f"d must be >= 1, got {self.d}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        theta = np.asarray(self.theta_star, dtype=np.float64)
        if theta.shape != (self.d,):
            raise ParameterError(f"theta_star must have shape ({self.d},), got {theta.shape}")
        object.__setattr__(self, "theta_star", theta)


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    y: int

    def __post_init__(self):
        if self.y not in (-1, 1):
            raise ParameterError(f"label must be -1 or +1, got {self.y}")


@dataclass(frozen=True)
class Dataset:
    """Array-backed list of labeled samples. Iterating yields :class:`LabeledSample`."""

    X: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[LabeledSample]:
        for xi, yi in zip(self.X, self.y):
            yield LabeledSample(xi, int(yi))

    def __getitem__(self, i) -> LabeledSample:
        return LabeledSample(self.X[i], int(self.y[i]))


@dataclass(frozen=True)
class LinearClassifier:
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(w)):
            raise ParameterError("classifier weights must be finite")
        object.__setattr__(self, "w", w)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        """Labels in {-1, +1}; a zero score maps to +1."""
        s = np.asarray(X, dtype=np.float64) @ self.w
        return np.where(s >= 0, 1, -1)


@dataclass(frozen=True)
class RobustnessConfig:
    epsilon: float
    n: int = field(default=1)

    def __post_init__(self):
        if not 0 <= self.epsilon <= 0.25:
            raise ParameterError(f"epsilon must lie in [0, 1/4], got {self.epsilon}")
        if self.n < 1:
            raise ParameterError(f"n must be >= 1, got {self.n}")

    @classmethod
    def from_bound(cls, epsilon: float, d: int, c2: float) -> "RobustnessConfig":
        return cls(epsilon, required_sample_count(epsilon, d, c2))


def make_spec(d: int, c: float = 0.5, c1: float = 0.5, c2: float = 1.0,
              robust: bool = False, seed: int = 0,
              sigma: float | None = None) -> GaussianModelSpec:
    """Build a model with ``||theta*|| = sqrt(d)`` and ``sigma = c d^{1/4}``.

    The mean direction is uniform on the sphere (drawn from ``seed``). In robust
    mode the variance constant is ``c1``. ``sigma`` overrides the scaling rule.
    """
    if int(d) != d or d < 1:
        raise ParameterError(f"d must be a positive integer, got {d}")
    for name, v in (("c", c), ("c1", c1), ("c2", c2)):
        if not v > 0:
            raise ParameterError(f"{name} must be positive, got {v}")
    d = int(d)
    direction = make_rng(seed, "theta_star", d).standard_normal(d)
    theta = direction / np.linalg.norm(direction) * math.sqrt(d)
    if sigma is None:
        sigma = (c1 if robust else c) * d ** 0.25
    return GaussianModelSpec(theta, float(sigma), d, c, c1, c2, robust)


def sample_dataset(spec: GaussianModelSpec, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. pairs: ``y`` uniform on {-1, +1}, ``x ~ N(y theta*, sigma^2 I)``."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    rng = make_rng(seed, "dataset")
    y = np.where(rng.random(n) < 0.5, -1, 1)
    X = y[:, None] * spec.theta_star[None, :] + spec.sigma * rng.standard_normal((n, spec.d))
    return Dataset(X, y)


def _as_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, Dataset):
        return samples.X, samples.y
    samples = list(samples)
    if not samples:
        raise ParameterError("need at least one sample")
    X = np.stack([np.asarray(s.x, dtype=np.float64) for s in samples])
    y = np.array([s.y for s in samples])
    return X, y


def nonrobust_weight(sample: LabeledSample) -> LinearClassifier:
    return LinearClassifier(sample.y * np.asarray(sample.x, dtype=np.float64))


def robust_weight(samples: Dataset | Iterable[LabeledSample]) -> LinearClassifier:
    """Average of ``y_i x_i`` over the samples."""
    X, y = _as_arrays(samples)
    if len(y) == 0:
        raise ParameterError("need at least one sample")
    return LinearClassifier((y[:, None] * X).mean(axis=0))


def required_sample_count(epsilon: float, d: int, c2: float) -> int:
    """Training-set size needed for an l_inf-robust linear classifier at budget ``epsilon``.

    Returns 1 when ``epsilon <= d^{-1/4} / 4`` (ties go to this branch), otherwise
    ``max(1, ceil(c2 * epsilon^2 * sqrt(d)))``.
    """
    if not 0 <= epsilon <= 0.25:
        raise ParameterError(f"epsilon must lie in [0, 1/4], got {epsilon}")
    if d < 1:
        raise ParameterError(f"d must be >= 1, got {d}")
    if not c2 > 0:
        raise ParameterError(f"c2 must be positive, got {c2}")
    if epsilon <= 0.25 * d ** -0.25:
        return 1
    return max(1, math.ceil(c2 * epsilon ** 2 * math.sqrt(d)))


def classification_error(clf: LinearClassifier, spec: GaussianModelSpec,
                         trials: int, seed: int) -> float:
    """Monte-Carlo estimate of ``P[f_w(x) != y]`` under the model."""
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    rng = make_rng(seed, "classification_error")
    wrong = 0
    done = 0
    while done < trials:
        m = min(_CHUNK, trials - done)
        y = np.where(rng.random(m) < 0.5, -1, 1)
        X = y[:, None] * spec.theta_star + spec.sigma * rng.standard_normal((m, spec.d))
        wrong += int(np.count_nonzero(clf(X) != y))
        done += m
    return wrong / trials


def analytic_classification_error(clf: LinearClassifier, spec: GaussianModelSpec) -> float:
    """Closed form ``Phi(-w.theta* / (sigma ||w||))``; the score ``y w.x`` is Gaussian."""
    norm = float(np.linalg.norm(clf.w))
    if norm == 0:
        return 0.5
    return float(ndtr(-(clf.w @ spec.theta_star) / (spec.sigma * norm)))
