"""Mutual information between the sign of the input sub-gradient and the data manifold.

Everything here is one-dimensional: the mixture is folded onto ``x > 0`` so the
class-``+1`` Gaussian contributes ``p(+1, x)`` and its mirror image contributes
``p(-1, x)``. The integrals over ``x > 0`` are approximated by Riemann sums over
a :class:`RiemannPartition`.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from ._rng import derive_seed, make_rng
from .errors import DegenerateMarginalError, DomainError, ParameterError
from .gaussmix import required_sample_count

PARTITION_MODES = ("quantile-grid", "sorted-draws")
MI_MODES = ("definition", "literal-eq3")
SWEEP_HEADER = ["d", "c2", "epsilon", "n", "sigma", "mode", "mi",
                "lambda_plus", "lambda_minus", "seed"]

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class MIConfig:
    theta: float
    sigma: float
    epsilon: float = 0.0
    d: int = 1
    c2: float = 1.0
    partition_mode: str = "quantile-grid"
    n_override: int | None = None
    tail_mass: float | None = None

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if not math.isfinite(self.theta):
            raise ParameterError("theta must be finite")
        if self.partition_mode not in PARTITION_MODES:
            raise ParameterError(f"unknown partition mode {self.partition_mode!r}")
        if self.n_override is not None and self.n_override < 1:
            raise ParameterError(f"n_override must be >= 1, got {self.n_override}")
        if self.tail_mass is not None and not 0 < self.tail_mass < 0.5:
            raise ParameterError("tail_mass must lie in (0, 1/2)")

    @property
    def n(self) -> int:
        if self.n_override is not None:
            return self.n_override
        return required_sample_count(self.epsilon, self.d, self.c2)


@dataclass(frozen=True)
class RiemannPartition:
    points: np.ndarray
    deltas: np.ndarray
    midpoints: np.ndarray

    def __post_init__(self):
        p = self.points
        if p.ndim != 1 or p.size == 0:
            raise ParameterError("partition needs at least one point")
        if p[0] <= 0 or np.any(np.diff(p) <= 0):
            raise ParameterError("partition points must be positive and strictly increasing")

    @classmethod
    def from_points(cls, points) -> "RiemannPartition":
        points = np.asarray(points, dtype=np.float64)
        edges = np.concatenate(([0.0], points))
        return cls(points, np.diff(edges), 0.5 * (edges[:-1] + edges[1:]))

    def __len__(self) -> int:
        return self.points.size


@dataclass(frozen=True)
class MIResult:
    value: float
    lambda_plus: float
    lambda_minus: float
    n_used: int
    mode: str


def _check_positive(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise DomainError("densities are defined on x > 0 only")
    return x


def log_joint_density(g: int, x, theta: float, sigma: float):
    if g not in (-1, 1):
        raise ParameterError(f"g must be -1 or +1, got {g}")
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    x = _check_positive(x)
    return -0.5 * ((x - g * theta) / sigma) ** 2 - _LOG_SQRT_2PI - math.log(sigma)


def joint_density(g: int, x, theta: float, sigma: float):
    """Folded joint ``p(g, x)`` for ``x > 0``: a unit-mass normal centred at ``g * theta``."""
    return np.exp(log_joint_density(g, x, theta, sigma))


def manifold_marginal(x, theta: float, sigma: float):
    """``p(+1, x) + p(-1, x)``; integrates to one over ``x > 0``."""
    return np.exp(np.logaddexp(log_joint_density(1, x, theta, sigma),
                               log_joint_density(-1, x, theta, sigma)))


def folded_cdf(x, theta: float, sigma: float):
    x = np.asarray(x, dtype=np.float64)
    return ndtr((x - theta) / sigma) + ndtr((x + theta) / sigma) - 1.0


def folded_sf(x, theta: float, sigma: float):
    x = np.asarray(x, dtype=np.float64)
    return ndtr((theta - x) / sigma) + ndtr((-theta - x) / sigma)


def folded_quantile(levels, theta: float, sigma: float, iters: int = 200) -> np.ndarray:
    """Invert the folded-mixture CDF by vectorised bisection.

    Levels above 1/2 are matched on the survival function so that points deep
    in the upper tail keep full relative precision.
    """
    levels = np.asarray(levels, dtype=np.float64)
    if np.any((levels <= 0) | (levels >= 1)):
        raise ParameterError("quantile levels must lie in (0, 1)")
    theta = abs(theta)
    upper = levels > 0.5
    tails = 1.0 - levels
    lo = np.zeros_like(levels)
    hi = np.full_like(levels, theta + 40.0 * sigma)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = np.where(upper, folded_sf(mid, theta, sigma) > tails,
                         folded_cdf(mid, theta, sigma) < levels)
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * hi):
            break
    return 0.5 * (lo + hi)


def build_partition(config: MIConfig, seed: int = 0) -> RiemannPartition:
    """Partition of ``(0, inf)`` with ``n`` points.

    ``quantile-grid`` puts the points at levels ``k/(n+1)``, or at ``n`` evenly
    spaced levels in ``[tail_mass, 1 - tail_mass]`` when ``tail_mass`` is set.
    ``sorted-draws`` sorts ``n`` draws from the folded mixture.
    """
    n = config.n
    if n < 1:
        raise ParameterError("partition needs n >= 1")
    if config.partition_mode == "quantile-grid":
        if config.tail_mass is not None and n >= 2:
            levels = np.linspace(config.tail_mass, 1.0 - config.tail_mass, n)
        else:
            levels = np.arange(1, n + 1) / (n + 1)
        points = folded_quantile(levels, config.theta, config.sigma)
    else:
        rng = make_rng(seed, "partition")
        y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        points = np.sort(np.abs(y * config.theta + config.sigma * rng.standard_normal(n)))
    return RiemannPartition.from_points(points)


def gradient_marginal(g: int, partition: RiemannPartition, theta: float, sigma: float) -> float:
    """Riemann sum of ``p(g, x)`` over the partition (``lambda_+`` or ``lambda_-``)."""
    dens = joint_density(g, partition.midpoints, theta, sigma)
    return float(np.sum(dens * partition.deltas))


def _xlogy_terms(log_p: np.ndarray, log_ratio: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    p = np.exp(log_p)
    return np.where(p > 0, p * log_ratio * deltas, 0.0)


def _mi_definition(part: RiemannPartition, theta: float, sigma: float):
    lp = log_joint_density(1, part.midpoints, theta, sigma)
    lm = log_joint_density(-1, part.midpoints, theta, sigma)
    lam_p = float(np.sum(np.exp(lp) * part.deltas))
    lam_m = float(np.sum(np.exp(lm) * part.deltas))
    for lam, logs, g in ((lam_p, lp, "+1"), (lam_m, lm, "-1")):
        if lam == 0 and np.any(np.exp(logs) > 0):
            raise DegenerateMarginalError(f"gradient marginal for g={g} vanished")
    total = lam_p + lam_m
    if total == 0:
        raise DegenerateMarginalError("partition carries no probability mass")
    log_m = np.logaddexp(lp, lm)
    terms = np.zeros_like(lp)
    # The gradient marginal is renormalised over g so that the partitioned joint
    # is a proper distribution; otherwise truncated tails bias the value upward.
    if lam_p > 0:
        terms += _xlogy_terms(lp, lp - math.log(lam_p / total) - log_m, part.deltas)
    if lam_m > 0:
        terms += _xlogy_terms(lm, lm - math.log(lam_m / total) - log_m, part.deltas)
    return float(np.sum(terms)), lam_p, lam_m


def _mi_literal(part: RiemannPartition, theta: float, sigma: float):
    x = part.midpoints
    a = -((x - theta) ** 2) / (2 * sigma ** 2)
    b = -((x + theta) ** 2) / (2 * sigma ** 2)
    log_mix = np.logaddexp(-((x - theta) ** 2) / sigma ** 2, -((x + theta) ** 2) / sigma ** 2)
    norm = 1.0 / (math.sqrt(2 * math.pi) * sigma)
    lam_p = float(norm * np.sum(np.exp(a) * part.deltas))
    lam_m = float(norm * np.sum(np.exp(b) * part.deltas))
    for lam, logs, g in ((lam_p, a, "+1"), (lam_m, b, "-1")):
        if lam == 0 and np.any(np.exp(logs) > 0):
            raise DegenerateMarginalError(f"gradient marginal for g={g} vanished")
    prefactor = 2.0 / (math.sqrt(2 * math.pi) * sigma ** 2)
    value = 0.0
    if lam_p > 0:
        value += prefactor * np.sum(_xlogy_terms(a, a - math.log(lam_p) - log_mix, part.deltas))
    if lam_m > 0:
        value += prefactor * np.sum(_xlogy_terms(b, b - math.log(lam_m) - log_mix, part.deltas))
    return float(value), lam_p, lam_m


def mutual_information(config: MIConfig, seed: int = 0, mode: str = "definition",
                       partition: RiemannPartition | None = None) -> MIResult:
    """Riemann-approximated manifold-gradient MI in nats.

    ``definition`` substitutes the folded densities into the MI definition;
    ``literal-eq3`` reproduces the closed-form sum with its printed prefactor
    ``2/(sqrt(2 pi) sigma^2)`` and ``/sigma^2`` log-sum exponents.
    """
    if mode not in MI_MODES:
        raise ParameterError(f"unknown MI mode {mode!r}")
    part = partition if partition is not None else build_partition(config, seed)
    fn = _mi_definition if mode == "definition" else _mi_literal
    value, lam_p, lam_m = fn(part, config.theta, config.sigma)
    return MIResult(value, lam_p, lam_m, len(part), mode)


@dataclass(frozen=True)
class SweepCell:
    d: int
    c2: float
    epsilon: float
    n: int
    sigma: float
    mode: str
    result: MIResult
    seed: int

    def row(self) -> list[str]:
        f = lambda v: format(v, ".17g")
        return [str(self.d), f(self.c2), f(self.epsilon), str(self.n), f(self.sigma),
                self.mode, f(self.result.value), f(self.result.lambda_plus),
                f(self.result.lambda_minus), str(self.seed)]


def log_spaced_dims(lo: int = 1, hi: int = 1000, count: int = 30) -> list[int]:
    """``count`` distinct integers in ``[lo, hi]``, as close to log-spaced as rounding allows."""
    if hi - lo + 1 < count:
        raise ParameterError("range too small for the requested count")
    k = count
    while True:
        dims = np.unique(np.round(np.geomspace(lo, hi, k)).astype(int))
        if dims.size >= count:
            break
        k += 1
    # Trim surplus points from the dense low end, keeping both endpoints.
    while dims.size > count:
        gaps = np.diff(np.log(dims))
        i = int(np.argmin(gaps[:-1])) + 1
        dims = np.delete(dims, i)
    return [int(v) for v in dims]


def mi_sweep(d_values: Sequence[int], c2_values: Sequence[float],
             epsilon_values: Sequence[float], c: float = 0.5, c1: float = 0.5,
             mode: str = "definition", seed: int = 0, theta: float = 1.0,
             partition_mode: str = "quantile-grid") -> list[SweepCell]:
    """MI over a (d, c2, epsilon) grid, one cell per combination.

    ``sigma = c d^{1/4}`` when ``epsilon == 0`` and ``c1 d^{1/4}`` otherwise;
    ``n`` comes from :func:`required_sample_count`. Cells are emitted with
    ``c2`` outermost, then ``epsilon``, then ``d``.
    """
    if not (d_values and c2_values and epsilon_values):
        raise ParameterError("sweep value lists must be non-empty")
    cells = []
    for c2 in c2_values:
        for eps in epsilon_values:
            for d in d_values:
                sigma = (c if eps == 0 else c1) * d ** 0.25
                cfg = MIConfig(theta=theta, sigma=sigma, epsilon=float(eps), d=int(d),
                               c2=float(c2), partition_mode=partition_mode)
                cell_seed = derive_seed(seed, int(d), float(c2), float(eps))
                try:
                    res = mutual_information(cfg, cell_seed, mode)
                except ArithmeticError as exc:
                    raise type(exc)(f"cell d={d} c2={c2} epsilon={eps}: {exc}") from exc
                cells.append(SweepCell(int(d), float(c2), float(eps), res.n_used,
                                       sigma, mode, res, cell_seed))
    return cells


def write_sweep_csv(cells: Iterable[SweepCell], fh, meta: str | None = None) -> None:
    if meta is not None:
        fh.write(f"# {meta}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for cell in cells:
        w.writerow(cell.row())


def sweep_csv_text(cells: Iterable[SweepCell], meta: str | None = None) -> str:
    buf = io.StringIO()
    write_sweep_csv(cells, buf, meta)
    return buf.getvalue()
