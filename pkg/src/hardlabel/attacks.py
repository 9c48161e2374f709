"""Zeroth-order hard-label attacks.

All variants search over directions ``theta'`` in a (possibly reduced) space.
The boundary distance ``g(theta')`` is the shortest travel from ``x0`` along the
decoded direction that changes the victim's label; it is found with one query
per probe by bracketing and bisection.

Variants:

* ``opt``: finite-difference estimate of the gradient of ``g``.
* ``sign-opt``: sign-only estimate, one membership query per random direction.
* ``hsja``: one-point sign-probe estimate at the current boundary point
  (the step rule is the shared line search, not HopSkipJump's schedule).
* ``rays``: discrete hierarchical ray search over sign vectors.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from ._rng import make_rng
from .dimred import DimReducer
from .errors import (BudgetExhausted, DegenerateDirectionError, EstimationFailedError,
                     InitializationFailedError, ParameterError, PreconditionError)
from .oracle import HardLabelOracle

log = logging.getLogger(__name__)

VARIANTS = ("opt", "sign-opt", "hsja", "rays")
TRACE_HEADER = ["query", "l2", "linf", "g", "event"]


class DegenerateEstimateWarning(UserWarning):
    """Every HSJA probe landed on the same side of the boundary."""


@dataclass(frozen=True)
class StepRule:
    """Backtracking line search on ``g`` along the unit descent direction.

    Each iteration first tries ``grow`` times the last accepted step (capped at
    ``max_step``), then multiplies by ``shrink`` up to ``max_halvings`` times.
    """

    initial: float = 0.2
    shrink: float = 0.5
    max_halvings: int = 15
    grow: float = 2.0
    max_step: float = 2.0


@dataclass(frozen=True)
class AttackConfig:
    variant: str = "sign-opt"
    q: int = 200
    beta: float = 0.005
    step_rule: StepRule = field(default_factory=StepRule)
    budget: int = 25_000
    binsearch_tol: float = 1e-5
    reducer: DimReducer | None = None
    targeted: bool = False
    target_label: int | None = None
    seed: int = 0
    init_retries: int = 100
    max_radius: float | None = None
    num_probes: int = 100
    max_probes: int = 1000
    probe_radius: float | None = None
    rays_a: int = 0
    rays_b: int = 1
    snapshot_every: int = 1000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown attack variant {self.variant!r}")
        if self.q < 1 or self.budget < 1 or self.num_probes < 1:
            raise ParameterError("q, budget and num_probes must be >= 1")
        if not self.beta > 0 or not self.binsearch_tol > 0:
            raise ParameterError("beta and binsearch_tol must be positive")
        if self.targeted and self.target_label is None:
            raise ParameterError("targeted attacks need target_label")
        if self.snapshot_every < 1:
            raise ParameterError("snapshot_every must be >= 1")


@dataclass(frozen=True)
class RaySConfig:
    """``a`` skips levels on each advance (``s <- s + 1 + a``); ``b`` repeats each
    level's blocks so the level advances at block count ``2^s * b``."""

    a: int = 0
    b: int = 1
    budget: int = 25_000
    seed: int = 0
    binsearch_tol: float = 1e-5
    max_radius: float | None = None
    snapshot_every: int = 1000

    def __post_init__(self):
        if self.a < 0 or self.b < 1 or self.budget < 1:
            raise ParameterError("need a >= 0, b >= 1 and budget >= 1")


@dataclass
class SearchDirection:
    theta_prime: np.ndarray
    g_value: float = math.inf


@dataclass(frozen=True)
class TraceEvent:
    query: int
    l2: float
    linf: float
    g: float
    event: str
    elapsed: float


@dataclass
class AttackTrace:
    events: list
    x0: np.ndarray
    final_sample: np.ndarray
    success: bool
    queries_used: int
    source_label: int
    variant: str
    snapshots: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def final_l2(self) -> float:
        return float(np.linalg.norm(self.final_sample - self.x0)) if self.success else math.inf

    def distortion_at(self, query: int, p: str = "l2") -> float:
        """Best distortion recorded at or before ``query`` (``inf`` if none)."""
        best = math.inf
        for ev in self.events:
            if ev.query > query:
                break
            best = ev.l2 if p == "l2" else ev.linf
        return best

    def queries_to(self, threshold: float, p: str = "l2") -> int | None:
        for ev in self.events:
            if (ev.l2 if p == "l2" else ev.linf) <= threshold:
                return ev.query
        return None

    def snapshot_at(self, query: int) -> np.ndarray:
        keys = [k for k in self.snapshots if k <= query]
        if not keys:
            raise KeyError(f"no snapshot at or before query {query}")
        return self.snapshots[max(keys)]

    def csv_text(self, meta: str | None = None) -> str:
        buf = io.StringIO()
        write_trace_csv(self, buf, meta)
        return buf.getvalue()


def write_trace_csv(trace: AttackTrace, fh, meta: str | None = None) -> None:
    if meta is not None:
        fh.write(f"# {meta}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    f = lambda v: format(v, ".17g")
    for ev in trace.events:
        w.writerow([ev.query, f(ev.l2), f(ev.linf), f(ev.g), ev.event])


# -- boundary search -------------------------------------------------------

def _bisect(probe: Callable[[float], bool], lo: float, hi: float, tol: float):
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            hi = mid
        else:
            lo = mid
    return lo, hi


def _bracket_up(probe, start: float, limit: float, factor: Callable[[int], float]):
    """Probe increasing radii until a flip. Returns ``(lo, hi)`` or ``None``."""
    lo, k = 0.0, 0
    r = min(start, limit)
    while True:
        if probe(r):
            return lo, r
        if r >= limit:
            return None
        lo = r
        r = min(start * factor(k), limit)
        k += 1


def _bracket_down(probe, hi: float, shrink: Callable[[int], float]):
    """``hi`` is known adversarial; probe smaller radii until one is not."""
    top, k = hi, 0
    while True:
        f = shrink(k)
        if f <= 0 or k > 60:
            return 0.0, hi
        r = top * f
        if not probe(r):
            return r, hi
        hi = r
        k += 1


def boundary_bracket(probe: Callable[[float], bool], tol: float, limit: float,
                     initial: float | None = None):
    """Locate the first flip of ``probe`` on ``[0, limit]`` to width ``tol``.

    Without ``initial`` the radius doubles from ``min(1, limit)``; with it the
    search expands geometrically by 1%, 2%, 4%, ... around ``initial``.
    Returns ``(lo, hi)`` with ``probe(hi)`` true, or ``None`` if no flip.
    """
    if initial is None or not math.isfinite(initial) or initial <= 0:
        start = min(1.0, limit)
        if probe(start):
            lo, hi = _bracket_down(probe, start, lambda k: 0.5 ** (k + 1))
        else:
            found = _bracket_up(probe, 2 * start, limit, lambda k: 2.0 ** (k + 1))
            if found is None:
                return None
            lo, hi = found
            lo = max(lo, start)
    else:
        start = min(initial, limit)
        if probe(start):
            lo, hi = _bracket_down(probe, start, lambda k: 1 - 0.01 * 2 ** k)
        else:
            found = _bracket_up(probe, start * 1.01, limit, lambda k: 1 + 0.01 * 2 ** (k + 1))
            if found is None:
                return None
            lo, hi = found
            lo = max(lo, start)
    return _bisect(probe, lo, hi, tol)


class _Problem:
    """One attack instance: oracle, origin, source label, geometry of rays."""

    def __init__(self, oracle: HardLabelOracle, x0, src: int, reducer: DimReducer,
                 tol: float, max_radius: float | None, target: int | None = None):
        self.oracle = oracle
        self.x0 = np.asarray(x0, dtype=np.float64).ravel()
        self.src = src
        self.reducer = reducer
        self.tol = tol
        self.max_radius = max_radius if max_radius is not None else 10 * float(np.linalg.norm(self.x0)) + 10
        self.target = target
        self._z0 = reducer.encode(self.x0) if reducer.kind == "autoencoder" else None

    def is_adv(self, label: int) -> bool:
        return label == self.target if self.target is not None else label != self.src

    def ray(self, theta) -> tuple[np.ndarray, float]:
        """Unit direction in input space and the largest admissible radius."""
        if self.reducer.kind == "autoencoder":
            v = self.reducer.decode(self._z0 + theta) - self.x0
            n = float(np.linalg.norm(v))
            if n == 0:
                raise DegenerateDirectionError("decoded direction has zero norm")
            return v / n, min(n, self.max_radius)
        v = self.reducer.decode(theta)
        n = float(np.linalg.norm(v))
        if n == 0:
            raise DegenerateDirectionError("decoded direction has zero norm")
        return v / n, self.max_radius

    def point(self, theta, g: float) -> np.ndarray:
        unit, _ = self.ray(theta)
        return self.x0 + g * unit

    def probe_fn(self, unit):
        x0, oracle = self.x0, self.oracle
        return lambda r: self.is_adv(oracle.predict(x0 + r * unit))

    def g(self, theta, initial: float | None = None) -> float:
        unit, limit = self.ray(theta)
        found = boundary_bracket(self.probe_fn(unit), self.tol, limit, initial)
        return math.inf if found is None else found[1]

    def g_below(self, theta, bound: float) -> float:
        """``g(theta)`` if it is below ``bound`` (one query otherwise), else ``inf``."""
        unit, limit = self.ray(theta)
        if not math.isfinite(bound):
            found = boundary_bracket(self.probe_fn(unit), self.tol, limit)
            return math.inf if found is None else found[1]
        if bound > limit:
            return math.inf
        probe = self.probe_fn(unit)
        if not probe(bound):
            return math.inf
        lo, hi = _bracket_down(probe, bound, lambda k: 1 - 0.01 * 2 ** k)
        return _bisect(probe, lo, hi, self.tol)[1]


def _source_label(oracle: HardLabelOracle, x0, declared: int | None) -> int:
    label = oracle.predict(x0)
    if declared is not None and label != declared:
        raise PreconditionError(f"x0 is labeled {label}, not the declared source {declared}")
    return label


def boundary_distance(oracle: HardLabelOracle, x0, direction, tol: float = 1e-6,
                      max_radius: float | None = None, source_label: int | None = None,
                      initial: float | None = None) -> float:
    """Smallest ``t`` (to within ``tol``) with ``f(x0 + t * d/||d||) != f(x0)``.

    Costs one query to read the label of ``x0`` plus one per probe. Returns
    ``inf`` if no flip occurs within ``max_radius`` (default ``10 ||x0|| + 10``).
    """
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    src = _source_label(oracle, x0, source_label)
    prob = _Problem(oracle, x0, src, DimReducer.identity(x0.size), tol, max_radius)
    direction = np.asarray(direction, dtype=np.float64).ravel()
    if not np.linalg.norm(direction) > 0:
        raise DegenerateDirectionError("direction has zero norm")
    return prob.g(direction, initial)


# -- gradient estimators ----------------------------------------------------

def _opt_estimate(prob: _Problem, sd: SearchDirection, q: int, beta: float, rng):
    theta, g0 = sd.theta_prime, sd.g_value
    acc = np.zeros_like(theta)
    used = dropped = 0
    try:
        for _ in range(q):
            u = rng.standard_normal(theta.size)
            g1 = prob.g(theta + beta * u, initial=g0)
            if math.isinf(g1):
                dropped += 1
                continue
            acc += (g1 - g0) / beta * u
            used += 1
    except BudgetExhausted:
        if used == 0:
            raise
    if used == 0:
        raise EstimationFailedError(f"all {dropped} finite-difference legs were dropped")
    if dropped:
        log.info("opt estimate dropped %d of %d legs", dropped, q)
    return acc / q, used + dropped


def _signopt_estimate(prob: _Problem, sd: SearchDirection, q: int, beta: float, rng):
    theta, g0 = sd.theta_prime, sd.g_value
    acc = np.zeros_like(theta)
    used = 0
    try:
        for _ in range(q):
            u = rng.standard_normal(theta.size)
            unit, limit = prob.ray(theta + beta * u)
            if g0 > limit:
                sign = 1.0
            else:
                sign = -1.0 if prob.is_adv(prob.oracle.predict(prob.x0 + g0 * unit)) else 1.0
            acc += sign * u
            used += 1
    except BudgetExhausted:
        if used == 0:
            raise
    return acc, used


def _hsja_estimate(prob: _Problem, x_boundary, num_probes: int, probe_radius: float, rng):
    red = prob.reducer
    acc_dirs = []
    phis = []
    try:
        for _ in range(num_probes):
            u = rng.standard_normal(red.reduced_dim)
            v = red.decode(u) if red.is_linear else red.ae.decode(red.ae.encode(x_boundary) + u) - x_boundary
            n = float(np.linalg.norm(v))
            if n == 0:
                continue
            phi = 1.0 if prob.is_adv(prob.oracle.predict(x_boundary + probe_radius * v / n)) else -1.0
            acc_dirs.append(u / n)
            phis.append(phi)
    except BudgetExhausted:
        if not phis:
            raise
    if not phis:
        raise EstimationFailedError("no usable HSJA probes")
    phis = np.asarray(phis)
    U = np.asarray(acc_dirs)
    mean = phis.mean()
    if abs(mean) == 1.0:
        warnings.warn("all HSJA probes agree; estimate has no baseline correction",
                      DegenerateEstimateWarning, stacklevel=3)
        est = (phis[:, None] * U).mean(axis=0)
    else:
        est = ((phis - mean)[:, None] * U).mean(axis=0)
    return est, len(phis)


def _problem_for(oracle, x0, cfg: AttackConfig, source_label=None) -> _Problem:
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    reducer = cfg.reducer or DimReducer.identity(x0.size)
    src = source_label if source_label is not None else oracle.predict(x0)
    target = cfg.target_label if cfg.targeted else None
    return _Problem(oracle, x0, src, reducer, cfg.binsearch_tol, cfg.max_radius, target)


def _as_direction(prob: _Problem, theta_prime) -> SearchDirection:
    if isinstance(theta_prime, SearchDirection):
        sd = theta_prime
    else:
        sd = SearchDirection(np.asarray(theta_prime, dtype=np.float64).ravel())
    if not math.isfinite(sd.g_value):
        sd = SearchDirection(sd.theta_prime, prob.g(sd.theta_prime))
        if math.isinf(sd.g_value):
            raise EstimationFailedError("no boundary along the base direction")
    return sd


def opt_gradient_estimate(oracle, x0, theta_prime, cfg: AttackConfig, rng=None,
                          source_label: int | None = None) -> np.ndarray:
    """``(1/q) sum_i (g(theta' + beta u_i) - g(theta')) / beta * u_i`` with Gaussian ``u_i``."""
    prob = _problem_for(oracle, x0, cfg, source_label)
    sd = _as_direction(prob, theta_prime)
    rng = rng if rng is not None else make_rng(cfg.seed, "opt")
    return _opt_estimate(prob, sd, cfg.q, cfg.beta, rng)[0]


def signopt_gradient_estimate(oracle, x0, theta_prime, cfg: AttackConfig, rng=None,
                              source_label: int | None = None) -> np.ndarray:
    """``sum_i sgn(g(theta' + beta u_i) - g(theta')) u_i``.

    Each sign costs one query: the perturbed direction at the current radius
    ``g(theta')`` is adversarial exactly when its boundary is closer.
    """
    prob = _problem_for(oracle, x0, cfg, source_label)
    sd = _as_direction(prob, theta_prime)
    rng = rng if rng is not None else make_rng(cfg.seed, "sign-opt")
    return _signopt_estimate(prob, sd, cfg.q, cfg.beta, rng)[0]


def hsja_gradient_estimate(oracle, x_boundary, num_probes: int, probe_radius: float, seed: int,
                           source_label: int | None = None, x0=None,
                           reducer: DimReducer | None = None,
                           target_label: int | None = None) -> np.ndarray:
    """Baseline-corrected mean of ``phi(x_b + delta v_i) v_i`` over unit probes ``v_i``.

    ``phi`` is +1 on adversarial probes and -1 otherwise. The source label is
    read at ``x0`` (one query) unless given. With a reducer the probes are drawn
    in the reduced space, decoded, and the estimate is returned there.
    """
    x_boundary = np.asarray(x_boundary, dtype=np.float64).ravel()
    if source_label is None:
        if x0 is None:
            raise ParameterError("need source_label or x0")
        source_label = oracle.predict(x0)
    reducer = reducer or DimReducer.identity(x_boundary.size)
    prob = _Problem(oracle, x0 if x0 is not None else x_boundary, source_label, reducer,
                    1e-6, None, target_label)
    return _hsja_estimate(prob, x_boundary, num_probes, probe_radius, make_rng(seed, "hsja"))[0]


# -- initialisation ---------------------------------------------------------

def _init(prob: _Problem, cfg: AttackConfig, candidates, rng) -> SearchDirection:
    red = prob.reducer
    if cfg.targeted:
        if not candidates:
            raise ParameterError("targeted initialisation needs candidate samples")
        for xt in candidates:
            xt = np.asarray(xt, dtype=np.float64).ravel()
            if prob.oracle.predict(xt) != cfg.target_label:
                continue
            theta = red.encode(xt)
            g = prob.g(theta)
            if math.isfinite(g):
                return SearchDirection(theta, g)
        raise InitializationFailedError("no candidate of the target class yields a boundary")
    for _ in range(cfg.init_retries):
        theta = rng.standard_normal(red.reduced_dim)
        if red.is_linear:
            theta /= np.linalg.norm(theta)
        g = prob.g(theta)
        if math.isfinite(g):
            return SearchDirection(theta, g)
    raise InitializationFailedError(f"no boundary found in {cfg.init_retries} random directions")


def init_direction(cfg: AttackConfig, oracle, x0, reducer: DimReducer | None = None,
                   candidate_targets=None, seed: int | None = None,
                   source_label: int | None = None) -> SearchDirection:
    """Random Gaussian start (untargeted, redrawn until a boundary is found) or
    the encoding of the first candidate classified as the target."""
    if reducer is not None:
        cfg = replace(cfg, reducer=reducer)
    prob = _problem_for(oracle, x0, cfg, source_label)
    rng = make_rng(cfg.seed if seed is None else seed, "init")
    return _init(prob, cfg, candidate_targets, rng)


# -- attack loops -------------------------------------------------------------

class _Recorder:
    """Per-query trace and checkpoint snapshots for one attack instance."""

    def __init__(self, x0: np.ndarray, snapshot_every: int):
        self.x0 = x0
        self.events: list[TraceEvent] = []
        self.snapshots = {0: x0.copy()}
        self.every = snapshot_every
        self.phase = "init"
        self.best = x0
        self.l2 = self.linf = self.g = math.inf
        self.t0 = time.perf_counter()

    def on_query(self, idx: int, x, label) -> None:
        self.events.append(TraceEvent(idx, self.l2, self.linf, self.g, self.phase,
                                      time.perf_counter() - self.t0))
        if idx % self.every == 0:
            self.snapshots[idx] = self.best.copy()

    def accept(self, sample: np.ndarray, g: float, event: str) -> None:
        self.best = sample
        diff = sample - self.x0
        self.l2 = float(np.linalg.norm(diff))
        self.linf = float(np.abs(diff).max())
        self.g = g
        if self.events:
            last = self.events[-1]
            self.events[-1] = TraceEvent(last.query, self.l2, self.linf, g, event, last.elapsed)
            if last.query in self.snapshots and last.query:
                self.snapshots[last.query] = sample.copy()


def _finish(rec: _Recorder, oracle: HardLabelOracle, src: int | None, used: int,
            variant: str, prob: _Problem | None, error: str | None = None) -> AttackTrace:
    success = math.isfinite(rec.g)
    if success and prob is not None:
        success = prob.is_adv(oracle.label_free(rec.best))
    rec.snapshots[used] = rec.best.copy()
    return AttackTrace(rec.events, rec.x0, rec.best.copy(), success, used,
                       -1 if src is None else src, variant, rec.snapshots, error)


def _line_search(prob: _Problem, rec: _Recorder, sd: SearchDirection, direction: np.ndarray,
                 step: float, rule: StepRule) -> tuple[SearchDirection, float, bool]:
    n = float(np.linalg.norm(direction))
    if n == 0:
        return sd, step, False
    unit = direction / n
    eta = min(step * rule.grow, rule.max_step)
    linear = prob.reducer.is_linear
    for _ in range(rule.max_halvings + 1):
        cand = sd.theta_prime + eta * unit
        if linear:
            cand = cand / np.linalg.norm(cand)
        g_new = prob.g_below(cand, sd.g_value)
        if g_new < sd.g_value:
            new = SearchDirection(cand, g_new)
            rec.accept(prob.point(cand, g_new), g_new, "accept")
            return new, eta, True
        eta *= rule.shrink
    return sd, eta, False


def run_attack(oracle: HardLabelOracle, x0, cfg: AttackConfig, candidate_targets=None,
               source_label: int | None = None) -> AttackTrace:
    """Run one attack until ``cfg.budget`` queries are spent.

    Every query appends a trace row holding the best distortion so far. The
    oracle's counter advances by exactly ``trace.queries_used``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if cfg.variant == "rays":
        shape = cfg.reducer.full_shape if cfg.reducer is not None else x0.shape
        rcfg = RaySConfig(cfg.rays_a, cfg.rays_b, cfg.budget, cfg.seed, cfg.binsearch_tol,
                          cfg.max_radius, cfg.snapshot_every)
        return rays_search(oracle, x0.reshape(shape), rcfg, source_label=source_label)
    x0 = x0.ravel()
    rec = _Recorder(x0, cfg.snapshot_every)
    rng = make_rng(cfg.seed, "attack", cfg.variant)
    src = source_label
    prob = None
    start = oracle.query_count
    error = None
    with oracle.metered(cfg.budget, rec.on_query):
        try:
            if src is None:
                src = oracle.predict(x0)
            prob = _problem_for(oracle, x0, cfg, src)
            sd = _init(prob, cfg, candidate_targets, rng)
            rec.accept(prob.point(sd.theta_prime, sd.g_value), sd.g_value, "init")
            step = cfg.step_rule.initial
            t = 0
            while True:
                t += 1
                rec.phase = "estimate"
                if cfg.variant == "opt":
                    ghat, _ = _opt_estimate(prob, sd, cfg.q, cfg.beta, rng)
                    direction = -ghat
                elif cfg.variant == "sign-opt":
                    ghat, _ = _signopt_estimate(prob, sd, cfg.q, cfg.beta, rng)
                    direction = -ghat
                else:
                    xb = prob.point(sd.theta_prime, sd.g_value)
                    delta = cfg.probe_radius or sd.g_value / prob.x0.size
                    probes = min(int(cfg.num_probes * math.sqrt(t)), cfg.max_probes)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", DegenerateEstimateWarning)
                        direction, _ = _hsja_estimate(prob, xb, probes, delta, rng)
                rec.phase = "linesearch"
                sd, step, _ = _line_search(prob, rec, sd, direction, step, cfg.step_rule)
        except BudgetExhausted:
            pass
        except (InitializationFailedError, EstimationFailedError, DegenerateDirectionError) as exc:
            error = f"{type(exc).__name__}: {exc}"
    used = oracle.query_count - start
    return _finish(rec, oracle, src, used, cfg.variant, prob, error)


def rays_schedule(d: int, a: int, b: int, steps: int) -> list[tuple[int, int]]:
    """``(level s, block index)`` pairs visited by the first ``steps`` flips."""
    out, s, k = [], 0, 0
    for _ in range(steps):
        out.append((s, k % (2 ** s)))
        k += 1
        if k >= (2 ** s) * b:
            s += 1 + a
            k = 0
            if 2 ** s > d:
                s = 0
    return out


def rays_search(oracle: HardLabelOracle, x0, rcfg: RaySConfig,
                source_label: int | None = None) -> AttackTrace:
    """Hierarchical ray search over sign directions ``theta in {-1, +1}^d``.

    Starts from the all-ones direction. At level ``s`` the flattened image is
    cut into ``2^s`` contiguous blocks; flipping a block's signs is kept only
    if it strictly shortens the boundary radius.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3:
        raise ParameterError(f"ray search needs a (C, H, W) image, got shape {x0.shape}")
    shape = x0.shape
    x0 = x0.ravel()
    d = x0.size
    rec = _Recorder(x0, rcfg.snapshot_every)
    src = source_label
    prob = None
    start = oracle.query_count
    with oracle.metered(rcfg.budget, rec.on_query):
        try:
            if src is None:
                src = oracle.predict(x0)
            prob = _Problem(oracle, x0, src, DimReducer.identity(shape), rcfg.binsearch_tol,
                            rcfg.max_radius)
            theta = np.ones(d)
            g_best = prob.g(theta)
            if math.isfinite(g_best):
                rec.accept(prob.point(theta, g_best), g_best, "init")
            s, k = 0, 0
            rec.phase = "linesearch"
            while True:
                nblocks = 2 ** s
                size = math.ceil(d / nblocks)
                lo = (k % nblocks) * size
                hi = min(lo + size, d)
                if lo < d:
                    cand = theta.copy()
                    cand[lo:hi] *= -1
                    g_new = prob.g_below(cand, g_best)
                    if g_new < g_best:
                        theta, g_best = cand, g_new
                        rec.accept(prob.point(theta, g_best), g_best, "rays-flip")
                k += 1
                if k >= nblocks * rcfg.b:
                    s += 1 + rcfg.a
                    k = 0
                    if 2 ** s > d:
                        s = 0
        except BudgetExhausted:
            pass
    used = oracle.query_count - start
    return _finish(rec, oracle, src, used, "rays", prob)
