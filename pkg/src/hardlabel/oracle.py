"""Hard-label victims behind a query-counted interface.

Victims are immutable callables mapping a batch of flat inputs to class
indices. :class:`HardLabelOracle` is the only thing an attack talks to; it
counts every ``predict`` call and can enforce a query budget.

Binary labels: the data model's ``-1``/``+1`` become class indices ``0``/``1``
(:func:`label_to_index`). No other module performs this mapping.
"""

from __future__ import annotations

import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._rng import make_rng
from .errors import (BudgetExhausted, ParameterError, TrainingDivergedError,
                     UnsupportedVictimError)

MAGIC = b"NMDL"
FORMAT_VERSION = 1
KIND_LINEAR, KIND_MLP, KIND_SMOOTHED, KIND_AE = 0, 1, 2, 3


def label_to_index(y):
    """-1 -> 0, +1 -> 1."""
    return (np.asarray(y) + 1) // 2


def index_to_label(i):
    return 2 * np.asarray(i) - 1


class LinearVictim:
    """Binary sign classifier: class 1 iff ``w.x + b >= 0``."""

    kind = "linear"
    num_classes = 2

    def __init__(self, w, b: float = 0.0):
        w = np.array(w, dtype=np.float64).ravel()
        if not np.all(np.isfinite(w)) or not np.isfinite(b):
            raise ParameterError("linear victim parameters must be finite")
        self.w = w
        self.b = float(b)
        self.w.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.w.size

    def scores(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b

    def labels(self, X) -> np.ndarray:
        return (self.scores(X) >= 0).astype(np.int64)

    def boundary_distance(self, x) -> float:
        """Euclidean distance from ``x`` to the decision hyperplane."""
        return abs(float(self.scores(x))) / float(np.linalg.norm(self.w))


@dataclass
class MlpVictim:
    """Fully connected network; ``weights[k]`` has shape ``(in, out)``."""

    weights: list
    biases: list
    activation: str = "relu"
    seed: int = 0
    losses: list = field(default_factory=list)
    converged: bool = True

    kind = "mlp"

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ParameterError(f"unknown activation {self.activation!r}")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        for W, b in zip(self.weights, self.biases):
            if W.shape[1] != b.shape[0]:
                raise ParameterError("bias width does not match layer width")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ParameterError("MLP parameters must be finite")

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    def _act(self, a):
        return np.maximum(a, 0.0) if self.activation == "relu" else np.tanh(a)

    def _act_grad(self, a):
        return (a > 0).astype(np.float64) if self.activation == "relu" else 1.0 - np.tanh(a) ** 2

    def _forward(self, X):
        pre, h = [], np.asarray(X, dtype=np.float64)
        acts = [h]
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ W + b
            pre.append(a)
            h = a if k == len(self.weights) - 1 else self._act(a)
            acts.append(h)
        return pre, acts

    def logits(self, X) -> np.ndarray:
        return self._forward(X)[1][-1]

    def labels(self, X) -> np.ndarray:
        return np.argmax(self.logits(X), axis=-1)

    def loss_grads(self, X, t):
        """Mean cross-entropy, parameter gradients, and input gradients."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t = np.atleast_1d(np.asarray(t))
        pre, acts = self._forward(X)
        z = acts[-1]
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        m = X.shape[0]
        loss = -float(np.mean(logp[np.arange(m), t]))
        delta = np.exp(logp)
        delta[np.arange(m), t] -= 1.0
        delta /= m
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            gW[k] = acts[k].T @ delta
            gb[k] = delta.sum(axis=0)
            delta = delta @ self.weights[k].T
            if k > 0:
                delta = delta * self._act_grad(pre[k - 1])
        return loss, gW, gb, delta * m


class SmoothedVictim:
    """Monte-Carlo majority vote of a base victim under Gaussian input noise.

    The noise matrix is re-drawn from ``cfg.seed`` on every call, so the vote is
    a deterministic function of the input.
    """

    kind = "smoothed"

    def __init__(self, base, cfg: "SmoothingConfig"):
        if isinstance(base, SmoothedVictim):
            raise UnsupportedVictimError("cannot smooth an already smoothed victim")
        self.base = base
        self.cfg = cfg

    @property
    def input_dim(self) -> int:
        return self.base.input_dim

    @property
    def num_classes(self) -> int:
        return self.base.num_classes

    def labels(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        noise = smoothing_noise(self.cfg, X.shape[1])
        return np.array([majority(vote_counts(self.base, x, noise)) for x in X])


@dataclass(frozen=True)
class SmoothingConfig:
    noise_sigma: float
    mc_rounds: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ParameterError("noise_sigma must be positive")
        if self.mc_rounds < 1:
            raise ParameterError("mc_rounds must be >= 1")


def smoothing_noise(cfg: SmoothingConfig, dim: int) -> np.ndarray:
    return cfg.noise_sigma * make_rng(cfg.seed, "smoothing").standard_normal((cfg.mc_rounds, dim))


def vote_counts(victim, x, noise: np.ndarray) -> np.ndarray:
    """Per-class counts of the victim's labels at ``x + noise[i]``."""
    labels = victim.labels(np.asarray(x, dtype=np.float64)[None, :] + noise)
    return np.bincount(labels, minlength=victim.num_classes)


def majority(counts) -> int:
    # argmax returns the first maximum: ties go to the smaller class index.
    return int(np.argmax(counts))


class HardLabelOracle:
    """Label-only access to a victim, with an exact query counter.

    ``budget`` (optional) makes :meth:`predict` raise :class:`BudgetExhausted`
    instead of issuing query number ``budget + 1``. ``on_query`` is called after
    every counted query with ``(query_index, x, label)``.
    """

    def __init__(self, victim, budget: int | None = None,
                 on_query: Callable | None = None):
        self.victim = victim
        self.budget = budget
        self.on_query = on_query
        self._count = 0
        self._offset = 0
        self._lock = threading.Lock()

    @property
    def query_count(self) -> int:
        return self._count

    @property
    def input_dim(self) -> int:
        return self.victim.input_dim

    @property
    def num_classes(self) -> int:
        return self.victim.num_classes

    def fork(self, budget: int | None = None, on_query: Callable | None = None) -> "HardLabelOracle":
        """A fresh oracle over the same victim with its own counter."""
        return HardLabelOracle(self.victim, budget, on_query)

    @contextmanager
    def metered(self, budget: int | None, on_query: Callable | None = None):
        """Temporarily cap further queries at ``budget`` and attach ``on_query``.

        Query indices passed to ``on_query`` restart at 1 inside the block.
        """
        saved = self.budget, self.on_query, self._offset
        start = self._count
        self.budget = None if budget is None else start + budget
        self._offset = start
        self.on_query = on_query
        try:
            yield self
        finally:
            self.budget, self.on_query, self._offset = saved

    def _tick(self) -> int:
        with self._lock:
            if self.budget is not None and self._count >= self.budget:
                raise BudgetExhausted(f"query budget {self.budget} exhausted")
            self._count += 1
            return self._count

    def predict(self, x) -> int:
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size != self.input_dim:
            raise ParameterError(f"expected input of length {self.input_dim}, got {x.size}")
        idx = self._tick()
        label = int(self.victim.labels(x[None, :])[0])
        if self.on_query is not None:
            self.on_query(idx - self._offset, x, label)
        return label

    def label_free(self, x) -> int:
        """Label without counting; for verification outside an attack's budget."""
        return int(self.victim.labels(np.asarray(x, dtype=np.float64).ravel()[None, :])[0])


def predict(oracle: HardLabelOracle, x) -> int:
    return oracle.predict(x)


def smoothed_predict(base: HardLabelOracle, x, cfg: SmoothingConfig) -> int:
    """Majority label of ``base`` over ``cfg.mc_rounds`` noisy copies of ``x``.

    Billed as a single query on ``base`` regardless of ``mc_rounds``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != base.input_dim:
        raise ParameterError(f"expected input of length {base.input_dim}, got {x.size}")
    base._tick()
    return majority(vote_counts(base.victim, x, smoothing_noise(cfg, x.size)))


def train_mlp(dataset, widths: Sequence[int], epochs: int, learning_rate: float,
              seed: int, activation: str = "relu") -> MlpVictim:
    """Fit an MLP by full-batch gradient descent on cross-entropy.

    ``dataset`` is a :class:`~hardlabel.gaussmix.Dataset`, a list of labeled
    samples, or an ``(X, class_indices)`` tuple. ``widths`` lists the hidden
    widths followed by the number of classes.
    """
    if isinstance(dataset, tuple):
        X, t = dataset
        X = np.asarray(X, dtype=np.float64)
        t = np.asarray(t, dtype=np.int64)
    else:
        samples = list(dataset)
        if not samples:
            raise ParameterError("dataset is empty")
        X = np.stack([np.asarray(s.x, dtype=np.float64) for s in samples])
        t = label_to_index([s.y for s in samples]).astype(np.int64)
    if X.shape[0] == 0:
        raise ParameterError("dataset is empty")
    widths = list(widths)
    if not widths or widths[-1] < 2 or widths[-1] <= int(t.max()):
        raise ParameterError("last width must equal the number of classes")
    rng = make_rng(seed, "mlp_init")
    dims = [X.shape[1]] + widths
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
        weights.append(scale * rng.standard_normal((fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    net = MlpVictim(weights, biases, activation, seed)
    for _ in range(epochs):
        loss, gW, gb, _ = net.loss_grads(X, t)
        if not np.isfinite(loss):
            raise TrainingDivergedError("cross-entropy became non-finite")
        net.losses.append(loss)
        for k in range(len(net.weights)):
            net.weights[k] -= learning_rate * gW[k]
            net.biases[k] -= learning_rate * gb[k]
    if epochs:
        final, *_ = net.loss_grads(X, t)
        if not np.isfinite(final):
            raise TrainingDivergedError("cross-entropy became non-finite")
        net.losses.append(final)
        net.converged = final < net.losses[0]
    return net


def input_gradient(victim, x, target_label: int) -> np.ndarray:
    """Gradient of the cross-entropy toward ``target_label`` with respect to ``x``.

    For the sign classifier the loss is flat almost everywhere, so the
    sub-gradient ``sgn(w)`` is returned, signed so that it increases the loss
    of ``target_label`` (``+sgn(w)`` for class 0, ``-sgn(w)`` for class 1).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if isinstance(victim, HardLabelOracle):
        victim = victim.victim
    if isinstance(victim, LinearVictim):
        s = np.sign(victim.w)
        return s if target_label == 0 else -s
    if isinstance(victim, MlpVictim):
        if x.size != victim.input_dim:
            raise ParameterError(f"expected input of length {victim.input_dim}, got {x.size}")
        return victim.loss_grads(x[None, :], [target_label])[3][0]
    raise UnsupportedVictimError(f"no input gradient for victim kind {getattr(victim, 'kind', type(victim).__name__)!r}")


# -- serialization -----------------------------------------------------------

def _pack(kind: int, arrays: Sequence[np.ndarray]) -> bytes:
    flat = np.concatenate([np.asarray(a, dtype="<f8").ravel() for a in arrays]) if arrays else np.zeros(0)
    return MAGIC + struct.pack("<IB", FORMAT_VERSION, kind) + flat.astype("<f8").tobytes()


def unpack_container(blob: bytes) -> tuple[int, np.ndarray]:
    """Return ``(kind, flat float64 payload)`` from an NMDL container."""
    if blob[:4] != MAGIC:
        raise ParameterError("not an NMDL container")
    version, kind = struct.unpack("<IB", blob[4:9])
    if version != FORMAT_VERSION:
        raise ParameterError(f"unsupported NMDL version {version}")
    payload = blob[9:]
    if len(payload) % 8:
        raise ParameterError("truncated NMDL payload")
    return kind, np.frombuffer(payload, dtype="<f8").astype(np.float64)


def write_container(path, kind: int, arrays: Sequence[np.ndarray], sidecar: dict) -> None:
    path = Path(path)
    path.write_bytes(_pack(kind, arrays))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def save_victim(victim, path) -> None:
    """Write ``path`` (binary parameters) and ``path`` with a ``.json`` suffix (layout)."""
    if isinstance(victim, LinearVictim):
        write_container(path, KIND_LINEAR, [victim.w, [victim.b]],
                        {"kind": "linear", "widths": [victim.input_dim, 2]})
    elif isinstance(victim, MlpVictim):
        arrays = []
        for W, b in zip(victim.weights, victim.biases):
            arrays += [W, b]
        write_container(path, KIND_MLP, arrays,
                        {"kind": "mlp", "widths": victim.widths,
                         "activation": victim.activation, "seed": victim.seed})
    elif isinstance(victim, SmoothedVictim):
        base_path = Path(path).with_suffix(".base.nmdl")
        save_victim(victim.base, base_path)
        write_container(path, KIND_SMOOTHED, [],
                        {"kind": "smoothed", "base": base_path.name,
                         "noise_sigma": victim.cfg.noise_sigma,
                         "mc_rounds": victim.cfg.mc_rounds, "seed": victim.cfg.seed})
    else:
        raise UnsupportedVictimError(f"cannot serialize {type(victim).__name__}")


def load_victim(path):
    path = Path(path)
    kind, flat = unpack_container(path.read_bytes())
    meta = json.loads(path.with_suffix(".json").read_text())
    if kind == KIND_LINEAR:
        return LinearVictim(flat[:-1], flat[-1])
    if kind == KIND_MLP:
        widths = meta["widths"]
        weights, biases, pos = [], [], 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            weights.append(flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
            pos += fan_in * fan_out
            biases.append(flat[pos:pos + fan_out].copy())
            pos += fan_out
        if pos != flat.size:
            raise ParameterError("NMDL payload does not match sidecar widths")
        return MlpVictim(weights, biases, meta["activation"], meta.get("seed", 0))
    if kind == KIND_SMOOTHED:
        base = load_victim(path.parent / meta["base"])
        return SmoothedVictim(base, SmoothingConfig(meta["noise_sigma"], meta["mc_rounds"], meta["seed"]))
    raise ParameterError(f"NMDL kind {kind} is not a victim")
