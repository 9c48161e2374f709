"""Encode/decode maps between the input space and a reduced search space.

Three reducers share one interface: ``identity``, ``biln`` (channel-wise
bilinear down/up-scaling) and ``autoencoder``. Flat vectors are reshaped to
``(C, H, W)`` in row-major order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from ._rng import make_rng
from .errors import DegenerateDirectionError, ParameterError, TrainingDivergedError
from .oracle import KIND_AE, unpack_container, write_container

REDUCER_KINDS = ("identity", "biln", "autoencoder")


@lru_cache(maxsize=64)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row ``i`` holds the bilinear weights for output sample ``i``.

    Half-pixel centres: output ``i`` reads source coordinate
    ``(i + 0.5) * n_in / n_out - 0.5``, clamped to ``[0, n_in - 1]``.
    """
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    M = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(M, (rows, lo), 1.0 - frac)
    np.add.at(M, (rows, hi), frac)
    M.setflags(write=False)
    return M


def biln_resample(x, out_h: int, out_w: int) -> np.ndarray:
    """Resample a ``(C, H, W)`` image to ``(C, out_h, out_w)`` bilinearly."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ParameterError(f"expected a (C, H, W) image, got shape {x.shape}")
    C, H, W = x.shape
    if min(C, H, W, out_h, out_w) < 1:
        raise ParameterError("image and output dimensions must be >= 1")
    if (H, W) == (out_h, out_w):
        return x.copy()
    Ry = _interp_matrix(H, out_h)
    Rx = _interp_matrix(W, out_w)
    return np.einsum("ih,chw,jw->cij", Ry, x, Rx)


@dataclass
class Autoencoder:
    """``encode(x) = tanh(x We + be)``, ``decode(z) = z Wd + bd``."""

    We: np.ndarray
    be: np.ndarray
    Wd: np.ndarray
    bd: np.ndarray
    seed: int = 0
    losses: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.We.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.We.shape[1]

    def encode(self, X) -> np.ndarray:
        return np.tanh(np.asarray(X, dtype=np.float64) @ self.We + self.be)

    def decode(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.Wd + self.bd

    def reconstruct(self, X) -> np.ndarray:
        return self.decode(self.encode(X))

    def loss(self, X) -> float:
        X = np.asarray(X, dtype=np.float64)
        return float(np.mean((self.reconstruct(X) - X) ** 2))


def ae_train(data, latent_dim: int, epochs: int, learning_rate: float, seed: int) -> Autoencoder:
    """Minimise mean squared reconstruction error by full-batch gradient descent.

    ``data`` is an ``(n, d)`` array or an iterable of samples with an ``x``
    attribute. ``losses`` holds the loss before each epoch and after the last.
    """
    if hasattr(data, "X"):
        X = np.asarray(data.X, dtype=np.float64)
    elif isinstance(data, np.ndarray):
        X = np.asarray(data, dtype=np.float64)
    else:
        X = np.stack([np.asarray(getattr(s, "x", s), dtype=np.float64).ravel() for s in data])
    if X.ndim != 2 or X.shape[0] == 0:
        raise ParameterError("training data must be a non-empty (n, d) array")
    n, d = X.shape
    if not 1 <= latent_dim < d:
        raise ParameterError(f"latent_dim must lie in [1, {d}), got {latent_dim}")
    rng = make_rng(seed, "ae_init")
    ae = Autoencoder(rng.standard_normal((d, latent_dim)) / np.sqrt(d), np.zeros(latent_dim),
                     rng.standard_normal((latent_dim, d)) / np.sqrt(latent_dim), X.mean(axis=0),
                     seed)
    for _ in range(epochs):
        A = X @ ae.We + ae.be
        Z = np.tanh(A)
        R = Z @ ae.Wd + ae.bd - X
        loss = float(np.mean(R ** 2))
        if not np.isfinite(loss):
            raise TrainingDivergedError("reconstruction loss became non-finite")
        ae.losses.append(loss)
        G = 2.0 * R / (n * d)
        gWd = Z.T @ G
        gbd = G.sum(axis=0)
        GA = (G @ ae.Wd.T) * (1.0 - Z ** 2)
        ae.Wd -= learning_rate * gWd
        ae.bd -= learning_rate * gbd
        ae.We -= learning_rate * (X.T @ GA)
        ae.be -= learning_rate * GA.sum(axis=0)
    if epochs:
        final = ae.loss(X)
        if not np.isfinite(final):
            raise TrainingDivergedError("reconstruction loss became non-finite")
        ae.losses.append(final)
    return ae


@dataclass(frozen=True)
class DimReducer:
    """Paired encode/decode maps. Shapes are ``(C, H, W)`` or ``(d,)``."""

    kind: str
    full_shape: tuple
    reduced_shape: tuple
    ae: Autoencoder | None = None

    def __post_init__(self):
        if self.kind not in REDUCER_KINDS:
            raise ParameterError(f"unknown reducer kind {self.kind!r}")
        object.__setattr__(self, "full_shape", tuple(int(v) for v in self.full_shape))
        object.__setattr__(self, "reduced_shape", tuple(int(v) for v in self.reduced_shape))
        if self.reduced_dim > self.full_dim:
            raise ParameterError("reduced dimension exceeds full dimension")
        if self.kind == "identity" and self.full_shape != self.reduced_shape:
            raise ParameterError("identity reducer needs equal shapes")
        if self.kind == "biln":
            if len(self.full_shape) != 3 or len(self.reduced_shape) != 3:
                raise ParameterError("biln reducer needs (C, H, W) shapes")
            if self.full_shape[0] != self.reduced_shape[0]:
                raise ParameterError("biln reducer keeps the channel count")
        if self.kind == "autoencoder":
            if self.ae is None:
                raise ParameterError("autoencoder reducer needs a trained autoencoder")
            if (self.ae.input_dim, self.ae.latent_dim) != (self.full_dim, self.reduced_dim):
                raise ParameterError("autoencoder dimensions do not match the declared shapes")

    @property
    def full_dim(self) -> int:
        return int(np.prod(self.full_shape))

    @property
    def reduced_dim(self) -> int:
        return int(np.prod(self.reduced_shape))

    @property
    def is_linear(self) -> bool:
        return self.kind in ("identity", "biln")

    @classmethod
    def identity(cls, shape) -> "DimReducer":
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        return cls("identity", shape, shape)

    @classmethod
    def biln(cls, full_shape, reduced_hw) -> "DimReducer":
        C = full_shape[0]
        return cls("biln", tuple(full_shape), (C, *reduced_hw))

    @classmethod
    def autoencoder(cls, ae: Autoencoder, full_shape=None) -> "DimReducer":
        full_shape = full_shape or (ae.input_dim,)
        return cls("autoencoder", tuple(full_shape), (ae.latent_dim,), ae)

    def _check(self, v, n: int, what: str) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.size != n:
            raise ParameterError(f"{what} has {v.size} entries, expected {n}")
        return v

    def encode(self, x) -> np.ndarray:
        x = self._check(x, self.full_dim, "input")
        if self.kind == "identity":
            return x.ravel().copy()
        if self.kind == "biln":
            _, h, w = self.reduced_shape
            return biln_resample(x.reshape(self.full_shape), h, w).ravel()
        return self.ae.encode(x.ravel())

    def decode(self, z) -> np.ndarray:
        z = self._check(z, self.reduced_dim, "reduced vector")
        if self.kind == "identity":
            return z.ravel().copy()
        if self.kind == "biln":
            _, H, W = self.full_shape
            return biln_resample(z.reshape(self.reduced_shape), H, W).ravel()
        return self.ae.decode(z.ravel())


def encode(reducer: DimReducer, x) -> np.ndarray:
    return reducer.encode(x)


def decode(reducer: DimReducer, z) -> np.ndarray:
    return reducer.decode(z)


def construct_sample(x0, theta_prime, g_value: float, reducer: DimReducer) -> np.ndarray:
    """``x0 + g * D(theta') / ||D(theta')||``."""
    direction = reducer.decode(theta_prime)
    norm = float(np.linalg.norm(direction))
    if norm == 0:
        raise DegenerateDirectionError("decoded direction has zero norm")
    return np.asarray(x0, dtype=np.float64).ravel() + g_value * direction / norm


def ae_blend(x0, theta_prime, r: float, ae: Autoencoder) -> np.ndarray:
    """``(1 - r) x0 + r D(E(x0) + theta')``."""
    if not 0 <= r <= 1:
        raise ParameterError(f"blend radius must lie in [0, 1], got {r}")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    target = ae.decode(ae.encode(x0) + np.asarray(theta_prime, dtype=np.float64))
    return (1.0 - r) * x0 + r * target


def save_autoencoder(ae: Autoencoder, path) -> None:
    """Write ``ae`` to an NMDL container (kind byte ``KIND_AE``) plus JSON sidecar."""
    write_container(path, KIND_AE, [ae.We, ae.be, ae.Wd, ae.bd],
                    {"kind": "ae", "widths": [ae.input_dim, ae.latent_dim], "seed": ae.seed})


def load_autoencoder(path) -> Autoencoder:
    path = Path(path)
    kind, flat = unpack_container(path.read_bytes())
    if kind != KIND_AE:
        raise ParameterError(f"NMDL kind {kind} is not an autoencoder")
    meta = json.loads(path.with_suffix(".json").read_text())
    d, k = meta["widths"]
    sizes = [d * k, k, k * d, d]
    if sum(sizes) != flat.size:
        raise ParameterError("NMDL payload does not match sidecar widths")
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    return Autoencoder(parts[0].reshape(d, k), parts[1], parts[2].reshape(k, d), parts[3],
                       meta.get("seed", 0))
