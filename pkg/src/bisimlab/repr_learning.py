"""Tabular encoder trained with the expectile bisimulation loss.

The network is small enough that gradients are written out by hand:
one-hot input, one rectified hidden layer, an affine output, and the
post-processing required by the chosen distance.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .bisim import Measurement, ScalingConfig
from .dataset import OfflineDataset

PARAM_NAMES = ("w1", "b1", "w2", "b2")
DIVERGENCE_LOSS = 1e6
_ANGLE_EPS = 1e-12
COSINE_FLOOR = 1e-6


class DistanceKind(NamedTuple):
    """``cosine`` or ``mico_angular`` (with angular weight ``beta``)."""

    tag: str = "cosine"
    beta: float = 0.1

    def validate(self) -> "DistanceKind":
        if self.tag not in ("cosine", "mico_angular"):
            raise ValueError(f"unknown distance {self.tag!r}")
        if self.tag == "mico_angular" and self.beta <= 0:
            raise ValueError("beta must be positive")
        return self


@dataclass
class Encoder:
    """Parameters of the two-layer encoder; ``params`` maps name to array."""

    params: dict
    kind: DistanceKind = DistanceKind()

    @classmethod
    def init(cls, n_inputs: int, embedding_dim: int, kind: DistanceKind = DistanceKind(),
             hidden: int | None = None, seed=0, output_bias: float = 1.0) -> "Encoder":
        """Small uniform weights, zero hidden bias, positive output bias."""
        rng = np.random.default_rng(seed)
        hidden = hidden or 4 * embedding_dim
        lim1, lim2 = 1.0 / np.sqrt(n_inputs), 1.0 / np.sqrt(hidden)
        params = {
            "w1": rng.uniform(-lim1, lim1, size=(n_inputs, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.uniform(-lim2, lim2, size=(hidden, embedding_dim)),
            "b2": np.full(embedding_dim, output_bias),
        }
        return cls(params, kind.validate())

    @property
    def n_inputs(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.params["w2"].shape[1]

    def copy(self) -> "Encoder":
        return Encoder({k: v.copy() for k, v in self.params.items()}, self.kind)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def with_flat(self, vec) -> "Encoder":
        out, pos = {}, 0
        for k in PARAM_NAMES:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            out[k] = np.asarray(vec[pos:pos + size], dtype=float).reshape(shape).copy()
            pos += size
        return Encoder(out, self.kind)


def one_hot(states, n_states: int) -> np.ndarray:
    states = np.asarray(states, dtype=np.int64)
    x = np.zeros((len(states), n_states))
    x[np.arange(len(states)), states] = 1.0
    return x


def _forward(enc: Encoder, x: np.ndarray):
    p = enc.params
    if x.ndim != 2 or x.shape[1] != enc.n_inputs:
        raise ValueError(f"expected inputs of width {enc.n_inputs}, got {x.shape}")
    pre = x @ p["w1"] + p["b1"]
    h = np.maximum(pre, 0.0)
    z = h @ p["w2"] + p["b2"]
    cache = {"x": x, "pre": pre, "h": h, "z": z}
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("encoder produced a non-finite embedding")
    if enc.kind.tag == "cosine":
        # the floor keeps rows whose rectified output is all zero normalizable;
        # such rows map to the uniform direction and receive no gradient
        u = np.maximum(z, 0.0) + COSINE_FLOOR
        norm = np.linalg.norm(u, axis=1, keepdims=True)
        cache["norm"] = norm
        out = u / norm
    else:
        out = z
    cache["out"] = out
    return out, cache


def forward(enc: Encoder, x) -> np.ndarray:
    """Embeddings of the rows of ``x``; unit nonnegative vectors for the cosine kind."""
    return _forward(enc, np.atleast_2d(np.asarray(x, dtype=float)))[0]


def embed_states(enc: Encoder, states) -> np.ndarray:
    return forward(enc, one_hot(states, enc.n_inputs))


# -- distances ---------------------------------------------------------------

def _distance(u: np.ndarray, v: np.ndarray, kind: DistanceKind):
    """Distance table between rows of u and v plus what the gradient needs."""
    if kind.tag == "cosine":
        return 1.0 - u @ v.T, None
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    denom = np.maximum(np.outer(nu, nv), _ANGLE_EPS)
    c = np.clip(u @ v.T / denom, -1.0, 1.0)
    # angle from the chord lengths of the unit vectors; arccos(c) loses
    # precision for nearly parallel embeddings
    uh = u / np.maximum(nu, _ANGLE_EPS)[:, None]
    vh = v / np.maximum(nv, _ANGLE_EPS)[:, None]
    chord = np.linalg.norm(uh[:, None, :] - vh[None, :, :], axis=2)
    span = np.linalg.norm(uh[:, None, :] + vh[None, :, :], axis=2)
    theta = 2.0 * np.arctan2(chord, span)
    sq = 0.5 * (nu[:, None] ** 2 + nv[None, :] ** 2)
    return sq + kind.beta * theta, (nu, nv, denom, c, theta)


def distance_table(enc: Encoder, states, kind: DistanceKind | None = None) -> Measurement:
    """G_φ(s_i, s_j) = D(φ(s_i), φ(s_j)) over the given states."""
    kind = (kind or enc.kind).validate()
    e = embed_states(enc, states)
    d, _ = _distance(e, e, kind)
    if kind.tag == "cosine":
        d = np.clip(d, 0.0, 1.0)
        np.fill_diagonal(d, 0.0)
    d = 0.5 * (d + d.T)
    return Measurement(d, "learned", metadata={"distance": kind.tag})


def _distance_grad(e: np.ndarray, coef: np.ndarray, kind: DistanceKind, aux) -> np.ndarray:
    """d/de of Σ_ij coef_ij D(e_i, e_j)."""
    a = coef + coef.T
    if kind.tag == "cosine":
        return -a @ e
    nu, _, denom, c, theta = aux
    dtheta = -1.0 / np.maximum(np.sin(theta), np.sqrt(_ANGLE_EPS))
    # ∂D(x, y)/∂x = x + β θ'(c) (y / (|x||y|) - c x / |x|²)
    w = a * kind.beta * dtheta
    inv_sq = np.where(nu > 0, 1.0 / np.maximum(nu, np.sqrt(_ANGLE_EPS)) ** 2, 0.0)
    grad = a.sum(axis=1)[:, None] * e
    grad += (w / denom) @ e
    grad -= (w * c).sum(axis=1)[:, None] * inv_sq[:, None] * e
    return grad


def _backward(enc: Encoder, cache, g_out: np.ndarray) -> dict:
    p = enc.params
    if enc.kind.tag == "cosine":
        e, norm = cache["out"], cache["norm"]
        g_u = (g_out - e * np.sum(e * g_out, axis=1, keepdims=True)) / norm
        g_z = g_u * (cache["z"] > 0)
    else:
        g_z = g_out
    grads = {"w2": cache["h"].T @ g_z, "b2": g_z.sum(axis=0)}
    g_pre = (g_z @ p["w2"].T) * (cache["pre"] > 0)
    grads["w1"] = cache["x"].T @ g_pre
    grads["b1"] = g_pre.sum(axis=0)
    return grads


# -- loss --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.5
    learning_rate: float = 1e-2
    batch_size: int = 64
    steps: int = 2000
    ema_coefficient: float = 0.01
    scaling: ScalingConfig = ScalingConfig()
    distance: DistanceKind = DistanceKind()
    seed: int = 0
    embedding_dim: int = 8
    hidden: int | None = None
    log_every: int = 50

    def __post_init__(self):
        object.__setattr__(self, "scaling", ScalingConfig(*self.scaling).validate())
        object.__setattr__(self, "distance", DistanceKind(*self.distance).validate())
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not 0.0 < self.ema_coefficient < 1.0:
            raise ValueError("ema_coefficient must lie in (0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 2 or self.embedding_dim < 1:
            raise ValueError("learning_rate, batch_size (>= 2) and embedding_dim must be positive")
        if self.steps < 0 or self.log_every < 1:
            raise ValueError("steps must be nonnegative and log_every positive")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, pair):
        super().__init__(f"non-finite residual at batch pair {pair}")
        self.pair = pair


class Batch(NamedTuple):
    s: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


def residual_matrix(enc: Encoder, target: Encoder, batch: Batch, cfg: TrainConfig):
    """ε̂ over all ordered batch pairs, plus the forward cache for gradients."""
    n = enc.n_inputs
    e, cache = _forward(enc, one_hot(batch.s, n))
    e_next = forward(target, one_hot(batch.s_next, n))
    d, aux = _distance(e, e, enc.kind)
    d_next, _ = _distance(e_next, e_next, target.kind)
    live = (~np.asarray(batch.done, bool)).astype(float)
    r = np.asarray(batch.r, dtype=float)
    sc = cfg.scaling
    eps = sc.c_r * np.abs(r[:, None] - r[None, :]) + sc.c_k * np.outer(live, live) * d_next - d
    return eps, e, cache, aux


def expectile_loss_batch(enc: Encoder, target: Encoder, batch: Batch, cfg: TrainConfig):
    """Mean over batch pairs of τ[ε̂]_+² + (1-τ)[ε̂]_-², with the target branch held fixed.

    Returns (loss, gradients by parameter name, mean ε̂).
    """
    if len(batch.s) < 2:
        raise ValueError("a batch needs at least two transitions")
    eps, e, cache, aux = residual_matrix(enc, target, batch, cfg)
    if not np.all(np.isfinite(eps)):
        bad = np.argwhere(~np.isfinite(eps))[0]
        raise NonFiniteLossError((int(bad[0]), int(bad[1])))
    tau = cfg.tau
    pos, neg = np.maximum(eps, 0.0), np.minimum(eps, 0.0)
    k = eps.size
    loss = float(np.sum(tau * pos ** 2 + (1 - tau) * neg ** 2) / k)
    # ∂loss/∂D = -∂loss/∂ε̂
    coef = -(2 * tau * pos + 2 * (1 - tau) * neg) / k
    g_out = _distance_grad(e, coef, enc.kind, aux)
    return loss, _backward(enc, cache, g_out), float(eps.mean())


# -- training ----------------------------------------------------------------

def effective_dimension(embeddings, delta: float = 0.01) -> int:
    """Number of singular values at least ``delta`` times the largest."""
    sv = np.linalg.svd(np.asarray(embeddings, dtype=float), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv >= delta * sv[0]))


@dataclass
class LogRow:
    step: int
    loss: float
    mean_residual: float
    effective_dimension: int


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


@dataclass
class TrainResult:
    encoder: Encoder
    target: Encoder
    log: list
    checkpoints: list = field(default_factory=list)


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k in PARAM_NAMES:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            m_hat = self.m[k] / (1 - self.b1 ** self.t)
            v_hat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def ema_update(target: Encoder, online: Encoder, m: float) -> None:
    """φ̄ ← (1 - m) φ̄ + m φ, in place."""
    for k in PARAM_NAMES:
        target.params[k] = (1.0 - m) * target.params[k] + m * online.params[k]


def _is_reward_scaled(scaling: ScalingConfig) -> bool:
    return scaling.c_r < 1.0 and abs(scaling.c_r + scaling.c_k - 1.0) < 1e-12


def train(dataset: OfflineDataset, cfg: TrainConfig, keep_checkpoints: bool = False) -> TrainResult:
    """Minibatch training of the encoder with an EMA target.

    Each step samples ``batch_size`` tuples uniformly, forms all ordered
    pairs, takes one Adam step on the expectile loss and then moves the
    target toward the online parameters. Every ``log_every`` steps (and at
    the end) the batch loss, batch mean ε̂ and the effective dimension of
    the embeddings of all states are logged.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if _is_reward_scaled(cfg.scaling) and not dataset.normalized:
        raise ValueError("reward-scaled training requires a min-max normalized dataset")
    rng = np.random.default_rng(cfg.seed)
    enc = Encoder.init(dataset.n_states, cfg.embedding_dim, cfg.distance, cfg.hidden,
                       seed=rng.integers(2 ** 63))
    target = enc.copy()
    opt = _Adam(enc.params, cfg.learning_rate)
    all_states = np.arange(dataset.n_states)
    log, checkpoints = [], []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(len(dataset), size=cfg.batch_size)
        batch = Batch(dataset.s[idx], dataset.r[idx], dataset.s_next[idx], dataset.done[idx])
        loss, grads, mean_eps = expectile_loss_batch(enc, target, batch, cfg)
        if loss > DIVERGENCE_LOSS:
            log.append(LogRow(step, loss, mean_eps, effective_dimension(embed_states(enc, all_states))))
            raise TrainingDivergedError(f"loss {loss:.3g} exceeded {DIVERGENCE_LOSS:g} at step {step}", log)
        opt.step(enc.params, grads)
        ema_update(target, enc, cfg.ema_coefficient)
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.append(LogRow(step, loss, mean_eps, effective_dimension(embed_states(enc, all_states))))
            if keep_checkpoints:
                checkpoints.append((enc.copy(), target.copy()))
    return TrainResult(enc, target, log, checkpoints)


def dataset_batch(dataset: OfflineDataset) -> Batch:
    return Batch(dataset.s, dataset.r, dataset.s_next, dataset.done)


def mean_residual(enc: Encoder, target: Encoder, dataset: OfflineDataset, cfg: TrainConfig,
                  max_tuples: int = 512) -> float:
    """Mean ε̂ over all ordered pairs of (the first ``max_tuples``) dataset tuples."""
    sub = dataset_batch(dataset)
    if len(dataset) > max_tuples:
        sub = Batch(*(col[:max_tuples] for col in sub))
    eps, *_ = residual_matrix(enc, target, sub, cfg)
    return float(eps.mean())


def residual_trace(checkpoints, dataset: OfflineDataset, cfg: TrainConfig) -> list[float]:
    """Mean ε̂ on the dataset for each (online, target) checkpoint."""
    return [mean_residual(enc, tgt, dataset, cfg) for enc, tgt in checkpoints]


# -- IO ----------------------------------------------------------------------

ENCODER_HEADER = "# bisimlab-encoder v1"


def dumps_encoder(enc: Encoder) -> str:
    lines = [ENCODER_HEADER, f"# distance {enc.kind.tag} {enc.kind.beta!r}"]
    for k in PARAM_NAMES:
        lines.append(f"# shape {k} " + " ".join(str(d) for d in enc.params[k].shape))
    lines.extend(repr(float(x)) for x in enc.flat())
    return "\n".join(lines) + "\n"


def loads_encoder(text: str) -> Encoder:
    shapes, values, kind = {}, [], DistanceKind()
    for ln in text.splitlines():
        if not ln.strip():
            continue
        if ln.startswith("#"):
            parts = ln[1:].split()
            if parts[0] == "shape":
                shapes[parts[1]] = tuple(int(d) for d in parts[2:])
            elif parts[0] == "distance":
                kind = DistanceKind(parts[1], float(parts[2]))
            continue
        values.append(float(ln))
    if set(shapes) != set(PARAM_NAMES):
        raise ValueError("encoder file is missing parameter shapes")
    template = Encoder({k: np.zeros(shapes[k]) for k in PARAM_NAMES}, kind.validate())
    if len(values) != template.flat().size:
        raise ValueError("parameter count does not match the shape header")
    return template.with_flat(values)


def save_encoder(enc: Encoder, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_encoder(enc))


def load_encoder(path) -> Encoder:
    with open(path) as f:
        return loads_encoder(f.read())


def dumps_log(log) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "mean_residual", "effective_dimension"])
    for row in log:
        w.writerow([row.step, repr(float(row.loss)), repr(float(row.mean_residual)), row.effective_dimension])
    return buf.getvalue()


def save_log(log, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_log(log))


__all__ = [
    "Batch",
    "DistanceKind",
    "Encoder",
    "LogRow",
    "NonFiniteLossError",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "distance_table",
    "effective_dimension",
    "ema_update",
    "embed_states",
    "expectile_loss_batch",
    "forward",
    "mean_residual",
    "one_hot",
    "residual_trace",
    "train",
]
