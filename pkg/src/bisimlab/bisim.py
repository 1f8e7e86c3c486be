"""Exact fixed-point solvers for bisimulation measurements."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.optimize import linprog

from .dataset import EmpiricalModel, OfflineDataset, empirical_mdp
from .mdp import Policy, TabularMdp, policy_evaluation

FIXED_POINT_TOL = 1e-9
LIFTED_STATE_CAP = 4096


class ScalingConfig(NamedTuple):
    """Reward scale ``c_r`` and continuation scale ``c_k`` of the operator."""

    c_r: float = 1.0
    c_k: float = 0.9

    def validate(self) -> "ScalingConfig":
        if self.c_r < 0:
            raise ValueError("c_r must be nonnegative")
        if not 0.0 <= self.c_k < 1.0:
            raise ValueError("c_k must lie in [0, 1)")
        return self

    @classmethod
    def standard(cls, discount: float) -> "ScalingConfig":
        return cls(1.0, discount)

    @classmethod
    def reward_scaled(cls, discount: float) -> "ScalingConfig":
        """c_r = 1 - γ, c_k = γ; pair with min-max normalized rewards."""
        return cls(1.0 - discount, discount)


@dataclass(frozen=True, eq=False)
class Measurement:
    """Symmetric table over state pairs plus provenance."""

    g: np.ndarray
    kind: str = "learned"
    scaling: ScalingConfig | None = None
    iterations: int = 0
    history: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        g = np.array(self.g, dtype=float, copy=True)
        g.setflags(write=False)
        object.__setattr__(self, "g", g)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError(f"measurement must be square, got {g.shape}")

    @property
    def n_states(self) -> int:
        return self.g.shape[0]

    def check(self, atol: float = 1e-9) -> None:
        """Raise if symmetry / nonnegativity (and metric axioms for pi_bisim) fail."""
        g = self.g
        if np.max(np.abs(g - g.T)) > atol:
            raise ValueError("measurement is not symmetric")
        if g.min() < -atol:
            raise ValueError("measurement has negative entries")
        if self.kind == "pi_bisim":
            if np.max(np.abs(np.diag(g))) > atol:
                raise ValueError("pi-bisimulation metric has nonzero self-distance")
            if triangle_violation(g) > atol:
                raise ValueError("pi-bisimulation metric violates the triangle inequality")


def triangle_violation(g: np.ndarray) -> float:
    """max over (i, j, k) of g[i, k] - g[i, j] - g[j, k]."""
    return float(np.max(g[:, None, :] - g[:, :, None] - g[None, :, :]))


@dataclass(frozen=True, eq=False)
class StateActionMeasurement:
    """G* over pairs of (s, a); ``support`` marks the in-sample (s, a)."""

    g: np.ndarray
    support: np.ndarray
    scaling: ScalingConfig
    frontier_states: frozenset = frozenset()
    iterations: int = 0

    def state_max(self) -> np.ndarray:
        """max over in-support (a_i, a_j) of G*; zero where a state has no support."""
        return _masked_state_max(self.g, self.support)


def _masked_state_max(g, support):
    n, m = support.shape
    pair_mask = support[:, :, None, None] & support[None, None, :, :]
    vals = np.where(pair_mask, g, -np.inf).transpose(0, 2, 1, 3).reshape(n, n, m * m)
    best = vals.max(axis=2)
    return np.where(np.isfinite(best), best, 0.0)


class Model(NamedTuple):
    """Array view shared by exact MDPs and empirical dataset models."""

    reward: np.ndarray       # (S, A)
    transition: np.ndarray   # (S, A, S), rows may be sub-stochastic
    policy: np.ndarray       # (S, A)
    state_mask: np.ndarray   # (S,) states with at least one in-support action

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    def policy_reward(self) -> np.ndarray:
        return np.einsum("sa,sa->s", self.policy, self.reward)

    def policy_transition(self) -> np.ndarray:
        return np.einsum("sa,sat->st", self.policy, self.transition)

    def sa_support(self) -> np.ndarray:
        return (self.policy > 0) & self.state_mask[:, None]


def as_model(source, policy: Policy | None = None) -> Model:
    """Build a :class:`Model` from an MDP + policy, a dataset, or an empirical model."""
    if isinstance(source, TabularMdp):
        if policy is None:
            raise ValueError("a policy is required with an MDP source")
        if policy.probs.shape != source.reward.shape:
            raise ValueError("policy shape does not match the MDP")
        return Model(source.reward, source.transition, policy.probs,
                     np.ones(source.n_states, dtype=bool))
    if isinstance(source, OfflineDataset):
        source = empirical_mdp(source)
    if isinstance(source, EmpiricalModel):
        pol = source.policy if policy is None else policy.probs
        return Model(source.reward, source.transition, pol, source.state_mask)
    if isinstance(source, Model):
        return source
    raise TypeError(f"unsupported source {type(source).__name__}")


# -- optimal transport ---------------------------------------------------------

def wasserstein1(p, q, cost) -> float:
    """Exact optimal-transport cost between discrete distributions ``p`` and ``q``.

    Solves the transport LP restricted to the supports of ``p`` and ``q``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    c = cost.g if isinstance(cost, Measurement) else np.asarray(cost, dtype=float)
    if p.ndim != 1 or p.shape != q.shape or c.shape != (len(p), len(p)):
        raise ValueError("dimension mismatch between distributions and cost")
    if np.any(p < 0) or np.any(q < 0) or abs(p.sum() - q.sum()) > 1e-9:
        raise ValueError("p and q must be nonnegative with equal mass")
    sp, sq = np.flatnonzero(p > 0), np.flatnonzero(q > 0)
    if len(sp) == 0:
        return 0.0
    # point masses force the coupling
    if len(sp) == 1:
        return float(c[sp[0], sq] @ q[sq])
    if len(sq) == 1:
        return float(p[sp] @ c[sp, sq[0]])
    m, k = len(sp), len(sq)
    sub = c[np.ix_(sp, sq)]
    a_eq = np.zeros((m + k, m * k))
    for i in range(m):
        a_eq[i, i * k:(i + 1) * k] = 1.0
    for j in range(k):
        a_eq[m + j, j::k] = 1.0
    b_eq = np.concatenate([p[sp], q[sq]])
    res = linprog(sub.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


# -- fixed points --------------------------------------------------------------

class ConvergenceError(RuntimeError):
    def __init__(self, message, history=()):
        super().__init__(message)
        self.history = tuple(history)


def _iterate(step, g0, tol, max_iter):
    g = g0
    history = []
    for it in range(1, max_iter + 1):
        g_new = step(g)
        diff = float(np.max(np.abs(g_new - g))) if g.size else 0.0
        history.append(diff)
        g = g_new
        if diff <= tol:
            return g, it, tuple(history)
    raise ConvergenceError(f"no convergence after {max_iter} sweeps", history)


def pi_bisim_fixed_point(mdp: TabularMdp, policy: Policy, tol: float = FIXED_POINT_TOL,
                         scaling: ScalingConfig | None = None,
                         max_iter: int = 100_000) -> Measurement:
    """Least fixed point of g ↦ c_r|r^π_i - r^π_j| + c_k W(g)(P^π_i, P^π_j).

    Defaults to c_r = 1, c_k = γ.
    """
    scaling = (scaling or ScalingConfig.standard(mdp.discount)).validate()
    model = as_model(mdp, policy)
    r = model.policy_reward()
    p = model.policy_transition()
    n = mdp.n_states
    base = scaling.c_r * np.abs(r[:, None] - r[None, :])
    iu = np.triu_indices(n, 1)

    def step(g):
        w = np.zeros((n, n))
        for i, j in zip(*iu):
            w[i, j] = w[j, i] = wasserstein1(p[i], p[j], g)
        out = base + scaling.c_k * w
        np.fill_diagonal(out, 0.0)
        return out

    g, it, hist = _iterate(step, np.zeros((n, n)), tol, max_iter)
    return Measurement(g, "pi_bisim", scaling, it, hist)


def scaled_operator(g: np.ndarray, model: Model, scaling: ScalingConfig) -> np.ndarray:
    """c_r|r^π_i - r^π_j| + c_k Σ P^π_i(k) P^π_j(l) g[k, l] (independent coupling)."""
    r = model.policy_reward()
    p = model.policy_transition()
    return scaling.c_r * np.abs(r[:, None] - r[None, :]) + scaling.c_k * (p @ g @ p.T)


def scaled_fixed_point(mdp: TabularMdp, policy: Policy, scaling: ScalingConfig,
                       tol: float = FIXED_POINT_TOL, max_iter: int = 1_000_000) -> Measurement:
    """Fixed point of the reward-scaled independent-coupling operator.

    With ``scaling = (1, γ)`` this is the MICo / SimSR(basic) fixed point.
    """
    scaling = ScalingConfig(*scaling).validate()
    if tol <= 0:
        raise ValueError("tol must be positive")
    model = as_model(mdp, policy)
    n = mdp.n_states
    g, it, hist = _iterate(lambda g: scaled_operator(g, model, scaling),
                           np.zeros((n, n)), tol, max_iter)
    return Measurement(g, "scaled" if scaling != (1.0, mdp.discount) else "generalized",
                       scaling, it, hist)


def fixed_point_bound(mdp: TabularMdp, scaling: ScalingConfig) -> float:
    """c_r (R_max - R_min) / (1 - c_k)."""
    return scaling.c_r * (mdp.r_max - mdp.r_min) / (1.0 - scaling.c_k)


@dataclass(frozen=True, eq=False)
class LiftedMdp:
    """MDP over state pairs, indexed ``i * n + j``."""

    mdp: TabularMdp
    policy: Policy
    n_base: int

    def index(self, i: int, j: int) -> int:
        return i * self.n_base + j

    def pair(self, index: int) -> tuple[int, int]:
        return divmod(index, self.n_base)

    def unflatten(self, values) -> np.ndarray:
        return np.asarray(values).reshape(self.n_base, self.n_base)


def build_lifted_mdp(mdp: TabularMdp, policy: Policy, scaling: ScalingConfig,
                     cap: int = LIFTED_STATE_CAP) -> LiftedMdp:
    """Pair MDP whose Bellman evaluation operator is the scaled bisimulation operator.

    States are pairs (i, j), actions pairs (a_i, a_j), transitions the
    product T[i, a_i] ⊗ T[j, a_j], reward c_r|r^π_i - r^π_j| for every
    action, discount c_k, and policy π(a_i|i) π(a_j|j).
    """
    scaling = ScalingConfig(*scaling).validate()
    n, m = mdp.n_states, mdp.n_actions
    if n * n > cap:
        raise ValueError(f"lifted MDP would have {n * n} states, above the cap {cap}")
    model = as_model(mdp, policy)
    t = np.einsum("iak,jbl->ijabkl", mdp.transition, mdp.transition).reshape(n * n, m * m, n * n)
    r = model.policy_reward()
    reward = np.repeat((scaling.c_r * np.abs(r[:, None] - r[None, :])).reshape(n * n, 1), m * m, axis=1)
    pol = np.einsum("ia,jb->ijab", policy.probs, policy.probs).reshape(n * n, m * m)
    return LiftedMdp(TabularMdp(t, reward, scaling.c_k), Policy(pol), n)


def lifted_values(lifted: LiftedMdp, tol: float = 1e-12) -> np.ndarray:
    return lifted.unflatten(policy_evaluation(lifted.mdp, lifted.policy, tol))


def g_star_fixed_point(source, scaling: ScalingConfig, tol: float = FIXED_POINT_TOL,
                       policy: Policy | None = None, max_iter: int = 1_000_000) -> StateActionMeasurement:
    """In-sample max fixed point on state-action pairs.

    G*((i,a),(j,b)) = c_r|r(i,a) - r(j,b)| + c_k E_{k~T[i,a], l~T[j,b]}[max G*((k,·),(l,·))]
    where the max ranges over actions with positive behavior probability.
    Next states without any in-support action contribute zero continuation
    and are reported in ``frontier_states``.
    """
    scaling = ScalingConfig(*scaling).validate()
    model = as_model(source, policy)
    n, m = model.reward.shape
    support = model.sa_support()
    reached = np.einsum("sat->t", model.transition * support[:, :, None]) > 0
    frontier = frozenset(int(s) for s in np.flatnonzero(reached & ~support.any(axis=1)))
    flat_t = model.transition.reshape(n * m, n)
    rew = model.reward.reshape(n * m)
    base = scaling.c_r * np.abs(rew[:, None] - rew[None, :])

    def step(g):
        v = _masked_state_max(g.reshape(n, m, n, m), support)
        return base + scaling.c_k * (flat_t @ v @ flat_t.T)

    g, it, _ = _iterate(step, np.zeros((n * m, n * m)), tol, max_iter)
    return StateActionMeasurement(g.reshape(n, m, n, m), support, scaling, frontier, it)


def value_difference_bound_check(mdp: TabularMdp, policy: Policy, g, scaling: ScalingConfig,
                                 tol: float = 1e-9) -> dict:
    """Compare |V^π_i - V^π_j| with g_ij / c_r.

    The comparison is a valid bound only when c_k >= γ; otherwise the
    report says so and counts violations for information only.
    """
    table = g.g if isinstance(g, Measurement) else np.asarray(g)
    v = policy_evaluation(mdp, policy, 1e-12)
    dv = np.abs(v[:, None] - v[None, :])
    notes = []
    if scaling.c_r <= 0:
        raise ValueError("c_r must be positive for a value-difference comparison")
    if scaling.c_k < mdp.discount:
        notes.append(f"mismatched scaling: c_k={scaling.c_k} < discount={mdp.discount}; "
                     "bound not implied")
    excess = dv - table / scaling.c_r
    return {
        "max_excess": float(excess.max()),
        "violations": int(np.sum(excess > tol)),
        "max_value_gap": float(dv.max()),
        "notes": notes,
    }


# -- serialization -------------------------------------------------------------

def save_measurement(m: Measurement, path) -> None:
    """Dense CSV with header row/column of state indices and a ``.meta`` sidecar."""
    n = m.n_states
    lines = ["," + ",".join(str(j) for j in range(n))]
    for i in range(n):
        lines.append(f"{i}," + ",".join(repr(float(x)) for x in m.g[i]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    meta = {"kind": m.kind, "iterations": m.iterations}
    if m.scaling is not None:
        meta["c_r"], meta["c_k"] = repr(float(m.scaling.c_r)), repr(float(m.scaling.c_k))
    meta.update({k: v for k, v in m.metadata.items() if isinstance(v, (int, float, str))})
    with open(f"{path}.meta", "w") as f:
        f.writelines(f"{k} = {v}\n" for k, v in meta.items())


def load_measurement(path) -> Measurement:
    with open(path) as f:
        rows = [ln.rstrip("\n").split(",") for ln in f if ln.strip()]
    g = np.array([[float(x) for x in row[1:]] for row in rows[1:]])
    meta = {}
    try:
        with open(f"{path}.meta") as f:
            for ln in f:
                if "=" in ln:
                    k, v = ln.split("=", 1)
                    meta[k.strip()] = v.strip()
    except FileNotFoundError:
        pass
    scaling = None
    if "c_r" in meta:
        scaling = ScalingConfig(float(meta.pop("c_r")), float(meta.pop("c_k")))
    kind = meta.pop("kind", "learned")
    iterations = int(meta.pop("iterations", 0))
    return Measurement(g, kind, scaling, iterations, metadata=meta)
