"""Expectile-based bisimulation operator and the probes for its properties."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .bisim import (
    ConvergenceError,
    Measurement,
    ScalingConfig,
    _iterate,
    as_model,
    g_star_fixed_point,
)
from .mdp import Policy, TabularMdp


REWARD_MODES = ("policy", "action")


@dataclass(frozen=True)
class ExpectileConfig:
    """Settings of the expectile operator.

    ``alpha`` is the gradient step; it must not exceed 0.5 so that the
    sweep is a convex combination of its positive and negative parts.

    ``reward_mode`` picks the reward term of the residual. ``"policy"`` uses
    the on-policy rewards r^π (so τ = 0.5 gives the scaled operator's fixed
    point exactly); ``"action"`` uses r(s, a) of each sampled action pair,
    which is what a dataset tuple carries and what the in-sample maximum
    G* is built from.
    """

    tau: float = 0.5
    alpha: float = 0.3
    scaling: ScalingConfig = ScalingConfig()
    tol: float = 1e-9
    max_sweeps: int = 2_000_000
    reward_mode: str = "policy"

    def __post_init__(self):
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        object.__setattr__(self, "scaling", ScalingConfig(*self.scaling).validate())
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.alpha <= 0.5:
            raise ValueError(f"alpha must lie in (0, 0.5], got {self.alpha}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")

    @property
    def gamma_tau(self) -> float:
        """Contraction modulus 1 - 2α(1 - c_k) min{τ, 1 - τ}."""
        return 1.0 - 2.0 * self.alpha * (1.0 - self.scaling.c_k) * min(self.tau, 1.0 - self.tau)


def expectile_scalar(values, weights=None, tau: float = 0.5, tol: float = 1e-12) -> float:
    """τ-expectile of a discrete distribution, by bisection.

    Finds m with τ E[(x - m)_+] = (1 - τ) E[(m - x)_+].
    """
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("expectile of an empty distribution")
    w = np.full(x.shape, 1.0 / x.size) if weights is None else np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError("weights must be nonnegative and sum to 1")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")

    def excess(m):
        return tau * w @ np.maximum(x - m, 0.0) - (1.0 - tau) * w @ np.maximum(m - x, 0.0)

    lo, hi = float(x.min()), float(x.max())
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def weighted_expectile(values: np.ndarray, weights: np.ndarray, tau: float) -> np.ndarray:
    """τ-expectile along the last axis, solved exactly on the piecewise-linear condition."""
    order = np.argsort(values, axis=-1)
    v = np.take_along_axis(values, order, axis=-1)
    w = np.take_along_axis(np.broadcast_to(weights, values.shape), order, axis=-1)
    wv = w * v
    w_lo = np.cumsum(w, axis=-1)
    s_lo = np.cumsum(wv, axis=-1)
    w_hi = w_lo[..., -1:] - w_lo
    s_hi = s_lo[..., -1:] - s_lo
    # excess at each sorted breakpoint; decreasing in the breakpoint index
    f = tau * (s_hi - v * w_hi) - (1.0 - tau) * (v * w_lo - s_lo)
    k = np.sum(f >= 0, axis=-1, keepdims=True) - 1
    k = np.clip(k, 0, v.shape[-1] - 1)
    num = tau * np.take_along_axis(s_hi, k, -1) + (1.0 - tau) * np.take_along_axis(s_lo, k, -1)
    den = tau * np.take_along_axis(w_hi, k, -1) + (1.0 - tau) * np.take_along_axis(w_lo, k, -1)
    return (num / den)[..., 0]


class _PairOperator:
    """Per-action-pair targets and weights for every state pair."""

    def __init__(self, source, policy: Policy | None, scaling: ScalingConfig,
                 reward_mode: str = "policy"):
        model = as_model(source, policy)
        n, m = model.reward.shape
        self.n, self.m = n, m
        self.scaling = scaling
        # indexed (i, j, a, b)
        if reward_mode == "action":
            r = model.reward
            self.base = scaling.c_r * np.abs(r[:, None, :, None] - r[None, :, None, :])
        else:
            r = model.policy_reward()
            diff = scaling.c_r * np.abs(r[:, None] - r[None, :])
            self.base = np.broadcast_to(diff[:, :, None, None], (n, n, m, m))
        self.flat_t = model.transition.reshape(n * m, n)
        self.weights = np.einsum("ia,jb->ijab", model.policy, model.policy)
        mask = model.state_mask
        self.pair_mask = mask[:, None] & mask[None, :]

    def targets(self, g: np.ndarray) -> np.ndarray:
        n, m = self.n, self.m
        nxt = (self.flat_t @ g @ self.flat_t.T).reshape(n, m, n, m).transpose(0, 2, 1, 3)
        return self.base + self.scaling.c_k * nxt

    def sweep(self, g: np.ndarray, tau: float, alpha: float) -> np.ndarray:
        eps = self.targets(g) - g[:, :, None, None]
        asym = tau * np.maximum(eps, 0.0) + (1.0 - tau) * np.minimum(eps, 0.0)
        step = 2.0 * alpha * np.einsum("ijab,ijab->ij", self.weights, asym)
        return np.where(self.pair_mask, g + step, g)

    def expectile_backup(self, g: np.ndarray, tau: float) -> np.ndarray:
        n, m = self.n, self.m
        t = self.targets(g).reshape(n, n, m * m)
        w = self.weights.reshape(n, n, m * m)
        safe_w = np.where(self.pair_mask[:, :, None], w, 1.0 / (m * m))
        out = weighted_expectile(t, safe_w, tau)
        return np.where(self.pair_mask, out, g)


def expectile_sweep(g, source, cfg: ExpectileConfig, policy: Policy | None = None) -> Measurement:
    """One gradient step of the expectile operator on every state pair.

    g'(i,j) = g(i,j) + 2α E_{a~π(·|i), b~π(·|j)}[τ[ε]_+ + (1-τ)[ε]_-] with
    ε = c_r|r(i,a) - r(j,b)| + c_k E[g(i', j')] - g(i,j). On a dataset the
    empirical model is used; pairs involving states without data are left
    unchanged.
    """
    table = g.g if isinstance(g, Measurement) else np.asarray(g, dtype=float)
    if not np.all(np.isfinite(table)):
        raise ValueError("measurement must be finite")
    op = _PairOperator(source, policy, cfg.scaling, cfg.reward_mode)
    return Measurement(op.sweep(table, cfg.tau, cfg.alpha), "expectile", cfg.scaling)


def expectile_fixed_point(source, cfg: ExpectileConfig, policy: Policy | None = None,
                          method: str = "sweep", init=None) -> Measurement:
    """G_τ, the fixed point of the expectile operator.

    ``method="sweep"`` iterates the gradient step itself. ``method="backup"``
    iterates g ← expectile_τ(targets(g)), which has the same fixed point
    (the gradient step vanishes exactly at the τ-expectile of the targets)
    and contracts at rate c_k instead of γ_τ.
    """
    op = _PairOperator(source, policy, cfg.scaling, cfg.reward_mode)
    n = op.n
    g0 = np.zeros((n, n)) if init is None else np.array(init, dtype=float)
    if method == "sweep":
        step = lambda g: op.sweep(g, cfg.tau, cfg.alpha)  # noqa: E731
    elif method == "backup":
        step = lambda g: op.expectile_backup(g, cfg.tau)  # noqa: E731
    else:
        raise ValueError(f"unknown method {method!r}")
    g, it, hist = _iterate(step, g0, cfg.tol, cfg.max_sweeps)
    return Measurement(g, "expectile", cfg.scaling, it, hist,
                       {"tau": cfg.tau, "alpha": cfg.alpha, "method": method})


def apply_expectile_operator(g: np.ndarray, source, cfg: ExpectileConfig,
                             policy: Policy | None = None) -> np.ndarray:
    return _PairOperator(source, policy, cfg.scaling, cfg.reward_mode).sweep(np.asarray(g, float), cfg.tau, cfg.alpha)


@dataclass
class ProbeReport:
    probe: str
    params: dict
    max_violation: float
    passed: bool
    details: dict = field(default_factory=dict)

    def csv_row(self) -> list[str]:
        params = ";".join(f"{k}={v}" for k, v in self.params.items())
        return [self.probe, params, repr(float(self.max_violation)), "pass" if self.passed else "fail"]


class ResidualSample(NamedTuple):
    pair: tuple[int, int]
    actions: tuple[int, int]
    epsilon_hat: float


def residual_samples(g, source, cfg: ExpectileConfig, policy: Policy | None = None,
                     ) -> list[ResidualSample]:
    """ε̂ for every state pair with data and every in-support action pair."""
    table = g.g if isinstance(g, Measurement) else np.asarray(g, dtype=float)
    op = _PairOperator(source, policy, cfg.scaling, cfg.reward_mode)
    eps = op.targets(table) - table[:, :, None, None]
    idx = np.argwhere((op.weights > 0) & op.pair_mask[:, :, None, None])
    return [ResidualSample((int(i), int(j)), (int(a), int(b)), float(eps[i, j, a, b]))
            for i, j, a, b in idx]


def _random_symmetric(rng, n, scale):
    a = rng.uniform(0.0, scale, size=(n, n))
    return np.triu(a) + np.triu(a, 1).T


def operator_ratio(cfg: ExpectileConfig, source, g1, g2, policy: Policy | None = None) -> float:
    """‖F G1 − F G2‖∞ / ‖G1 − G2‖∞ for one sweep F; defined as 0 when G1 = G2."""
    return _ratio(_PairOperator(source, policy, cfg.scaling, cfg.reward_mode), cfg,
                  np.asarray(g1, float), np.asarray(g2, float))


def _ratio(op, cfg, g1, g2):
    den = np.max(np.abs(g1 - g2))
    if den == 0:
        return 0.0
    num = np.max(np.abs(op.sweep(g1, cfg.tau, cfg.alpha) - op.sweep(g2, cfg.tau, cfg.alpha)))
    return float(num / den)


def contraction_probe(cfg: ExpectileConfig, mdp: TabularMdp, policy: Policy, n_trials: int,
                      seed, slack: float = 1e-10) -> ProbeReport:
    """Empirical Lipschitz ratios of the expectile operator against γ_τ."""
    rng = np.random.default_rng(seed)
    op = _PairOperator(mdp, policy, cfg.scaling, cfg.reward_mode)
    n = mdp.n_states
    scale = max(cfg.scaling.c_r * (mdp.r_max - mdp.r_min) / (1 - cfg.scaling.c_k), 1.0)
    worst = 0.0
    for _ in range(n_trials):
        g1 = _random_symmetric(rng, n, 2 * scale)
        # half the trials use a nearby G2 so both sides sit on the same linear piece
        if rng.uniform() < 0.5:
            g2 = g1 + _random_symmetric(rng, n, 1e-3 * scale)
        else:
            g2 = _random_symmetric(rng, n, 2 * scale)
        worst = max(worst, _ratio(op, cfg, g1, g2))
    gt = cfg.gamma_tau
    return ProbeReport("contraction", {"tau": cfg.tau, "alpha": cfg.alpha, "c_k": cfg.scaling.c_k,
                                       "trials": n_trials},
                       max(worst - gt, 0.0), bool(worst <= gt + slack),
                       {"max_ratio": worst, "gamma_tau": gt})


def monotonicity_probe(source, tau_grid, cfg_base: ExpectileConfig, policy: Policy | None = None,
                       slack: float = 1e-8, method: str = "backup") -> ProbeReport:
    """Check G_τ' >= G_τ - slack elementwise along an ascending τ grid."""
    taus = sorted(tau_grid)
    tables = [expectile_fixed_point(source, replace(cfg_base, tau=t), policy, method).g for t in taus]
    worst = 0.0
    count = 0
    for lo, hi in zip(tables, tables[1:]):
        gap = lo - hi
        worst = max(worst, float(gap.max()))
        count += int(np.sum(gap > slack))
    return ProbeReport("monotonicity", {"taus": "/".join(map(str, taus))},
                       max(worst, 0.0), count == 0, {"violations": count})


def tau_limit_probe(mdp: TabularMdp, tau_sequence, cfg_base: ExpectileConfig, dataset=None,
                    policy: Policy | None = None, threshold: float = 0.05,
                    slack: float = 1e-9, method: str = "backup") -> ProbeReport:
    """Distance from G_τ to the in-sample max of G* along τ → 1.

    Requires a deterministic MDP. The operators run on ``dataset``'s
    empirical model when one is given, else on (mdp, policy). Rewards are
    taken per action, matching G*.
    """
    if not mdp.is_deterministic():
        raise ValueError("the τ → 1 limit is only established for deterministic MDPs")
    source = dataset if dataset is not None else mdp
    if dataset is None and policy is None:
        raise ValueError("policy is required when no dataset is given")
    model = as_model(source, policy if dataset is None else None)
    target = g_star_fixed_point(model, cfg_base.scaling, tol=min(cfg_base.tol, 1e-10)).state_max()
    pair_mask = model.state_mask[:, None] & model.state_mask[None, :]
    errors = []
    for t in sorted(tau_sequence):
        cfg = replace(cfg_base, tau=t, reward_mode="action")
        g = expectile_fixed_point(model, cfg, None, method).g
        errors.append(float(np.max(np.abs(g - target)[pair_mask])))
    increases = [b - a for a, b in zip(errors, errors[1:])]
    monotone = all(d <= slack for d in increases)
    passed = monotone and errors[-1] <= threshold
    return ProbeReport("tau_limit", {"taus": "/".join(map(str, sorted(tau_sequence))),
                                     "threshold": threshold},
                       errors[-1], bool(passed), {"errors": errors, "monotone": monotone})


__all__ = [
    "ConvergenceError",
    "ExpectileConfig",
    "ProbeReport",
    "ResidualSample",
    "residual_samples",
    "apply_expectile_operator",
    "contraction_probe",
    "expectile_fixed_point",
    "expectile_scalar",
    "expectile_sweep",
    "monotonicity_probe",
    "operator_ratio",
    "tau_limit_probe",
    "weighted_expectile",
]
