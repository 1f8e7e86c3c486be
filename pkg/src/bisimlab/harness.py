"""Residual/error diagnostics, the zero-residual counterexample, and state aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bisim import (
    Measurement,
    ScalingConfig,
    as_model,
    scaled_fixed_point,
    scaled_operator,
)
from .dataset import OfflineDataset, collect, remove_transitions
from .mdp import Policy, TabularMdp, policy_evaluation


def _table(g) -> np.ndarray:
    return g.g if isinstance(g, Measurement) else np.asarray(g, dtype=float)


# -- residuals and errors ------------------------------------------------------

def signed_residual(g, source, scaling: ScalingConfig, policy: Policy | None = None) -> np.ndarray:
    """g - (c_r|r^π_i - r^π_j| + c_k E[g(s'_i, s'_j)]) with independent next states."""
    return _table(g) - scaled_operator(_table(g), as_model(source, policy), ScalingConfig(*scaling))


def unique_tuples(ds: OfflineDataset):
    """Distinct (s, r, s_next, done) records and their multiplicities."""
    rec = np.rec.fromarrays([ds.s, ds.r, ds.s_next, ds.done], names="s,r,s_next,done")
    uniq, counts = np.unique(rec, return_counts=True)
    return uniq["s"], uniq["r"], uniq["s_next"], uniq["done"].astype(bool), counts


def tuple_pair_residual(g, ds: OfflineDataset, scaling: ScalingConfig):
    """Signed residual for every ordered pair of distinct dataset records.

    Returns (table over unique records, pair weights summing to 1). The
    weights are products of record multiplicities, so weighted means equal
    plain means over all ordered pairs of tuples.
    """
    t = _table(g)
    s, r, s_next, done, counts = unique_tuples(ds)
    live = (~done).astype(float)
    sc = ScalingConfig(*scaling)
    target = sc.c_r * np.abs(r[:, None] - r[None, :]) + \
        sc.c_k * np.outer(live, live) * t[np.ix_(s_next, s_next)]
    eps = t[np.ix_(s, s)] - target
    w = np.outer(counts, counts) / float(len(ds)) ** 2
    return eps, w


def residual_table(g, source, scaling: ScalingConfig, policy: Policy | None = None) -> np.ndarray:
    """|ε|: exact over state pairs for MDPs, per tuple pair for datasets."""
    if isinstance(source, OfflineDataset):
        return np.abs(tuple_pair_residual(g, source, scaling)[0])
    return np.abs(signed_residual(g, source, scaling, policy))


def error_table(g, g_fixed) -> np.ndarray:
    """Δ = |g - g_fixed| entrywise."""
    a, b = _table(g), _table(g_fixed)
    if a.shape != b.shape:
        raise ValueError("measurements have different shapes")
    return np.abs(a - b)


@dataclass
class ResidualReport:
    mean_sq_residual: float
    mean_sq_error: float
    residual: np.ndarray
    error: np.ndarray
    dataset_id: str = ""
    measurement_id: str = ""
    converged: bool = True
    steps: int = 0
    n_transitions: int = 0

    @property
    def ratio(self) -> float:
        if self.mean_sq_residual == 0:
            return float("inf")
        return self.mean_sq_error / self.mean_sq_residual


def dataset_report(g, g_fixed, ds: OfflineDataset, scaling: ScalingConfig, **kw) -> ResidualReport:
    """Mean squared residual and error averaged over all ordered pairs of tuples."""
    eps, w = tuple_pair_residual(g, ds, scaling)
    s, *_ = unique_tuples(ds)
    delta = error_table(g, g_fixed)[np.ix_(s, s)]
    return ResidualReport(float(np.sum(w * eps ** 2)), float(np.sum(w * delta ** 2)),
                          eps, delta, ds.source_mdp_id, **kw)


def residual_error_identity_check(g, mdp: TabularMdp, policy: Policy, scaling: ScalingConfig,
                                  g_fixed=None, atol: float = 1e-8) -> dict:
    """Check ε_signed = Δ_signed - c_k E[Δ_signed'] and max|Δ| <= max|ε| / (1 - c_k)."""
    sc = ScalingConfig(*scaling).validate()
    if g_fixed is None:
        g_fixed = scaled_fixed_point(mdp, policy, sc, tol=1e-13)
    t, gf = _table(g), _table(g_fixed)
    model = as_model(mdp, policy)
    p = model.policy_transition()
    eps = signed_residual(t, mdp, sc, policy)
    delta = t - gf
    identity_gap = float(np.max(np.abs(eps - (delta - sc.c_k * p @ delta @ p.T))))
    sup_delta = float(np.max(np.abs(delta)))
    sup_bound = float(np.max(np.abs(eps))) / (1.0 - sc.c_k)
    return {
        "identity_violation": identity_gap,
        "max_error": sup_delta,
        "error_bound": sup_bound,
        "passed": identity_gap <= atol and sup_delta <= sup_bound + atol,
    }


# -- zero residual, positive error ---------------------------------------------

def _deterministic_records(ds: OfflineDataset):
    rec = {}
    for t in ds:
        key = (t.r, t.s_next, t.done)
        if rec.setdefault(t.s, key) != key:
            raise ValueError(f"state {t.s} has conflicting outcomes; the construction needs "
                             "one (reward, next state, done) per state")
    return rec


def prop4_construct(ds: OfflineDataset, scaling: ScalingConfig, c: float, g_true=None,
                    max_iter: int = 200_000) -> Measurement:
    """A measurement with zero residual on every dataset pair but error ``c`` at one pair.

    Starting from ``g_true`` (zeros by default), the value at a pair of
    next states that never appear as current states is raised by c / c_k.
    Dataset pairs are then back-solved along the observed transitions until
    they satisfy their recursion exactly, so the pair that leads to the
    raised frontier pair sits exactly c above ``g_true``.
    """
    sc = ScalingConfig(*scaling).validate()
    if c < 0:
        raise ValueError("C must be nonnegative")
    if sc.c_k == 0:
        raise ValueError("c_k must be positive to reach the frontier")
    n = ds.n_states
    base = np.zeros((n, n)) if g_true is None else np.array(_table(g_true), dtype=float)
    rec = _deterministic_records(ds)
    present = sorted(rec)
    frontier = {s_next for (_, s_next, done) in rec.values() if not done and s_next not in rec}
    target = None
    for i in present:
        for j in present:
            ri, ni, di = rec[i]
            rj, nj, dj = rec[j]
            if i < j and not di and not dj and (ni in frontier or nj in frontier):
                target = (i, j)
                break
        if target:
            break
    if target is None:
        raise ValueError("dataset has no pair of tuples leading to a missing next state")
    _, ni, _ = rec[target[0]]
    _, nj, _ = rec[target[1]]
    g = base.copy()
    g[ni, nj] += c / sc.c_k
    if ni != nj:
        g[nj, ni] += c / sc.c_k

    idx = np.array(present)
    r = np.array([rec[s][0] for s in present])
    nxt = np.array([rec[s][1] for s in present])
    live = np.array([0.0 if rec[s][2] else 1.0 for s in present])
    rdiff = sc.c_r * np.abs(r[:, None] - r[None, :])
    mask = np.outer(live, live)
    block = np.ix_(idx, idx)
    for it in range(max_iter):
        new = rdiff + sc.c_k * mask * g[np.ix_(nxt, nxt)]
        if np.array_equal(new, g[block]):
            break
        g[block] = new
    else:
        raise RuntimeError("back-solving did not reach an exact fixed point")
    return Measurement(g, "constructed", sc, it, metadata={
        "target_i": target[0], "target_j": target[1], "frontier_i": ni, "frontier_j": nj, "C": c})


def prop4_check(ds: OfflineDataset, scaling: ScalingConfig, c: float, g_true) -> dict:
    """Build the counterexample and report its dataset residual and target error."""
    m = prop4_construct(ds, scaling, c, g_true)
    eps, _ = tuple_pair_residual(m, ds, scaling)
    i, j = m.metadata["target_i"], m.metadata["target_j"]
    err = float(abs(m.g[i, j] - _table(g_true)[i, j]))
    return {"measurement": m, "max_residual": float(np.max(np.abs(eps))),
            "target_error": err, "target": (i, j)}


# -- residual minimization on a dataset -----------------------------------------

def minimize_dataset_residual(ds: OfflineDataset, scaling: ScalingConfig, threshold: float = 1e-4,
                              step_size: float = 0.5, max_steps: int = 100_000):
    """Tabular semi-gradient descent on the mean squared tuple-pair residual.

    Each step moves g(s_k, s_l) against the weight-averaged residual of the
    tuple pairs that start at (s_k, s_l), with the bootstrapped target held
    fixed. Entries never visited as current-state pairs keep their initial
    value 0. Returns (g, final mean squared residual, steps, converged).
    """
    n = ds.n_states
    s, *_ = unique_tuples(ds)
    g = np.zeros((n, n))
    pair_w = None
    for step in range(1, max_steps + 1):
        eps, w = tuple_pair_residual(g, ds, scaling)
        msr = float(np.sum(w * eps ** 2))
        if msr < threshold:
            return g, msr, step - 1, True
        if pair_w is None:
            pair_w = np.zeros((n, n))
            np.add.at(pair_w, (s[:, None], s[None, :]), w)
        grad = np.zeros((n, n))
        np.add.at(grad, (s[:, None], s[None, :]), w * eps)
        visited = pair_w > 0
        g[visited] -= step_size * grad[visited] / pair_w[visited]
    eps, w = tuple_pair_residual(g, ds, scaling)
    msr = float(np.sum(w * eps ** 2))
    return g, msr, max_steps, msr < threshold


def appendix_i_experiment(mdp: TabularMdp, behavior: Policy, n_transitions_grid, drop_rule, seed,
                          scaling: ScalingConfig | None = None, horizon: int = 50,
                          threshold: float = 1e-4, max_steps: int = 100_000) -> list[ResidualReport]:
    """Residual vs error after fitting a measurement on datasets with missing transitions.

    For every dataset size a dataset is collected, ``drop_rule`` is applied
    (``None`` keeps everything), the mean squared tuple-pair residual is
    minimized, and the mean squared error against the scaled fixed point of
    the full MDP is measured over the same tuple pairs.
    """
    sc = ScalingConfig(*(scaling or ScalingConfig.standard(mdp.discount))).validate()
    g_true = scaled_fixed_point(mdp, behavior, sc, tol=1e-12)
    ss = np.random.SeedSequence(seed)
    reports = []
    for n_tr, child in zip(n_transitions_grid, ss.spawn(len(n_transitions_grid))):
        c_seed, d_seed = child.generate_state(2)
        ds = collect(mdp, behavior, int(n_tr), horizon, int(c_seed))
        if drop_rule is not None:
            ds = remove_transitions(ds, drop_rule, int(d_seed))
        g, msr, steps, ok = minimize_dataset_residual(ds, sc, threshold, max_steps=max_steps)
        rep = dataset_report(g, g_true, ds, sc, measurement_id="tabular-descent",
                             converged=ok, steps=steps, n_transitions=len(ds))
        reports.append(rep)
    return reports


# -- aggregation ---------------------------------------------------------------

@dataclass
class Aggregation:
    omega: float
    cluster_of: np.ndarray
    mdp: TabularMdp
    policy: Policy
    members: list = field(default_factory=list)
    delta_hat: float | None = None

    @property
    def n_clusters(self) -> int:
        return len(self.members)


def cluster(g, omega: float) -> list[list[int]]:
    """Greedy index-order clustering.

    A state joins the first cluster whose representative (first member) is
    within ``omega`` and whose members are all within ``2 * omega``;
    otherwise it opens a new cluster.
    """
    t = _table(g)
    if omega < 0:
        raise ValueError("omega must be nonnegative")
    clusters: list[list[int]] = []
    for s in range(t.shape[0]):
        for members in clusters:
            if t[members[0], s] <= omega and all(t[z, s] <= 2 * omega for z in members):
                members.append(s)
                break
        else:
            clusters.append([s])
    return clusters


def aggregate(g, omega: float, mdp: TabularMdp, policy: Policy, state_weights=None) -> Aggregation:
    """Quotient MDP over the clusters of :func:`cluster`.

    Within a cluster, member z and action a are weighted by ξ_z π(a|z) with
    ξ uniform unless ``state_weights`` is given, so the aggregated on-policy
    reward is the ξ-average of member rewards and likewise for transitions.
    """
    members = cluster(g, omega)
    n, m = mdp.n_states, mdp.n_actions
    xi = np.ones(n) if state_weights is None else np.asarray(state_weights, dtype=float)
    if xi.shape != (n,) or np.any(xi < 0):
        raise ValueError("state_weights must be a nonnegative vector over states")
    k = len(members)
    cluster_of = np.empty(n, dtype=np.int64)
    for c, mem in enumerate(members):
        cluster_of[mem] = c
    onto = np.zeros((n, k))
    onto[np.arange(n), cluster_of] = 1.0
    reward = np.zeros((k, m))
    trans = np.zeros((k, m, k))
    probs = np.zeros((k, m))
    for c, mem in enumerate(members):
        w_state = xi[mem]
        if w_state.sum() == 0:
            w_state = np.ones(len(mem))
        w = w_state[:, None] * policy.probs[mem]
        probs[c] = w.sum(axis=0) / w_state.sum()
        for a in range(m):
            tot = w[:, a].sum()
            if tot > 0:
                reward[c, a] = w[:, a] @ mdp.reward[mem, a] / tot
                trans[c, a] = (w[:, a] @ mdp.transition[mem, a]) @ onto / tot
            else:
                trans[c, a, c] = 1.0
    trans /= trans.sum(axis=2, keepdims=True)
    return Aggregation(omega, cluster_of, TabularMdp(trans, reward, mdp.discount),
                       Policy(probs), members)


def value_bound_check(mdp: TabularMdp, policy: Policy, aggregation: Aggregation, g_fixed, g_phi,
                      scaling: ScalingConfig, atol: float = 1e-8) -> dict:
    """|V^π(s) - Ṽ(cluster(s))| against (2ω + Δ̂) / (c_r (1 - γ)).

    Rewards must lie in [0, 1]; normalize the MDP first. Δ̂ is the largest
    entrywise gap between ``g_fixed`` and ``g_phi``.
    """
    sc = ScalingConfig(*scaling).validate()
    if mdp.r_min < 0 or mdp.r_max > 1:
        raise ValueError("rewards must lie in [0, 1]; normalize the MDP first")
    if sc.c_r <= 0:
        raise ValueError("c_r must be positive")
    delta_hat = float(np.max(np.abs(_table(g_fixed) - _table(g_phi))))
    aggregation.delta_hat = delta_hat
    v = policy_evaluation(mdp, policy, 1e-12)
    v_agg = policy_evaluation(aggregation.mdp, aggregation.policy, 1e-12)
    gap = np.abs(v - v_agg[aggregation.cluster_of])
    bound = (2 * aggregation.omega + delta_hat) / (sc.c_r * (1.0 - mdp.discount))
    notes = []
    if sc.c_k < mdp.discount:
        notes.append(f"c_k={sc.c_k} < discount={mdp.discount}: bound not implied")
    violations = int(np.sum(gap > bound + atol))
    return {"max_gap": float(gap.max()), "bound": bound, "delta_hat": delta_hat,
            "violations": violations, "n_clusters": aggregation.n_clusters,
            "passed": violations == 0, "notes": notes}
