"""Verification suites run by ``bisimlab verify``.

Every suite takes a :class:`numpy.random.SeedSequence` derived from the run
seed and the suite name, plus a parameter dict, and returns a list of
:class:`~bisimlab.expectile.ProbeReport` rows. Rows are deterministic
functions of (seed, params); timings are kept out of them.
"""

from __future__ import annotations

import csv
import io
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .bisim import (
    ConvergenceError,
    ScalingConfig,
    build_lifted_mdp,
    fixed_point_bound,
    lifted_values,
    scaled_fixed_point,
)
from .dataset import DropRandomNextStates, collect, minmax_normalize
from .expectile import (
    ExpectileConfig,
    ProbeReport,
    contraction_probe,
    monotonicity_probe,
    tau_limit_probe,
)
from .harness import (
    aggregate,
    appendix_i_experiment,
    prop4_check,
    residual_error_identity_check,
    value_bound_check,
)
from .mdp import Policy, TabularMdp, make_garnet, normalize_rewards
from .repr_learning import (
    Batch,
    DistanceKind,
    Encoder,
    TrainConfig,
    distance_table,
    expectile_loss_batch,
    mean_residual,
    train,
)


def suite_seed(seed: int, name: str) -> np.random.SeedSequence:
    """Independent stream per (run seed, suite name)."""
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])


def _rng(ss: np.random.SeedSequence) -> np.random.Generator:
    return np.random.default_rng(ss)


def random_mdp(rng: np.random.Generator, max_states: int = 8, max_actions: int = 3,
               deterministic: bool = False) -> TabularMdp:
    n = int(rng.integers(2, max_states + 1))
    m = int(rng.integers(1, max_actions + 1))
    branching = 1 if deterministic else int(rng.integers(1, n + 1))
    return make_garnet(n, m, branching, float(rng.uniform(0.0, 0.5)), int(rng.integers(2 ** 31)),
                       discount=float(rng.uniform(0.5, 0.95)))


def _fmt(x: float) -> str:
    return f"{x:.6g}"


# -- suites --------------------------------------------------------------------

def suite_lemma2(ss, p) -> list[ProbeReport]:
    """Pair-MDP policy evaluation equals the scaled fixed point."""
    rng = _rng(ss)
    rows = []
    for k in range(p["n_mdps"]):
        mdp = random_mdp(rng)
        pol = Policy.random(mdp.n_states, mdp.n_actions, rng)
        sc = ScalingConfig(float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.5, 0.95)))
        direct = scaled_fixed_point(mdp, pol, sc, tol=1e-12).g
        lifted = lifted_values(build_lifted_mdp(mdp, pol, sc), tol=1e-12)
        gap = float(np.max(np.abs(direct - lifted)))
        rows.append(ProbeReport("lemma2", {"mdp": k, "n": mdp.n_states, "c_k": _fmt(sc.c_k)},
                                gap, gap <= p["atol"]))
    return rows


def suite_contraction(ss, p) -> list[ProbeReport]:
    """Lipschitz ratio of the expectile sweep against γ_τ over random (τ, α)."""
    rng = _rng(ss)
    rows = []
    for k in range(p["n_configs"]):
        mdp = random_mdp(rng)
        pol = Policy.random(mdp.n_states, mdp.n_actions, rng)
        sc = ScalingConfig(float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.5, 0.99)))
        cfg = ExpectileConfig(float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.01, 0.5)), sc,
                              reward_mode=str(rng.choice(["policy", "action"])))
        rep = contraction_probe(cfg, mdp, pol, p["pairs_per_config"], rng.integers(2 ** 63))
        rep.params = {"config": k, "tau": _fmt(cfg.tau), "alpha": _fmt(cfg.alpha),
                      "c_k": _fmt(sc.c_k), "pairs": p["pairs_per_config"]}
        rows.append(rep)
    return rows


def suite_monotonicity(ss, p) -> list[ProbeReport]:
    rng = _rng(ss)
    rows = []
    for k in range(p["n_mdps"]):
        mdp = random_mdp(rng)
        pol = Policy.random(mdp.n_states, mdp.n_actions, rng)
        cfg = ExpectileConfig(0.5, 0.3, ScalingConfig(1.0, mdp.discount), tol=1e-11,
                              reward_mode="action" if k % 2 else "policy")
        rep = monotonicity_probe(mdp, p["taus"], cfg, pol)
        rep.params = {"mdp": k, "n": mdp.n_states, "reward_mode": cfg.reward_mode}
        rows.append(rep)
    return rows


def suite_tau_limit(ss, p) -> list[ProbeReport]:
    """τ → 1 on deterministic two-action MDPs with full-support datasets."""
    rng = _rng(ss)
    rows = []
    for k in range(p["n_mdps"]):
        n = int(rng.integers(4, 11))
        mdp = make_garnet(n, 2, 1, 0.0, int(rng.integers(2 ** 31)), discount=0.9)
        pol = Policy.random(n, 2, rng, min_prob=0.2)
        ds = collect(mdp, pol, p["n_transitions"], 20, int(rng.integers(2 ** 31)))
        cfg = ExpectileConfig(0.5, 0.3, ScalingConfig.reward_scaled(mdp.discount), tol=1e-11)
        rep = tau_limit_probe(mdp, p["taus"], cfg, dataset=ds, threshold=p["threshold"])
        rep.params = {"mdp": k, "n": n, "errors": "/".join(_fmt(e) for e in rep.details["errors"])}
        rows.append(rep)
    return rows


def suite_fixed_point_bound(ss, p) -> list[ProbeReport]:
    """Fixed-point entries stay below c_r(R_max - R_min)/(1 - c_k); RS gives <= 1."""
    rng = _rng(ss)
    rows = []
    for k in range(p["n_mdps"]):
        mdp = random_mdp(rng)
        pol = Policy.random(mdp.n_states, mdp.n_actions, rng)
        sc = ScalingConfig(float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.0, 0.95)))
        g = scaled_fixed_point(mdp, pol, sc, tol=1e-12).g
        excess = float(g.max() - fixed_point_bound(mdp, sc))
        rows.append(ProbeReport("fixed_point_bound", {"mdp": k, "scaling": "random"}, max(excess, 0.0),
                                excess <= 1e-9))
        norm = normalize_rewards(mdp)
        g_rs = scaled_fixed_point(norm, pol, ScalingConfig.reward_scaled(mdp.discount), tol=1e-12).g
        excess_rs = float(g_rs.max() - 1.0)
        rows.append(ProbeReport("fixed_point_bound", {"mdp": k, "scaling": "reward_scaled"},
                                max(excess_rs, 0.0), excess_rs <= 1e-9))
    return rows


def suite_residual_identity(ss, p) -> list[ProbeReport]:
    rng = _rng(ss)
    rows = []
    for k in range(p["n_draws"]):
        mdp = random_mdp(rng)
        pol = Policy.random(mdp.n_states, mdp.n_actions, rng)
        sc = ScalingConfig(float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.3, 0.95)))
        n = mdp.n_states
        g = rng.uniform(0.0, 2.0, size=(n, n))
        rep = residual_error_identity_check(0.5 * (g + g.T), mdp, pol, sc)
        worst = max(rep["identity_violation"], rep["max_error"] - rep["error_bound"], 0.0)
        rows.append(ProbeReport("residual_identity", {"draw": k, "n": n}, worst, rep["passed"]))
    return rows


def suite_prop4(ss, p) -> list[ProbeReport]:
    """Zero dataset residual together with error C at the constructed pair."""
    rng = _rng(ss)
    rows = []
    for k in range(p["n_cases"]):
        n = int(rng.integers(6, 13))
        mdp = make_garnet(n, 2, 1, 0.0, int(rng.integers(2 ** 31)), discount=0.99)
        pol = Policy.deterministic(rng.integers(2, size=n), 2)
        full = collect(mdp, pol, 40 * n, 10, int(rng.integers(2 ** 31)))
        sc = ScalingConfig(1.0, mdp.discount)
        g_true = scaled_fixed_point(mdp, pol, sc, tol=1e-13)
        rep = None
        # hide the outgoing tuples of a few states so they become unseen next states;
        # redraw when none of the hidden states is reached from the remaining data
        for _ in range(p["max_draws"]):
            hidden = rng.choice(n, size=max(1, n // 4), replace=False)
            ds = full.subset(~np.isin(full.s, hidden))
            try:
                rep = prop4_check(ds, sc, p["C"], g_true)
                break
            except ValueError:
                continue
        if rep is None:
            rows.append(ProbeReport("prop4", {"case": k, "n": n, "status": "no frontier pair"},
                                    float("nan"), False))
            continue
        worst = max(rep["max_residual"], abs(rep["target_error"] - p["C"]))
        ok = rep["max_residual"] == 0.0 and abs(rep["target_error"] - p["C"]) <= 1e-9
        rows.append(ProbeReport("prop4", {"case": k, "n": n, "pair": "%d-%d" % rep["target"],
                                          "error": _fmt(rep["target_error"])}, worst, ok))
    return rows


def suite_appendix_i(ss, p) -> list[ProbeReport]:
    """Small residual, large error when next states are missing from the data."""
    rng = _rng(ss)
    rows = []
    for k in range(p["n_seeds"]):
        n = p["n_states"]
        mdp = make_garnet(n, 2, 1, 0.0, int(rng.integers(2 ** 31)), discount=0.9)
        pol = Policy.deterministic(rng.integers(2, size=n), 2)
        reps = appendix_i_experiment(mdp, pol, p["sizes"], DropRandomNextStates(p["drop_fraction"]),
                                     int(rng.integers(2 ** 31)), threshold=p["threshold"])
        for rep in reps:
            ok = rep.converged and rep.ratio >= p["min_ratio"]
            rows.append(ProbeReport("appendix_i", {
                "seed": k, "tuples": rep.n_transitions, "residual": _fmt(rep.mean_sq_residual),
                "error": _fmt(rep.mean_sq_error), "ratio": _fmt(rep.ratio)},
                max(p["min_ratio"] - rep.ratio, 0.0), ok))
    return rows


def _learned_measurement(mdp: TabularMdp, pol: Policy, sc: ScalingConfig, seed: int, steps: int):
    ds = minmax_normalize(collect(mdp, pol, 1000, 50, seed))
    cfg = TrainConfig(steps=steps, scaling=sc, seed=seed, embedding_dim=mdp.n_states,
                      log_every=max(steps, 1))
    return distance_table(train(ds, cfg).encoder, np.arange(mdp.n_states)).g


def suite_value_bound(ss, p) -> list[ProbeReport]:
    """Aggregated values stay within (2ω + Δ̂)/(c_r(1 - γ)) of the originals."""
    rng = _rng(ss)
    rows = []
    for k in range(p["n_seeds"]):
        n = 8
        mdp = normalize_rewards(make_garnet(n, 2, 3, 0.2, int(rng.integers(2 ** 31)), discount=0.9))
        pol = Policy.random(n, 2, rng)
        sc = ScalingConfig.reward_scaled(mdp.discount)
        g_fixed = scaled_fixed_point(mdp, pol, sc, tol=1e-12).g
        learned = _learned_measurement(mdp, pol, sc, int(rng.integers(2 ** 31)), p["train_steps"])
        for source, g_phi in (("exact", g_fixed), ("learned", learned)):
            for omega in p["omegas"]:
                agg = aggregate(g_phi, omega, mdp, pol)
                rep = value_bound_check(mdp, pol, agg, g_fixed, g_phi, sc)
                rows.append(ProbeReport("value_bound", {
                    "seed": k, "measurement": source, "omega": omega,
                    "clusters": rep["n_clusters"], "gap": _fmt(rep["max_gap"]),
                    "bound": _fmt(rep["bound"])},
                    max(rep["max_gap"] - rep["bound"], 0.0), rep["passed"]))
    return rows


def rs_toy_dataset(seed: int = 0):
    """Deterministic 10-state, 2-action MDP under a deterministic behavior policy."""
    rng = np.random.default_rng(seed)
    mdp = make_garnet(10, 2, 1, 0.0, int(rng.integers(2 ** 31)), discount=0.9)
    pol = Policy.deterministic(rng.integers(2, size=10), 2)
    return minmax_normalize(collect(mdp, pol, 2000, 50, int(rng.integers(2 ** 31))))


def rs_ablation(ds, seed: int, steps: int) -> dict:
    """Train the cosine encoder with c_r = 1 and with reward scaling on the same data."""
    out = {}
    for name, sc in (("no_rs", ScalingConfig(1.0, 0.9)),
                     ("rs", ScalingConfig.reward_scaled(0.9))):
        cfg = TrainConfig(tau=0.5, steps=steps, scaling=sc, seed=seed, embedding_dim=8,
                          log_every=max(steps // 4, 1))
        res = train(ds, cfg)
        out[name] = {"mean_residual": mean_residual(res.encoder, res.target, ds, cfg),
                     "effective_dimension": res.log[-1].effective_dimension}
    return out


def suite_rs_ablation(ss, p) -> list[ProbeReport]:
    rng = _rng(ss)
    ds = rs_toy_dataset(int(rng.integers(2 ** 31)))
    rows = []
    dims_ok = 0
    for k in range(p["n_seeds"]):
        res = rs_ablation(ds, int(rng.integers(2 ** 31)), p["steps"])
        no_rs, rs = res["no_rs"], res["rs"]
        ok = no_rs["mean_residual"] > p["min_no_rs_residual"] and \
            abs(rs["mean_residual"]) < p["max_rs_residual"]
        dims_ok += rs["effective_dimension"] >= no_rs["effective_dimension"]
        worst = max(p["min_no_rs_residual"] - no_rs["mean_residual"],
                    abs(rs["mean_residual"]) - p["max_rs_residual"], 0.0)
        rows.append(ProbeReport("rs_ablation", {
            "seed": k, "residual_no_rs": _fmt(no_rs["mean_residual"]),
            "residual_rs": _fmt(rs["mean_residual"]),
            "dim_no_rs": no_rs["effective_dimension"], "dim_rs": rs["effective_dimension"]},
            worst, ok))
    need = p["dim_required"]
    rows.append(ProbeReport("rs_effective_dimension", {"seeds": p["n_seeds"], "rs_at_least_no_rs": dims_ok,
                                                       "required": need},
                            max(need - dims_ok, 0), dims_ok >= need))
    return rows


# gradients smaller than this are compared in absolute terms
GRADIENT_FLOOR = 1e-6


def gradient_check(rng: np.random.Generator, kind: DistanceKind, h: float = 1e-5) -> float:
    """Relative error of the analytic batch-loss gradient against central differences."""
    n = int(rng.integers(3, 9))
    d = int(rng.integers(2, 6))
    enc = Encoder.init(n, d, kind, seed=rng.integers(2 ** 63))
    tgt = Encoder.init(n, d, kind, seed=rng.integers(2 ** 63))
    b = int(rng.integers(2, 7))
    batch = Batch(rng.integers(n, size=b), rng.uniform(size=b), rng.integers(n, size=b),
                  rng.uniform(size=b) < 0.2)
    cfg = TrainConfig(tau=float(rng.uniform(0.05, 0.95)),
                      scaling=ScalingConfig(float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.5, 0.99))),
                      distance=kind)
    _, grads, _ = expectile_loss_batch(enc, tgt, batch, cfg)
    analytic = np.concatenate([grads[k].ravel() for k in ("w1", "b1", "w2", "b2")])
    flat = enc.flat()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        step = np.zeros_like(flat)
        step[i] = h
        up = expectile_loss_batch(enc.with_flat(flat + step), tgt, batch, cfg)[0]
        down = expectile_loss_batch(enc.with_flat(flat - step), tgt, batch, cfg)[0]
        numeric[i] = (up - down) / (2 * h)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), GRADIENT_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def suite_gradient(ss, p) -> list[ProbeReport]:
    rng = _rng(ss)
    rows = []
    for tag in ("cosine", "mico_angular"):
        errs = [gradient_check(rng, DistanceKind(tag)) for _ in range(p["n_points"])]
        worst = max(errs)
        rows.append(ProbeReport("gradient", {"distance": tag, "points": p["n_points"]},
                                worst, worst <= p["rtol"]))
    return rows


SUITES = {
    "lemma2": (suite_lemma2, {"n_mdps": 50, "atol": 1e-6}),
    "contraction": (suite_contraction, {"n_configs": 100, "pairs_per_config": 10}),
    "monotonicity": (suite_monotonicity, {"n_mdps": 50, "taus": (0.1, 0.3, 0.5, 0.7, 0.9)}),
    "tau-limit": (suite_tau_limit, {"n_mdps": 20, "taus": (0.9, 0.99, 0.999),
                                    "threshold": 0.05, "n_transitions": 2000}),
    "fixed-point-bound": (suite_fixed_point_bound, {"n_mdps": 50}),
    "residual-identity": (suite_residual_identity, {"n_draws": 100}),
    "prop4": (suite_prop4, {"n_cases": 10, "C": 1.0, "max_draws": 20}),
    "appendix-i": (suite_appendix_i, {"n_seeds": 3, "n_states": 20, "sizes": (500, 2000),
                                      "drop_fraction": 0.3, "threshold": 1e-4, "min_ratio": 10.0}),
    "value-bound": (suite_value_bound, {"n_seeds": 20, "omegas": (0.05, 0.1, 0.2),
                                        "train_steps": 300}),
    "rs-ablation": (suite_rs_ablation, {"n_seeds": 5, "steps": 2000, "min_no_rs_residual": 0.05,
                                        "max_rs_residual": 0.01, "dim_required": 4}),
    "gradient": (suite_gradient, {"n_points": 100, "rtol": 1e-4}),
}

DEFAULT_SUITES = tuple(SUITES)


def run_suite(name: str, seed: int, overrides: dict | None = None) -> list[ProbeReport]:
    """Run one suite; a convergence failure becomes a failing row tagged ``convergence``."""
    fn, defaults = SUITES[name]
    params = dict(defaults)
    params.update(overrides or {})
    try:
        return fn(suite_seed(seed, name), params)
    except ConvergenceError as exc:
        return [ProbeReport(name.replace("-", "_"), {"status": "convergence", "error": str(exc)},
                            float("nan"), False, {"convergence": True})]


def run_suites(names, seed: int, overrides: dict | None = None, jobs: int = 1):
    """All named suites, never short-circuiting; results in the order of ``names``."""
    overrides = overrides or {}
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown suites: {', '.join(unknown)}")
    args = [(n, seed, overrides.get(n, {})) for n in names]
    if jobs <= 1:
        return [run_suite(*a) for a in args]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda a: run_suite(*a), args))


def rows_to_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["probe", "params", "max_violation", "result"])
    for rows in results:
        for rep in rows:
            w.writerow(rep.csv_row())
    return buf.getvalue()


__all__ = [
    "DEFAULT_SUITES",
    "SUITES",
    "gradient_check",
    "random_mdp",
    "rows_to_csv",
    "rs_ablation",
    "rs_toy_dataset",
    "run_suite",
    "run_suites",
    "suite_seed",
]
