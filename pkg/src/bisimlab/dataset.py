"""Offline datasets: collection under a behavior policy, removal, reward scaling."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from .mdp import Policy, TabularMdp


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    done: bool


class SupportSet(NamedTuple):
    states: frozenset
    state_actions: frozenset
    next_states: frozenset


def _ro(values, dtype):
    out = np.array(values, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Ordered transition tuples stored column-wise.

    ``reward_stats`` always holds (R_min, R_max) of the *raw* rewards, so a
    normalized dataset can be mapped back with :func:`denormalize`.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    n_states: int
    n_actions: int
    source_mdp_id: str = "unknown"
    reward_stats: tuple[float, float] | None = None
    normalized: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, dtype in (("s", np.int64), ("a", np.int64), ("r", float),
                            ("s_next", np.int64), ("done", bool)):
            object.__setattr__(self, name, _ro(getattr(self, name), dtype))
        n = len(self.s)
        if any(len(getattr(self, k)) != n for k in ("a", "r", "s_next", "done")):
            raise ValueError("transition columns have different lengths")
        if n:
            if self.s.min() < 0 or self.s.max() >= self.n_states:
                raise ValueError("state index out of range")
            if self.s_next.min() < 0 or self.s_next.max() >= self.n_states:
                raise ValueError("next-state index out of range")
            if self.a.min() < 0 or self.a.max() >= self.n_actions:
                raise ValueError("action index out of range")
            if not np.all(np.isfinite(self.r)):
                raise ValueError("rewards must be finite")
        if self.reward_stats is None and n:
            object.__setattr__(self, "reward_stats", (float(self.r.min()), float(self.r.max())))

    def __len__(self) -> int:
        return len(self.s)

    def __getitem__(self, i) -> Transition:
        return Transition(int(self.s[i]), int(self.a[i]), float(self.r[i]),
                          int(self.s_next[i]), bool(self.done[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __eq__(self, other):
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        return (self.n_states == other.n_states and self.n_actions == other.n_actions
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("s", "a", "r", "s_next", "done")))

    def support(self) -> SupportSet:
        return SupportSet(
            frozenset(int(x) for x in self.s),
            frozenset(zip(self.s.tolist(), self.a.tolist())),
            frozenset(int(x) for x in self.s_next),
        )

    def subset(self, keep: np.ndarray, **meta) -> "OfflineDataset":
        md = dict(self.metadata)
        md.update(meta)
        return replace(self, s=self.s[keep], a=self.a[keep], r=self.r[keep],
                       s_next=self.s_next[keep], done=self.done[keep], metadata=md)

    def frontier_states(self) -> set[int]:
        """Non-terminal next states that never occur as a current state."""
        present = set(self.s.tolist())
        return {int(t) for t, d in zip(self.s_next, self.done) if not d and int(t) not in present}


def collect(mdp: TabularMdp, behavior: Policy, n: int, horizon: int, seed,
            initial=None, terminals: Sequence[int] = (), source_mdp_id: str = "mdp") -> OfflineDataset:
    """Roll out ``behavior`` episodically until ``n`` transitions are gathered.

    Episodes start from ``initial`` (uniform over states by default) and end
    on reaching a terminal state (``done=True``) or after ``horizon`` steps
    (truncation, ``done=False``).
    """
    if n < 1 or horizon < 1:
        raise ValueError("n and horizon must be positive")
    rng = np.random.default_rng(seed)
    n_states = mdp.n_states
    init = np.full(n_states, 1.0 / n_states) if initial is None else np.asarray(initial, float)
    terminal = np.zeros(n_states, dtype=bool)
    terminal[list(terminals)] = True
    cum_pi = np.cumsum(behavior.probs, axis=1)
    cum_t = np.cumsum(mdp.transition, axis=2)
    cols = np.empty((5, n))
    i = 0
    while i < n:
        s = int(rng.choice(n_states, p=init))
        for _ in range(horizon):
            a = min(int(np.searchsorted(cum_pi[s], rng.uniform(), side="right")), mdp.n_actions - 1)
            t = min(int(np.searchsorted(cum_t[s, a], rng.uniform(), side="right")), n_states - 1)
            done = bool(terminal[t])
            cols[:, i] = (s, a, mdp.reward[s, a], t, done)
            i += 1
            if i == n or done:
                break
            s = t
    return OfflineDataset(cols[0], cols[1], cols[2], cols[3], cols[4].astype(bool),
                          n_states, mdp.n_actions, source_mdp_id)


@dataclass(frozen=True)
class DropFraction:
    fraction: float


@dataclass(frozen=True)
class DropNextStates:
    states: frozenset

    def __init__(self, states):
        object.__setattr__(self, "states", frozenset(int(s) for s in states))


@dataclass(frozen=True)
class DropRandomNextStates:
    """Pick ``round(fraction * n_states)`` states at random; drop tuples leading to them."""

    fraction: float


def remove_transitions(ds: OfflineDataset, rule, seed=None) -> OfflineDataset:
    """Drop tuples per ``rule``; surviving tuples keep their order and values.

    ``metadata['removed_next_states']`` lists states that occurred as next
    states before removal but no longer do.
    """
    n = len(ds)
    keep = np.ones(n, dtype=bool)
    if isinstance(rule, DropFraction):
        if not 0.0 <= rule.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        k = int(round(rule.fraction * n))
        rng = np.random.default_rng(seed)
        keep[rng.choice(n, size=k, replace=False)] = False
    elif isinstance(rule, DropNextStates):
        keep = ~np.isin(ds.s_next, sorted(rule.states))
    elif isinstance(rule, DropRandomNextStates):
        if not 0.0 <= rule.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        rng = np.random.default_rng(seed)
        chosen = rng.choice(ds.n_states, size=int(round(rule.fraction * ds.n_states)), replace=False)
        keep = ~np.isin(ds.s_next, chosen)
    else:
        raise TypeError(f"unknown removal rule {rule!r}")
    if not keep.any():
        raise ValueError("removal would leave the dataset empty")
    before = set(ds.s_next.tolist())
    after = set(ds.s_next[keep].tolist())
    return ds.subset(keep, removed_next_states=sorted(before - after),
                     removal_rule=repr(rule))


def minmax_normalize(ds: OfflineDataset) -> OfflineDataset:
    """r̄ = (r - r_min) / (r_max - r_min); constant rewards map to 0."""
    if len(ds) == 0:
        raise ValueError("cannot normalize an empty dataset")
    lo, hi = float(ds.r.min()), float(ds.r.max())
    r = np.zeros_like(ds.r) if hi == lo else (ds.r - lo) / (hi - lo)
    return replace(ds, r=r, reward_stats=(lo, hi), normalized=True)


def denormalize(ds: OfflineDataset) -> OfflineDataset:
    if not ds.normalized:
        return ds
    lo, hi = ds.reward_stats
    return replace(ds, r=lo + ds.r * (hi - lo), normalized=False)


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    """Maximum-likelihood model of a dataset.

    Rows of ``transition`` for absent (s, a) pairs are zero, and rows with
    terminal tuples are sub-stochastic (the missing mass is termination),
    so downstream operators see zero continuation in both cases.
    """

    transition: np.ndarray
    reward: np.ndarray
    policy: np.ndarray
    counts: np.ndarray
    discount: float | None = None

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def sa_mask(self) -> np.ndarray:
        return self.counts > 0

    @property
    def state_mask(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0

    def check_support(self, s: int, a: int) -> None:
        if self.counts[s, a] == 0:
            raise OutOfSupportError(s, a)

    def to_mdp(self, discount: float) -> tuple[TabularMdp, Policy]:
        """Complete the model into a valid MDP.

        Requires every (s, a) to be present and no terminal tuples.
        """
        if not self.sa_mask.all():
            missing = np.argwhere(~self.sa_mask)[0]
            raise OutOfSupportError(int(missing[0]), int(missing[1]))
        if not np.allclose(self.transition.sum(axis=2), 1.0):
            raise ValueError("model has terminal mass and is not a complete MDP")
        t = self.transition / self.transition.sum(axis=2, keepdims=True)
        return TabularMdp(t, self.reward, discount), Policy(self.policy)


class OutOfSupportError(KeyError):
    def __init__(self, s, a):
        super().__init__(f"(state={s}, action={a}) is not in the dataset support")
        self.state, self.action = s, a


def empirical_mdp(ds: OfflineDataset) -> EmpiricalModel:
    n, m = ds.n_states, ds.n_actions
    counts = np.zeros((n, m))
    np.add.at(counts, (ds.s, ds.a), 1.0)
    nxt = np.zeros((n, m, n))
    live = ~ds.done
    np.add.at(nxt, (ds.s[live], ds.a[live], ds.s_next[live]), 1.0)
    rsum = np.zeros((n, m))
    np.add.at(rsum, (ds.s, ds.a), ds.r)
    safe = np.where(counts > 0, counts, 1.0)
    transition = nxt / safe[:, :, None]
    reward = rsum / safe
    state_counts = counts.sum(axis=1, keepdims=True)
    policy = counts / np.where(state_counts > 0, state_counts, 1.0)
    for arr in (transition, reward, policy, counts):
        arr.setflags(write=False)
    return EmpiricalModel(transition, reward, policy, counts)


# -- text serialization -------------------------------------------------------

DATASET_HEADER = "# bisimlab-dataset v1"


def dumps_dataset(ds: OfflineDataset) -> str:
    lo, hi = ds.reward_stats if ds.reward_stats else (0.0, 0.0)
    lines = [
        DATASET_HEADER,
        f"# source {ds.source_mdp_id}",
        f"# shape {ds.n_states} {ds.n_actions}",
        f"# count {len(ds)}",
        f"# reward_stats {lo!r} {hi!r}",
        f"# normalized {int(ds.normalized)}",
    ]
    for t in ds:
        lines.append(f"{t.s} {t.a} {t.r!r} {t.s_next} {int(t.done)}")
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> OfflineDataset:
    header = {}
    rows = []
    for ln in text.splitlines():
        if not ln.strip():
            continue
        if ln.startswith("#"):
            parts = ln[1:].split()
            if len(parts) >= 2:
                header[parts[0]] = parts[1:]
            continue
        rows.append(ln.split())
    n_states, n_actions = (int(x) for x in header["shape"])
    if int(header["count"][0]) != len(rows):
        raise ValueError("record count does not match header")
    cols = list(zip(*rows)) if rows else [[]] * 5
    return OfflineDataset(
        [int(x) for x in cols[0]], [int(x) for x in cols[1]], [float(x) for x in cols[2]],
        [int(x) for x in cols[3]], [x == "1" for x in cols[4]], n_states, n_actions,
        header.get("source", ["unknown"])[0],
        tuple(float(x) for x in header["reward_stats"]),
        header.get("normalized", ["0"])[0] == "1",
    )


def save_dataset(ds: OfflineDataset, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_dataset(ds))


def load_dataset(path) -> OfflineDataset:
    with open(path) as f:
        return loads_dataset(f.read())
