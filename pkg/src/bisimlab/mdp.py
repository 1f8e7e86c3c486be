"""Finite MDPs, policies, exact evaluation and test-MDP generators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.csgraph import connected_components

STOCHASTIC_ATOL = 1e-12
RESTART_WEIGHT = 1e-3


def _frozen(array, dtype=float):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with transition tensor ``transition[s, a, s']``.

    Rewards are indexed ``reward[s, a]``. Arrays are copied and made
    read-only on construction, so instances can be shared freely.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float

    def __post_init__(self):
        t = _frozen(self.transition)
        r = _frozen(self.reward)
        object.__setattr__(self, "transition", t)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))
        validate_mdp(self)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def r_min(self) -> float:
        return float(self.reward.min())

    @property
    def r_max(self) -> float:
        return float(self.reward.max())

    def is_deterministic(self) -> bool:
        return bool(np.all(self.transition.max(axis=2) == 1.0))

    def with_rewards(self, reward) -> "TabularMdp":
        return TabularMdp(self.transition, reward, self.discount)

    def __eq__(self, other):
        if not isinstance(other, TabularMdp):
            return NotImplemented
        return (self.discount == other.discount
                and np.array_equal(self.transition, other.transition)
                and np.array_equal(self.reward, other.reward))


def validate_mdp(mdp: TabularMdp) -> None:
    t, r = mdp.transition, mdp.reward
    if t.ndim != 3 or t.shape[0] != t.shape[2] or t.shape[0] < 1 or t.shape[1] < 1:
        raise ValueError(f"transition must have shape (S, A, S), got {t.shape}")
    if r.shape != t.shape[:2]:
        raise ValueError(f"reward shape {r.shape} does not match transition {t.shape[:2]}")
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        raise ValueError("transition probabilities must be finite and nonnegative")
    sums = t.sum(axis=2)
    if np.max(np.abs(sums - 1.0)) > STOCHASTIC_ATOL:
        s, a = np.unravel_index(np.argmax(np.abs(sums - 1.0)), sums.shape)
        raise ValueError(f"transition row ({s}, {a}) sums to {sums[s, a]!r}, not 1")
    if not np.all(np.isfinite(r)):
        raise ValueError("rewards must be finite")
    if not 0.0 <= mdp.discount < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {mdp.discount}")


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-state action distribution ``probs[s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError(f"policy table must be 2-D, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError("policy probabilities must be finite and nonnegative")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > STOCHASTIC_ATOL:
            raise ValueError("policy rows must sum to 1")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions: Sequence[int], n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator,
               min_prob: float = 0.0) -> "Policy":
        """Dirichlet(1) rows, mixed with uniform so every entry is >= ``min_prob``."""
        if min_prob * n_actions > 1.0:
            raise ValueError("min_prob too large for the number of actions")
        raw = rng.dirichlet(np.ones(n_actions), size=n_states)
        probs = min_prob + (1.0 - min_prob * n_actions) * raw
        probs /= probs.sum(axis=1, keepdims=True)
        return cls(probs)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def support(self) -> np.ndarray:
        return self.probs > 0


@dataclass(frozen=True)
class StateDistribution:
    mu: np.ndarray
    regularized: bool = False
    restart_weight: float = 0.0
    iterations: int = 0


def _check_pair(mdp: TabularMdp, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})")


def policy_rewards(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """r^π[s] = Σ_a π(a|s) r[s, a]."""
    _check_pair(mdp, policy)
    return np.einsum("sa,sa->s", policy.probs, mdp.reward)


def policy_transitions(mdp: TabularMdp, policy: Policy) -> np.ndarray:
    """P^π[s, s'] = Σ_a π(a|s) T[s, a, s']."""
    _check_pair(mdp, policy)
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def policy_evaluation(mdp: TabularMdp, policy: Policy, tol: float = 1e-10,
                      init=None, max_iter: int = 1_000_000) -> np.ndarray:
    """Evaluate V^π by synchronous value iteration.

    Stops once the sup-norm Bellman residual drops to ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = policy_rewards(mdp, policy)
    p = policy_transitions(mdp, policy)
    v = np.zeros(mdp.n_states) if init is None else np.array(init, dtype=float)
    for _ in range(max_iter):
        v_new = r + mdp.discount * (p @ v)
        if np.max(np.abs(v_new - v)) <= tol:
            return v_new
        v = v_new
    raise RuntimeError("policy evaluation did not converge")


def q_evaluation(mdp: TabularMdp, policy: Policy, tol: float = 1e-10) -> np.ndarray:
    """Q^π[s, a] consistent with :func:`policy_evaluation`."""
    v = policy_evaluation(mdp, policy, tol * (1 - mdp.discount) if mdp.discount else tol)
    return mdp.reward + mdp.discount * np.einsum("sat,t->sa", mdp.transition, v)


def greedy_policy(q: np.ndarray) -> Policy:
    return Policy.deterministic(np.argmax(q, axis=1), q.shape[1])


def policy_iteration(mdp: TabularMdp, tol: float = 1e-12, max_iter: int = 1000) -> Policy:
    """Optimal deterministic policy (ties broken toward the lowest action index)."""
    policy = Policy.uniform(mdp.n_states, mdp.n_actions)
    for _ in range(max_iter):
        q = q_evaluation(mdp, policy, tol)
        best = q.max(axis=1, keepdims=True)
        # keep the current action when it is within tolerance of the best
        current = np.argmax(policy.probs, axis=1)
        keep = q[np.arange(mdp.n_states), current] >= best[:, 0] - 1e-9
        actions = np.where(keep & (policy.probs.max(axis=1) == 1.0), current, np.argmax(q, axis=1))
        new = Policy.deterministic(actions, mdp.n_actions)
        if np.array_equal(new.probs, policy.probs):
            return new
        policy = new
    return policy


def is_irreducible(p: np.ndarray) -> bool:
    n, _ = connected_components(p > 0, directed=True, connection="strong")
    return n == 1


def stationary_distribution(mdp: TabularMdp, policy: Policy, tol: float = 1e-12,
                            max_iter: int = 10_000_000) -> StateDistribution:
    """Stationary distribution of the chain P^π.

    Chains that are not irreducible are first mixed with a uniform restart
    of weight ``RESTART_WEIGHT``; the result records this. Power iteration
    runs on the lazy chain (I + P) / 2, which has the same fixed points and
    no periodicity.
    """
    p = policy_transitions(mdp, policy)
    n = mdp.n_states
    regularized = not is_irreducible(p)
    weight = RESTART_WEIGHT if regularized else 0.0
    if regularized:
        p = (1.0 - weight) * p + weight / n
    lazy = 0.5 * (np.eye(n) + p)
    mu = np.full(n, 1.0 / n)
    for it in range(1, max_iter + 1):
        nxt = mu @ lazy
        nxt /= nxt.sum()
        if np.abs(nxt @ p - nxt).sum() <= tol:
            return StateDistribution(nxt, regularized, weight, it)
        mu = nxt
    raise RuntimeError("stationary distribution did not converge")


def discounted_occupancy(transition: np.ndarray, start: np.ndarray, discount: float) -> np.ndarray:
    """(1-γ) Σ_t γ^t start P^t for a (sub-)stochastic matrix P."""
    n = transition.shape[0]
    return (1.0 - discount) * np.linalg.solve((np.eye(n) - discount * transition).T, start)


def make_garnet(n_states: int, n_actions: int, branching: int, reward_sparsity: float,
                seed, discount: float = 0.9) -> TabularMdp:
    """Random MDP: each (s, a) reaches ``branching`` distinct successors.

    Successor weights are Dirichlet(1); rewards are U[0, 1] and each one is
    zeroed independently with probability ``reward_sparsity``.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be positive")
    if not 1 <= branching <= n_states:
        raise ValueError(f"branching must lie in [1, n_states], got {branching}")
    if not 0.0 <= reward_sparsity <= 1.0:
        raise ValueError("reward_sparsity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    transition = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            transition[s, a, succ] = rng.dirichlet(np.ones(branching))
    # renormalize so rows are stochastic to the last ulp
    transition /= transition.sum(axis=2, keepdims=True)
    reward = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    reward[rng.uniform(size=reward.shape) < reward_sparsity] = 0.0
    return TabularMdp(transition, reward, discount)


def _entering_rewards(transition, state_rewards, terminals):
    reward = np.einsum("sat,t->sa", transition, state_rewards)
    reward[list(terminals)] = 0.0
    return reward


def _apply_slip(intended: np.ndarray, slip: float) -> np.ndarray:
    # intended[s, a] = destination; slip mass spreads over the other actions' moves
    n, n_actions = intended.shape
    transition = np.zeros((n, n_actions, n))
    for s in range(n):
        for a in range(n_actions):
            transition[s, a, intended[s, a]] += 1.0 - slip
            if n_actions > 1:
                for b in range(n_actions):
                    if b != a:
                        transition[s, a, intended[s, b]] += slip / (n_actions - 1)
            else:
                transition[s, a, intended[s, a]] += slip
    return transition


def make_chain(n_states: int, rewards: Mapping[int, float] | Sequence[float] | None = None,
               slip: float = 0.0, discount: float = 0.9,
               terminals: Sequence[int] = ()) -> TabularMdp:
    """Linear chain with actions 0 = left, 1 = right (walls at both ends).

    ``rewards`` gives a per-state reward paid on entering that state.
    Terminal states are absorbing with zero reward.
    """
    intended = np.empty((n_states, 2), dtype=int)
    for s in range(n_states):
        intended[s] = [max(s - 1, 0), min(s + 1, n_states - 1)]
    for t in terminals:
        intended[t] = t
    transition = _apply_slip(intended, slip)
    state_r = _state_reward_vector(n_states, rewards)
    return TabularMdp(transition, _entering_rewards(transition, state_r, terminals), discount)


def _state_reward_vector(n, rewards):
    out = np.zeros(n)
    if rewards is None:
        return out
    if isinstance(rewards, Mapping):
        for k, v in rewards.items():
            out[int(k)] = v
    else:
        out[:] = np.asarray(rewards, dtype=float)
    return out


GRID_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


def grid_index(row: int, col: int, cols: int) -> int:
    """Row-major state index of grid cell (row, col)."""
    return row * cols + col


def grid_coords(index: int, cols: int) -> tuple[int, int]:
    return divmod(index, cols)


def make_gridworld(dims: tuple[int, int], rewards: Mapping[tuple[int, int], float] | None = None,
                   slip: float = 0.0, discount: float = 0.9,
                   terminals: Sequence[tuple[int, int]] = ()) -> TabularMdp:
    """Grid MDP with actions up/right/down/left and row-major state indices.

    ``rewards`` maps cells to the reward paid on entering them; moves into a
    wall leave the agent in place. Terminal cells are absorbing, zero reward.
    """
    rows, cols = dims
    n = rows * cols
    term = {grid_index(r, c, cols) for r, c in terminals}
    intended = np.empty((n, 4), dtype=int)
    for s in range(n):
        r, c = grid_coords(s, cols)
        for a, (dr, dc) in enumerate(GRID_MOVES):
            rr, cc = r + dr, c + dc
            inside = 0 <= rr < rows and 0 <= cc < cols
            intended[s, a] = grid_index(rr, cc, cols) if inside and s not in term else s
    transition = _apply_slip(intended, slip)
    state_r = np.zeros(n)
    for (r, c), v in (rewards or {}).items():
        state_r[grid_index(r, c, cols)] = v
    return TabularMdp(transition, _entering_rewards(transition, state_r, term), discount)


def normalize_rewards(mdp: TabularMdp) -> TabularMdp:
    """Min-max map rewards into [0, 1]; constant rewards become zero."""
    lo, hi = mdp.r_min, mdp.r_max
    if hi == lo:
        return mdp.with_rewards(np.zeros_like(mdp.reward))
    return mdp.with_rewards((mdp.reward - lo) / (hi - lo))


# -- text serialization -------------------------------------------------------

MDP_HEADER = "# bisimlab-mdp v1"


def dumps_mdp(mdp: TabularMdp) -> str:
    """Line format: header, ``n_states n_actions discount``, then per (s, a)
    ``s a reward succ:prob succ:prob ...``. Floats use shortest round-trip repr."""
    lines = [MDP_HEADER, f"{mdp.n_states} {mdp.n_actions} {float(mdp.discount)!r}"]
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            row = mdp.transition[s, a]
            succ = " ".join(f"{t}:{float(row[t])!r}" for t in np.flatnonzero(row))
            lines.append(f"{s} {a} {float(mdp.reward[s, a])!r} {succ}")
    return "\n".join(lines) + "\n"


def loads_mdp(text: str) -> TabularMdp:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError("empty MDP file")
    head = lines[0].split()
    n_states, n_actions, discount = int(head[0]), int(head[1]), float(head[2])
    transition = np.zeros((n_states, n_actions, n_states))
    reward = np.zeros((n_states, n_actions))
    seen = np.zeros((n_states, n_actions), dtype=bool)
    for ln in lines[1:]:
        parts = ln.split()
        s, a = int(parts[0]), int(parts[1])
        reward[s, a] = float(parts[2])
        for item in parts[3:]:
            t, p = item.split(":")
            transition[s, a, int(t)] = float(p)
        seen[s, a] = True
    if not seen.all():
        raise ValueError("MDP file is missing (state, action) rows")
    return TabularMdp(transition, reward, discount)


def save_mdp(mdp: TabularMdp, path) -> None:
    with open(path, "w") as f:
        f.write(dumps_mdp(mdp))


def load_mdp(path) -> TabularMdp:
    with open(path) as f:
        return loads_mdp(f.read())
