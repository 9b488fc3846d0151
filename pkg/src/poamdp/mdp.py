"""Finite MDPs with sparse successor lists, value iteration and policy evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

PROB_TOL = 1e-9
DEFAULT_MAX_SWEEPS = 100_000

Successor = tuple[int, float, float]  # (next state, probability, reward)
RewardFn = Callable[[int, int, int], float]


class DivergenceError(RuntimeError):
    """Raised when an iterative evaluation does not settle within its sweep cap."""


@dataclass(frozen=True, eq=False)
class Mdp:
    """A finite MDP.

    ``transitions[s][a]`` is a tuple of ``(s_next, prob, reward)`` triples.
    Terminal states must self-loop with probability 1 and reward 0.
    """

    n_states: int
    n_actions: int
    transitions: tuple[tuple[tuple[Successor, ...], ...], ...]
    gamma: float
    terminal_states: frozenset[int] = frozenset()
    initial_state: int = 0
    state_labels: Optional[tuple] = None
    action_labels: Optional[tuple] = None

    def __post_init__(self):
        if len(self.transitions) != self.n_states:
            raise ValueError("transitions must have one row per state")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.gamma == 1.0 and not self.terminal_states:
            raise ValueError("gamma = 1 requires a nonempty terminal set")
        if not 0 <= self.initial_state < self.n_states:
            raise ValueError("initial_state out of range")
        for s, row in enumerate(self.transitions):
            if len(row) != self.n_actions:
                raise ValueError(f"state {s}: expected {self.n_actions} actions")
            for a, succ in enumerate(row):
                total = 0.0
                for s2, p, _ in succ:
                    if not 0 <= s2 < self.n_states:
                        raise ValueError(f"({s},{a}) -> {s2}: successor out of range")
                    if p < 0:
                        raise ValueError(f"({s},{a}) -> {s2}: negative probability")
                    total += p
                if abs(total - 1.0) > PROB_TOL:
                    raise ValueError(f"({s},{a}): probabilities sum to {total}")
                if s in self.terminal_states:
                    if [(s2, r) for s2, p, r in succ if p > 0] != [(s, 0.0)]:
                        raise ValueError(f"terminal state {s} must self-loop with reward 0")

    @classmethod
    def build(
        cls,
        n_states: int,
        n_actions: int,
        successors: Callable[[int, int], Iterable[tuple[int, float]]],
        reward: RewardFn,
        gamma: float,
        terminal_states: Iterable[int] = (),
        initial_state: int = 0,
        **labels,
    ) -> "Mdp":
        """Build from a successor function and a reward function.

        Terminal rows are overwritten with the absorbing convention, so callers
        need not special-case them.
        """
        terminal = frozenset(terminal_states)
        rows = []
        for s in range(n_states):
            if s in terminal:
                rows.append(tuple(((s, 1.0, 0.0),) for _ in range(n_actions)))
                continue
            row = []
            for a in range(n_actions):
                merged: dict[int, float] = {}
                for s2, p in successors(s, a):
                    if p > 0:
                        merged[s2] = merged.get(s2, 0.0) + p
                row.append(tuple((s2, p, float(reward(s, a, s2))) for s2, p in sorted(merged.items())))
            rows.append(tuple(row))
        return cls(n_states, n_actions, tuple(rows), gamma, terminal, initial_state, **labels)

    def with_rewards(self, reward: RewardFn) -> "Mdp":
        """Same dynamics, rewards replaced (terminal rows stay at 0)."""
        rows = tuple(
            tuple(
                tuple((s2, p, 0.0 if s in self.terminal_states else float(reward(s, a, s2))) for s2, p, _ in succ)
                for a, succ in enumerate(row)
            )
            for s, row in enumerate(self.transitions)
        )
        return Mdp(self.n_states, self.n_actions, rows, self.gamma, self.terminal_states,
                   self.initial_state, self.state_labels, self.action_labels)

    def reward(self, s: int, a: int, s2: int) -> float:
        for t, _, r in self.transitions[s][a]:
            if t == s2:
                return r
        return 0.0

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return mask

    @cached_property
    def _matrices(self) -> tuple[sp.csr_matrix, np.ndarray]:
        # row (s * A + a) of P holds T(s, a, .); r holds the expected reward.
        rows, cols, vals = [], [], []
        r = np.zeros(self.n_states * self.n_actions)
        for s, row in enumerate(self.transitions):
            for a, succ in enumerate(row):
                k = s * self.n_actions + a
                for s2, p, rew in succ:
                    rows.append(k)
                    cols.append(s2)
                    vals.append(p)
                    r[k] += p * rew
        P = sp.csr_matrix((vals, (rows, cols)), shape=(self.n_states * self.n_actions, self.n_states))
        return P, r

    def expected_rewards(self, reward: Optional[RewardFn] = None) -> np.ndarray:
        if reward is None:
            return self._matrices[1]
        r = np.zeros(self.n_states * self.n_actions)
        for s, row in enumerate(self.transitions):
            if s in self.terminal_states:
                continue
            for a, succ in enumerate(row):
                r[s * self.n_actions + a] = sum(p * reward(s, a, s2) for s2, p, _ in succ)
        return r

    def reachable(self, sources: Optional[Iterable[int]] = None, policy: Optional[np.ndarray] = None) -> np.ndarray:
        """Boolean mask of states reachable from ``sources`` (default: the initial state).

        With ``policy`` given, only actions in its support are followed.
        """
        seen = np.zeros(self.n_states, dtype=bool)
        stack = [self.initial_state] if sources is None else list(sources)
        for s in stack:
            seen[s] = True
        while stack:
            s = stack.pop()
            for a, succ in enumerate(self.transitions[s]):
                if policy is not None and policy[s, a] <= 0:
                    continue
                for s2, p, _ in succ:
                    if p > 0 and not seen[s2]:
                        seen[s2] = True
                        stack.append(s2)
        return seen


@dataclass(frozen=True, eq=False)
class ValueTable:
    values: np.ndarray
    residual: float = 0.0
    sweeps: int = 0

    def __getitem__(self, s: int) -> float:
        return float(self.values[s])

    def __len__(self) -> int:
        return len(self.values)

    def error_bound(self, gamma: float) -> float:
        """Sup-norm distance to the exact fixed point implied by the last residual (gamma < 1)."""
        if gamma >= 1.0:
            return float("inf") if self.residual > 0 else 0.0
        return self.residual * gamma / (1.0 - gamma)


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    probs: np.ndarray  # shape (n_states, n_actions)

    def __post_init__(self):
        if np.any(self.probs < 0):
            raise ValueError("policy has negative entries")
        if not np.allclose(self.probs.sum(axis=1), 1.0, rtol=0, atol=PROB_TOL):
            raise ValueError("policy rows must sum to 1")

    def __getitem__(self, s: int) -> np.ndarray:
        return self.probs[s]

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all(self.probs.max(axis=1) == 1.0))

    def action(self, s: int) -> int:
        return int(np.argmax(self.probs[s]))


def _stop_threshold(epsilon: float, gamma: float) -> float:
    return epsilon if gamma >= 1.0 else epsilon * (1.0 - gamma) / gamma


def _active_mask(mdp: Mdp, all_states: bool, sources, policy=None) -> np.ndarray:
    active = np.ones(mdp.n_states, dtype=bool) if all_states else mdp.reachable(sources, policy)
    return active & ~mdp.terminal_mask


def value_iteration(
    mdp: Mdp,
    epsilon: float,
    *,
    all_states: bool = False,
    sources: Optional[Iterable[int]] = None,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    reward: Optional[RewardFn] = None,
    track_residuals: bool = False,
):
    """Synchronous value iteration.

    Stops when the sup-norm Bellman residual over the swept states drops to
    ``epsilon * (1 - gamma) / gamma`` (or ``epsilon`` when gamma = 1). Only
    states reachable from ``sources`` are swept unless ``all_states`` is set;
    other states keep value 0.

    Raises DivergenceError after ``max_sweeps`` sweeps.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    P, r = mdp._matrices
    if reward is not None:
        r = mdp.expected_rewards(reward)
    active = _active_mask(mdp, all_states, sources)
    threshold = _stop_threshold(epsilon, mdp.gamma)
    A = mdp.n_actions
    v = np.zeros(mdp.n_states)
    residuals = []
    if not active.any():
        out = ValueTable(v, 0.0, 0)
        return (out, residuals) if track_residuals else out
    for sweep in range(1, max_sweeps + 1):
        q = (r + mdp.gamma * (P @ v)).reshape(mdp.n_states, A)
        new = np.where(active, q.max(axis=1), 0.0)
        residual = float(np.max(np.abs(new - v)[active]))
        v = new
        if track_residuals:
            residuals.append(residual)
        if residual <= threshold:
            out = ValueTable(v, residual, sweep)
            return (out, residuals) if track_residuals else out
    raise DivergenceError(f"value iteration did not converge in {max_sweeps} sweeps (residual {residual:.3g})")


def q_values(mdp: Mdp, v, s: int, reward: Optional[RewardFn] = None) -> np.ndarray:
    values = v.values if isinstance(v, ValueTable) else np.asarray(v)
    q = np.zeros(mdp.n_actions)
    if s in mdp.terminal_states:
        return q
    for a, succ in enumerate(mdp.transitions[s]):
        q[a] = sum(p * ((rew if reward is None else reward(s, a, s2)) + mdp.gamma * values[s2]) for s2, p, rew in succ)
    return q


def q_table(mdp: Mdp, v, reward: Optional[RewardFn] = None) -> np.ndarray:
    """All Q-values at once, shape (n_states, n_actions); terminal rows are 0."""
    values = v.values if isinstance(v, ValueTable) else np.asarray(v)
    P, r = mdp._matrices
    if reward is not None:
        r = mdp.expected_rewards(reward)
    q = (r + mdp.gamma * (P @ values)).reshape(mdp.n_states, mdp.n_actions)
    q[mdp.terminal_mask] = 0.0
    return q


def greedy_policy(mdp: Mdp, v, reward: Optional[RewardFn] = None) -> StochasticPolicy:
    """Deterministic greedy policy; ties go to the lowest action index."""
    q = q_table(mdp, v, reward)
    probs = np.zeros_like(q)
    probs[np.arange(mdp.n_states), np.argmax(q, axis=1)] = 1.0
    return StochasticPolicy(probs)


def softmax_rows(q: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = (q - q.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_policy(mdp: Mdp, v, tau: float, reward: Optional[RewardFn] = None) -> StochasticPolicy:
    return StochasticPolicy(softmax_rows(q_table(mdp, v, reward), tau))


def policy_evaluation(
    mdp: Mdp,
    pi: StochasticPolicy,
    reward_override: Optional[RewardFn] = None,
    epsilon: float = 1e-4,
    *,
    all_states: bool = False,
    sources: Optional[Iterable[int]] = None,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
) -> ValueTable:
    """Iterative evaluation of ``pi`` with the MDP's rewards or ``reward_override``.

    Same stopping rule and divergence guard as :func:`value_iteration`.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    probs = pi.probs if isinstance(pi, StochasticPolicy) else np.asarray(pi)
    P, r = mdp._matrices
    if reward_override is not None:
        r = mdp.expected_rewards(reward_override)
    S, A = mdp.n_states, mdp.n_actions
    weights = sp.diags(probs.reshape(-1))
    # Rows of the policy-averaged chain: sum over a of pi(a|s) T(s, a, .).
    collapse = sp.kron(sp.eye(S), np.ones((1, A)), format="csr")
    P_pi = (collapse @ weights @ P).tocsr()
    r_pi = collapse @ (probs.reshape(-1) * r)
    active = _active_mask(mdp, all_states, sources, probs)
    threshold = _stop_threshold(epsilon, mdp.gamma)
    v = np.zeros(S)
    if not active.any():
        return ValueTable(v, 0.0, 0)
    for sweep in range(1, max_sweeps + 1):
        new = np.where(active, r_pi + mdp.gamma * (P_pi @ v), 0.0)
        residual = float(np.max(np.abs(new - v)[active]))
        v = new
        if residual <= threshold:
            return ValueTable(v, residual, sweep)
    raise DivergenceError(f"policy evaluation did not converge in {max_sweeps} sweeps (residual {residual:.3g})")


def cost_to_go_reward(mdp: Mdp) -> RewardFn:
    """Unit cost on every step taken from a non-terminal state."""
    terminal = mdp.terminal_states
    return lambda s, a, s2: 0.0 if s in terminal else 1.0


def is_proper(mdp: Mdp, pi, sources: Optional[Iterable[int]] = None) -> bool:
    """True iff, from every state reachable under ``pi``, a terminal state is reached w.p. 1.

    In a finite chain this holds exactly when every reachable state can reach
    the terminal set along the policy's support graph.
    """
    probs = pi.probs if isinstance(pi, StochasticPolicy) else np.asarray(pi)
    reach = mdp.reachable(sources, probs)
    # Backward search from terminals over the support graph.
    preds: list[list[int]] = [[] for _ in range(mdp.n_states)]
    for s in np.flatnonzero(reach):
        for a, succ in enumerate(mdp.transitions[s]):
            if probs[s, a] <= 0:
                continue
            for s2, p, _ in succ:
                if p > 0:
                    preds[s2].append(int(s))
    can_finish = np.zeros(mdp.n_states, dtype=bool)
    stack = [s for s in mdp.terminal_states if reach[s]]
    for s in stack:
        can_finish[s] = True
    while stack:
        s2 = stack.pop()
        for s in preds[s2]:
            if not can_finish[s]:
                can_finish[s] = True
                stack.append(s)
    return bool(np.all(can_finish[reach]))


def chain(rewards: Sequence[float], gamma: float) -> Mdp:
    """Deterministic single-action chain s0 -> s1 -> ... -> terminal."""
    n = len(rewards) + 1
    return Mdp.build(
        n, 1,
        successors=lambda s, a: [(s + 1, 1.0)],
        reward=lambda s, a, s2: rewards[s],
        gamma=gamma,
        terminal_states=[n - 1],
    )
