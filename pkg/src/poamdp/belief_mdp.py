"""The equivalent MDP over (state, observer belief) pairs."""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
import scipy.sparse as sp

from .problem import (
    Belief,
    ObserverModel,
    PoOamdp,
    criterion_reward,
    filter_from_joint,
    predicted_joint,
    target_belief,
)

DEFAULT_NODE_CAP = 2_000_000


class NodeCapExceeded(RuntimeError):
    pass


class InfoState:
    """A (true state, observer state-belief) pair, hashed on its canonical key."""

    __slots__ = ("s", "b", "key")

    def __init__(self, s: int, b: Belief):
        self.s = s
        self.b = b
        self.key = (s, b.key)

    def __eq__(self, other) -> bool:
        return isinstance(other, InfoState) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return f"InfoState(s={self.s}, b={self.b!r})"


class InfoTransition(NamedTuple):
    successor: InfoState
    probability: float
    reward: float


def initial_info_state(problem: PoOamdp) -> InfoState:
    return InfoState(problem.base.initial_state, problem.initial_belief)


class BeliefMdp:
    """Successor generator with per-belief caches.

    Filtering depends only on (belief, observation), and the target belief
    only on the belief, so both are cached on canonical belief keys. One
    instance belongs to one solver or simulation run.
    """

    def __init__(self, problem: PoOamdp, model: ObserverModel, merge: bool = True):
        self.problem = problem
        self.model = model
        self.merge = merge
        self._beta: dict = {}
        self._next: dict = {}
        self._joint_key = None
        self._joint = None

    def is_terminal(self, i: InfoState) -> bool:
        return i.s in self.problem.base.terminal_states

    def beta(self, b: Belief) -> np.ndarray:
        out = self._beta.get(b.key)
        if out is None:
            out = target_belief(self.problem, self.model, b)
            self._beta[b.key] = out
        return out

    def next_belief(self, b: Belief, o: int) -> Belief:
        k = (b.key, o)
        out = self._next.get(k)
        if out is None:
            if self._joint_key != b.key:
                self._joint = predicted_joint(self.problem, self.model, b)
                self._joint_key = b.key
            out = filter_from_joint(self.problem, self._joint, o)
            self._next[k] = out
        return out

    def successors(self, i: InfoState, a: int) -> list[InfoTransition]:
        problem = self.problem
        if i.s in problem.base.terminal_states:
            return []
        beta = self.beta(i.b)
        obs = problem.observation_support[a]
        merged: dict = {}
        out: list[InfoTransition] = []
        for s2, p, _ in problem.base.transitions[i.s][a]:
            if p <= 0:
                continue
            for o, po in obs[s2]:
                b2 = self.next_belief(i.b, o)
                j = InfoState(s2, b2)
                if self.merge and j.key in merged:
                    k = merged[j.key]
                    t = out[k]
                    out[k] = InfoTransition(t.successor, t.probability + p * po, t.reward)
                    continue
                r = criterion_reward(problem, i.s, beta, a, s2, self.beta(b2))
                merged[j.key] = len(out)
                out.append(InfoTransition(j, p * po, r))
        return out


def successors(problem: PoOamdp, model: ObserverModel, i: InfoState, a: int, merge: bool = True) -> list[InfoTransition]:
    return BeliefMdp(problem, model, merge).successors(i, a)


def finite_horizon_value(
    problem: PoOamdp,
    model: ObserverModel,
    i: InfoState,
    horizon: int,
    node_cap: int = DEFAULT_NODE_CAP,
    *,
    bmdp: Optional[BeliefMdp] = None,
) -> float:
    """Exact optimal value of the problem truncated after ``horizon`` steps."""
    return horizon_values(problem, model, [i], horizon, node_cap, bmdp=bmdp)[0]


def horizon_values(problem, model, roots, horizon: int, node_cap: int = DEFAULT_NODE_CAP, *, bmdp=None) -> list[float]:
    """Truncated optimal values for several roots from one memoized expansion.

    Expands the canonical-key graph breadth-first to depth ``horizon`` from the
    roots, then runs ``horizon`` levels of Bellman backups bottom-up. A node first
    reached at depth d only ever needs horizons <= horizon - d, and those only
    read successors whose own depth leaves enough room, so values at the
    roots are exact.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    bm = bmdp or BeliefMdp(problem, model)
    gamma = problem.gamma
    index: dict = {}
    nodes: list[InfoState] = []
    for r in roots:
        if r.key not in index:
            index[r.key] = len(nodes)
            nodes.append(r)
    # edges[n] = per action list of (succ index, prob, reward); None for unexpanded / terminal.
    edges: list = [None] * len(nodes)
    frontier = list(range(len(nodes)))
    for _ in range(horizon):
        nxt = []
        for n in frontier:
            i = nodes[n]
            if bm.is_terminal(i):
                continue
            acts = []
            for a in range(problem.n_actions):
                lst = []
                for t in bm.successors(i, a):
                    k = t.successor.key
                    m = index.get(k)
                    if m is None:
                        m = len(nodes)
                        index[k] = m
                        nodes.append(t.successor)
                        edges.append(None)
                        nxt.append(m)
                        if len(nodes) > node_cap:
                            raise NodeCapExceeded(f"more than {node_cap} info states within horizon {horizon}")
                    lst.append((m, t.probability, t.reward))
                acts.append(lst)
            edges[n] = acts
        frontier = nxt
    # Vectorized backups: flatten edges into per-action arrays.
    N = len(nodes)
    A = problem.n_actions
    src, act, dst, prob, rew = [], [], [], [], []
    expanded = np.zeros(N, dtype=bool)
    for n, acts in enumerate(edges):
        if acts is None:
            continue
        expanded[n] = True
        for a, lst in enumerate(acts):
            for m, p, r in lst:
                src.append(n * A + a)
                dst.append(m)
                prob.append(p)
                rew.append(p * r)
    P = sp.csr_matrix((prob, (src, dst)), shape=(N * A, N))
    R = np.bincount(np.asarray(src, dtype=np.int64), weights=np.asarray(rew), minlength=N * A) if src else np.zeros(N * A)
    v = np.zeros(N)
    for _ in range(horizon):
        q = (R + gamma * (P @ v)).reshape(N, A)
        v = np.where(expanded, q.max(axis=1), 0.0)
    return [float(v[index[r.key]]) for r in roots]


def finite_horizon_value_recursive(problem, model, i: InfoState, horizon: int, node_cap: int = 200_000) -> float:
    """Plain tree recursion without memoization or merging; reference oracle for small instances."""
    bm = BeliefMdp(problem, model, merge=False)
    count = [0]

    def rec(node: InfoState, h: int) -> float:
        if h == 0 or bm.is_terminal(node):
            return 0.0
        count[0] += 1
        if count[0] > node_cap:
            raise NodeCapExceeded(f"more than {node_cap} expanded nodes")
        best = -np.inf
        for a in range(problem.n_actions):
            q = 0.0
            for t in bm.successors(node, a):
                q += t.probability * (t.reward + problem.gamma * rec(t.successor, h - 1))
            best = max(best, q)
        return best

    return rec(i, horizon)
