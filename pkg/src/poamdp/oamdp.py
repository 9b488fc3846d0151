"""Classic observer-aware MDPs and their conversion to PO-OAMDPs.

An OAMDP's observer sees states and actions and keeps a posterior over a
static agent type. The conversion pairs every state with a type, adds a
dummy type that the true system follows, and lets the observer see the
action together with the next state (not the type).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .mdp import Mdp
from .problem import Belief, FunctionCriterion, PoOamdp

DUMMY_TYPE_LABEL = "dummy"
DUMMY_REWARD = -1.0


@dataclass(frozen=True, eq=False)
class OamdpType:
    """One agent type as modeled by the observer: dynamics, observer reward, terminal set."""

    transitions: np.ndarray  # (S, A, S)
    observer_reward: np.ndarray  # (S, A, S)
    terminal_states: frozenset

    def __post_init__(self):
        T = self.transitions
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError("type transitions must have shape (S, A, S)")
        if np.any(T < 0) or not np.allclose(T.sum(axis=2), 1.0, rtol=0, atol=1e-9):
            raise ValueError("type transitions must be row-stochastic")
        if self.observer_reward.shape != T.shape:
            raise ValueError("observer reward must match the transition shape")


@dataclass(frozen=True, eq=False)
class Oamdp:
    """OAMDP with true dynamics ``transitions`` and observer type models ``types``.

    ``agent_reward(s, a, beta)`` reads the observer's current posterior ``beta``
    over types and must stay within ``[reward_min, reward_max]``.
    """

    transitions: np.ndarray  # (S, A, S)
    terminal_states: frozenset
    initial_state: int
    gamma: float
    tau: float
    types: tuple
    agent_reward: Callable
    reward_min: float
    reward_max: float
    prior: Optional[np.ndarray] = None
    type_labels: Optional[tuple] = None
    spec: Optional[dict] = None

    def __post_init__(self):
        T = self.transitions
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError("transitions must have shape (S, A, S)")
        if np.any(T < 0) or not np.allclose(T.sum(axis=2), 1.0, rtol=0, atol=1e-9):
            raise ValueError("transitions must be row-stochastic")
        if not self.types:
            raise ValueError("at least one type is required")
        for ty in self.types:
            if ty.transitions.shape != T.shape:
                raise ValueError("type transitions must match the base shape")
        if not 0 <= self.initial_state < T.shape[0]:
            raise ValueError("initial state out of range")
        if self.tau <= 0 or not 0 < self.gamma <= 1:
            raise ValueError("need tau > 0 and gamma in (0, 1]")
        if self.reward_min > self.reward_max:
            raise ValueError("empty agent reward range")
        if self.prior is not None:
            p = np.asarray(self.prior, dtype=float)
            if p.shape != (len(self.types),) or np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValueError("prior must be a distribution over types")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_types(self) -> int:
        return len(self.types)

    def type_prior(self) -> np.ndarray:
        if self.prior is None:
            return np.full(self.n_types, 1.0 / self.n_types)
        return np.asarray(self.prior, dtype=float)


def convert(oamdp: Oamdp) -> PoOamdp:
    """Equivalent PO-OAMDP over states ``(s, type)``.

    State ``theta * S + s`` pairs base state s with type theta; the last type
    block is the dummy type, which follows the true dynamics, earns -1 per
    step and carries the base terminal set. Observation ``a * S + s'`` reveals
    the action and the next base state.
    """
    S, A, K = oamdp.n_states, oamdp.n_actions, oamdp.n_types
    dummy = K
    n = S * (K + 1)

    def split(x):
        return x % S, x // S

    def model(theta):
        if theta == dummy:
            return oamdp.transitions, None, oamdp.terminal_states
        ty = oamdp.types[theta]
        return ty.transitions, ty.observer_reward, ty.terminal_states

    terminal = {theta * S + s for theta in range(K + 1) for s in model(theta)[2]}

    def successors(x, a):
        s, theta = split(x)
        T = model(theta)[0]
        return [(theta * S + s2, float(T[s, a, s2])) for s2 in range(S) if T[s, a, s2] > 0]

    def reward(x, a, x2):
        s, theta = split(x)
        R = model(theta)[1]
        return DUMMY_REWARD if R is None else float(R[s, a, x2 % S])

    labels = oamdp.type_labels or tuple(f"t{k}" for k in range(K))
    base = Mdp.build(
        n, A, successors, reward, oamdp.gamma, terminal,
        initial_state=dummy * S + oamdp.initial_state,
        state_labels=tuple(f"{s}|{(labels + (DUMMY_TYPE_LABEL,))[theta]}" for theta in range(K + 1) for s in range(S)),
    )
    obs = np.zeros((A, n, A * S))
    for a in range(A):
        for x in range(n):
            obs[a, x, a * S + x % S] = 1.0
    state_type = np.array([x // S for x in range(n)])
    targets = tuple(
        tuple(tuple(int(state_type[x]) for _ in base.transitions[x][a]) for a in range(A)) for x in range(n)
    )
    prior = oamdp.type_prior()
    b0 = Belief([k * S + oamdp.initial_state for k in range(K) if prior[k] > 0], [p for p in prior if p > 0])
    agent_reward = oamdp.agent_reward

    def adapter(x, beta, a, x2, beta2):
        # The dummy component (last entry) always carries zero mass.
        return agent_reward(x % S, a, np.asarray(beta[:K]))

    criterion = FunctionCriterion(adapter, oamdp.reward_min, oamdp.reward_max, name="oamdp", spec=oamdp.spec)
    return PoOamdp(
        base=base,
        n_targets=K + 1,
        targets=targets,
        obs_kernel=obs,
        tau=oamdp.tau,
        criterion=criterion,
        initial_belief=b0,
        state_target=state_type,
        target_labels=labels + (DUMMY_TYPE_LABEL,),
        observation_labels=tuple(f"a{a}:{s}" for a in range(A) for s in range(S)),
        name="converted",
    )


# ---------------------------------------------------------------------------
# Direct history oracle


def _type_policy(oamdp: Oamdp, theta: int, tol: float) -> np.ndarray:
    """Softmax policy of one type's observer MDP by dense value iteration.

    Terminal states of the type are absorbing with value 0, so their policy is uniform.
    """
    ty = oamdp.types[theta]
    T, R = ty.transitions, ty.observer_reward
    live = np.ones(oamdp.n_states, dtype=bool)
    live[list(ty.terminal_states)] = False
    ER = (T * R).sum(axis=2)
    v = np.zeros(oamdp.n_states)
    for _ in range(1_000_000):
        q = ER + oamdp.gamma * T @ v
        nv = np.where(live, q.max(axis=1), 0.0)
        done = np.max(np.abs(nv - v)) <= tol
        v = nv
        if done:
            break
    q = np.where(live[:, None], ER + oamdp.gamma * T @ v, 0.0)
    z = np.exp((q - q.max(axis=1, keepdims=True)) / oamdp.tau)
    return z / z.sum(axis=1, keepdims=True)


def oamdp_history_value(oamdp: Oamdp, horizon: int, *, vi_tol: float = 1e-14, node_cap: int = 1_000_000) -> float:
    """Optimal ``horizon``-step value by enumerating state-action histories.

    The observer's type posterior after each step is prior times the product
    of pi_theta(a_t | s_t) T_theta(s_t+1 | s_t, a_t) along the history.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    S, K = oamdp.n_states, oamdp.n_types
    pis = [_type_policy(oamdp, k, vi_tol) for k in range(K)]

    def likelihood(k, s, a, s2):
        ty = oamdp.types[k]
        if s in ty.terminal_states:
            return (1.0 if s2 == s else 0.0) / oamdp.n_actions
        return pis[k][s, a] * ty.transitions[s, a, s2]

    count = [0]

    def rec(s, beta, h):
        if h == 0 or s in oamdp.terminal_states:
            return 0.0
        count[0] += 1
        if count[0] > node_cap:
            raise RuntimeError(f"more than {node_cap} history nodes")
        best = -np.inf
        for a in range(oamdp.n_actions):
            r = oamdp.agent_reward(s, a, beta)
            total = 0.0
            for s2 in range(S):
                p = oamdp.transitions[s, a, s2]
                if p <= 0:
                    continue
                post = np.array([beta[k] * likelihood(k, s, a, s2) for k in range(K)])
                post = post / post.sum()
                total += p * (r + oamdp.gamma * rec(s2, post, h - 1))
            best = max(best, total)
        return best

    return rec(oamdp.initial_state, oamdp.type_prior(), horizon)


# ---------------------------------------------------------------------------
# Generators and file format


def linear_reward(weights: np.ndarray) -> Callable:
    """R_ag(s, a, beta) = weights[s, a] . beta."""
    w = np.asarray(weights, dtype=float)
    return lambda s, a, beta: float(w[s, a] @ np.asarray(beta))


def distance_reward(goal_type: int, n_types: int) -> Callable:
    """R_ag(s, a, beta) = -||beta - e_goal||_2, the legibility-style reward."""
    e = np.zeros(n_types)
    e[goal_type] = 1.0
    return lambda s, a, beta: -float(np.linalg.norm(np.asarray(beta) - e))


def random_oamdp(rng: np.random.Generator, n_states: int = 4, n_actions: int = 2, n_types: int = 2,
                 gamma: Optional[float] = None, tau: Optional[float] = None) -> Oamdp:
    """Random small OAMDP; every type shares the true support and terminal set."""
    S, A = n_states, n_actions
    term = frozenset({S - 1}) if S > 1 and rng.random() < 0.7 else frozenset()
    support = rng.random((S, A, S)) < 0.6
    for s in range(S):
        for a in range(A):
            if not support[s, a].any():
                support[s, a, rng.integers(S)] = True

    def kernel():
        w = np.where(support, rng.uniform(0.2, 1.0, (S, A, S)), 0.0)
        return w / w.sum(axis=2, keepdims=True)

    types = tuple(OamdpType(kernel(), -rng.uniform(0.0, 1.0, (S, A, S)), term) for _ in range(n_types))
    weights = -rng.uniform(0.0, 1.0, (S, A, n_types))
    gamma = float(rng.uniform(0.5, 0.95)) if gamma is None else gamma
    tau = float(rng.uniform(0.2, 1.0)) if tau is None else tau
    spec = {"kind": "linear", "weights": weights.tolist()}
    return Oamdp(kernel(), term, 0, gamma, tau, types, linear_reward(weights), float(weights.min()), 0.0, spec=spec)


def oamdp_from_json(doc) -> Oamdp:
    """Build an OAMDP from its JSON mirror.

    Keys: ``transitions`` (S x A x S), ``terminal_states``, ``initial_state``,
    ``gamma``, ``tau``, ``types`` (list of objects with ``transitions``,
    ``observer_reward``, optional ``terminal_states``), optional ``prior`` and
    ``type_labels``, and ``agent_reward`` as ``{"kind": "linear", "weights": S x A x K}``
    or ``{"kind": "distance", "goal_type": k}``.
    """
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    if not isinstance(doc, dict):
        raise ValueError("OAMDP spec must be a JSON object")
    try:
        T = np.asarray(doc["transitions"], dtype=float)
        term = frozenset(int(s) for s in doc.get("terminal_states", []))
        types = tuple(
            OamdpType(
                np.asarray(t["transitions"], dtype=float),
                np.asarray(t["observer_reward"], dtype=float),
                frozenset(int(s) for s in t.get("terminal_states", sorted(term))),
            )
            for t in doc["types"]
        )
        K = len(types)
        rew = doc["agent_reward"]
        kind = rew.get("kind")
        if kind == "linear":
            w = np.asarray(rew["weights"], dtype=float)
            if w.shape != (T.shape[0], T.shape[1], K):
                raise ValueError("linear reward weights must have shape (S, A, K)")
            fn, lo, hi = linear_reward(w), float(np.minimum(w, 0).sum(axis=2).min()), float(np.maximum(w, 0).sum(axis=2).max())
        elif kind == "distance":
            g = int(rew["goal_type"])
            if not 0 <= g < K:
                raise ValueError("goal_type out of range")
            fn, lo, hi = distance_reward(g, K), -float(np.sqrt(2.0)), 0.0
        else:
            raise ValueError(f"unknown agent reward kind {kind!r}")
        prior = doc.get("prior")
        labels = doc.get("type_labels")
        return Oamdp(
            T, term, int(doc.get("initial_state", 0)), float(doc.get("gamma", 0.99)), float(doc.get("tau", 0.01)),
            types, fn, lo, hi,
            prior=None if prior is None else np.asarray(prior, dtype=float),
            type_labels=None if labels is None else tuple(str(x) for x in labels),
            spec=dict(rew),
        )
    except KeyError as exc:
        raise ValueError(f"missing key {exc.args[0]!r}") from None
    except (TypeError, IndexError) as exc:
        raise ValueError(f"malformed OAMDP spec: {exc}") from None


def oamdp_to_json(oamdp: Oamdp) -> dict:
    if oamdp.spec is None:
        raise ValueError("agent reward has no serializable description")
    doc = {
        "transitions": oamdp.transitions.tolist(),
        "terminal_states": sorted(oamdp.terminal_states),
        "initial_state": oamdp.initial_state,
        "gamma": oamdp.gamma,
        "tau": oamdp.tau,
        "types": [
            {"transitions": t.transitions.tolist(), "observer_reward": t.observer_reward.tolist(),
             "terminal_states": sorted(t.terminal_states)}
            for t in oamdp.types
        ],
        "agent_reward": oamdp.spec,
    }
    if oamdp.prior is not None:
        doc["prior"] = np.asarray(oamdp.prior).tolist()
    if oamdp.type_labels is not None:
        doc["type_labels"] = list(oamdp.type_labels)
    return doc
