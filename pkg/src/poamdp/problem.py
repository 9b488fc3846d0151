"""Observer-aware problems under partial observability.

The observer is modelled as a softmax-rational Bayesian filter: she solves the
MDP with her assumed reward, derives a softmax policy, and runs an HMM forward
step on each observation. The agent is rewarded through her belief over a
target variable that is a function of the transition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping, Optional

import numpy as np
import scipy.sparse as sp

from .mdp import Mdp, StochasticPolicy, ValueTable, softmax_policy, value_iteration

PRUNE_TOL = 0.0  # keep every positive entry; see from_dense
KEY_SCALE = 1e9  # beliefs are keyed on entries rounded to 1e-9
ARGMAX_TOL = 1e-9
# The filter rejects an observation only when its likelihood underflows: with
# tau = 0.01 a wall bump has likelihood around 1e-43 yet is a real event.
IMPOSSIBLE_MASS = 1e-300


class ImpossibleObservation(ValueError):
    """The observation has zero likelihood under the observer's model."""


class Belief:
    """Sparse distribution over states with a canonical hashable key."""

    __slots__ = ("indices", "probs", "key")

    def __init__(self, indices, probs, *, normalized: bool = False):
        idx = np.asarray(indices, dtype=np.int64)
        p = np.asarray(probs, dtype=float)
        order = np.argsort(idx, kind="stable")
        idx, p = idx[order], p[order]
        if not normalized:
            if np.any(p < 0):
                raise ValueError("belief entries must be nonnegative")
            keep = p > 0
            idx, p = idx[keep], p[keep]
            total = p.sum()
            if total <= 0:
                raise ValueError("belief has no mass")
            p = p / total
        self.indices = idx
        self.probs = p
        self.key = tuple(zip(idx.tolist(), np.rint(p * KEY_SCALE).astype(np.int64).tolist()))

    @classmethod
    def point(cls, s: int) -> "Belief":
        return cls([s], [1.0])

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, float]) -> "Belief":
        items = sorted(mapping.items())
        return cls([k for k, _ in items], [v for _, v in items])

    @classmethod
    def from_dense(cls, vec: np.ndarray, prune: float = PRUNE_TOL) -> "Belief":
        """Normalize, drop entries below ``prune``, renormalize."""
        total = vec.sum()
        idx = np.flatnonzero(vec > prune * total)
        p = vec[idx]
        return cls(idx, p / p.sum(), normalized=True)

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.indices] = self.probs
        return out

    def __getitem__(self, s: int) -> float:
        pos = np.searchsorted(self.indices, s)
        if pos < len(self.indices) and self.indices[pos] == s:
            return float(self.probs[pos])
        return 0.0

    def items(self):
        return zip(self.indices.tolist(), self.probs.tolist())

    def support(self) -> list[int]:
        return self.indices.tolist()

    def __len__(self) -> int:
        return len(self.indices)

    def __eq__(self, other) -> bool:
        return isinstance(other, Belief) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        body = ", ".join(f"{s}: {p:.4g}" for s, p in self.items())
        return f"Belief({{{body}}})"


# ---------------------------------------------------------------------------
# Criteria


def candidate_set(beta: np.ndarray, tol: float = ARGMAX_TOL) -> np.ndarray:
    """Indices of the (tolerance-based) argmax of a target belief."""
    beta = np.asarray(beta)
    return np.flatnonzero(beta >= beta.max() - tol)


def prediction_probability(psi: int, beta: np.ndarray) -> float:
    """Probability that an observer betting uniformly on the argmax set picks ``psi``."""
    cands = candidate_set(beta)
    return 1.0 / len(cands) if psi in cands else 0.0


class Criterion:
    """Belief-dependent reward term.

    ``r_min``/``r_max`` bound ``value`` over all inputs from non-terminal states;
    they feed the bound initializations.
    """

    name = "custom"
    r_min = -1.0
    r_max = 0.0

    def value(self, problem: "PoOamdp", s: int, beta, a: int, s2: int, beta2) -> float:
        raise NotImplementedError

    def check(self, problem: "PoOamdp") -> None:
        """Validate problem structure needed by this criterion."""

    def describe(self) -> dict:
        return {"name": self.name}


class Legibility(Criterion):
    name = "legibility"
    r_min = -math.sqrt(2.0)

    def value(self, problem, s, beta, a, s2, beta2):
        ideal = problem.state_target[s]
        d = np.array(beta, dtype=float)
        d[ideal] -= 1.0
        return -float(np.sqrt(d @ d))

    def check(self, problem):
        if problem.state_target is None:
            raise ValueError("legibility needs a state-only target extractor")


class Explicability(Criterion):
    name = "explicability"
    r_min = -1.0

    def __init__(self, random_target: int):
        self.random_target = random_target

    def value(self, problem, s, beta, a, s2, beta2):
        return -float(beta[self.random_target])

    def describe(self):
        return {"name": self.name, "random_target": self.random_target}


class ActionPredictability(Criterion):
    name = "action_pred"
    r_min = -1.0

    def value(self, problem, s, beta, a, s2, beta2):
        return prediction_probability(problem.target_of(s, a, s2), beta) - 1.0


class StatePredictability(Criterion):
    name = "state_pred"
    r_min = -1.0

    def value(self, problem, s, beta, a, s2, beta2):
        return prediction_probability(problem.target_of(s, a, s2), beta) - 1.0


class FunctionCriterion(Criterion):
    """Criterion given by an arbitrary function of the transition and both target beliefs."""

    def __init__(self, fn: Callable, r_min: float, r_max: float, name: str = "custom", spec: Optional[dict] = None):
        self.fn = fn
        self.r_min = r_min
        self.r_max = r_max
        self.name = name
        self.spec = spec

    def value(self, problem, s, beta, a, s2, beta2):
        return float(self.fn(s, beta, a, s2, beta2))

    def describe(self):
        return dict(self.spec) if self.spec else {"name": self.name}


CRITERIA = ("legibility", "explicability", "action_pred", "state_pred")


# ---------------------------------------------------------------------------
# Problem


@dataclass(frozen=True, eq=False)
class PoOamdp:
    """A PO-OAMDP.

    ``base`` carries the dynamics and, as its reward, the observer reward R_obs.
    ``targets[s][a]`` lists the target value for each successor in
    ``base.transitions[s][a]`` (same order). ``obs_kernel`` has shape
    ``(n_actions, n_states, n_observations)``. The true system starts in
    ``base.initial_state``; the observer starts with ``initial_belief``.
    ``random_states`` are states on which the observer assumes uniformly random
    behaviour instead of the softmax policy.
    """

    base: Mdp
    n_targets: int
    targets: tuple
    obs_kernel: np.ndarray
    tau: float
    criterion: Criterion
    initial_belief: Belief
    robs_weight: float = 0.0
    state_target: Optional[np.ndarray] = None
    random_states: frozenset[int] = frozenset()
    target_labels: Optional[tuple] = None
    observation_labels: Optional[tuple] = None
    name: str = ""
    layout: Any = None  # optional domain index helper (e.g. maze positions)

    def __post_init__(self):
        S, A = self.base.n_states, self.base.n_actions
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.robs_weight < 0:
            raise ValueError("robs_weight must be nonnegative")
        if self.obs_kernel.shape[:2] != (A, S):
            raise ValueError(f"obs_kernel must have shape ({A}, {S}, n_obs)")
        if np.any(self.obs_kernel < 0) or not np.allclose(self.obs_kernel.sum(axis=2), 1.0, rtol=0, atol=1e-9):
            raise ValueError("observation kernel rows must be distributions")
        if len(self.targets) != S:
            raise ValueError("targets must have one row per state")
        for s in range(S):
            for a in range(A):
                if len(self.targets[s][a]) != len(self.base.transitions[s][a]):
                    raise ValueError(f"targets[{s}][{a}] is not aligned with the transitions")
                for psi in self.targets[s][a]:
                    if not 0 <= psi < self.n_targets:
                        raise ValueError(f"target value {psi} out of range")
        b0 = self.initial_belief
        if abs(b0.probs.sum() - 1.0) > 1e-9:
            raise ValueError("initial belief must sum to 1")
        if any(s in self.base.terminal_states for s in b0.support()):
            raise ValueError("initial belief must be supported on non-terminal states")
        if self.state_target is not None:
            for s in range(S):
                for a in range(A):
                    for (s2, p, _), psi in zip(self.base.transitions[s][a], self.targets[s][a]):
                        if p > 0 and psi != self.state_target[s]:
                            raise ValueError(f"target map disagrees with state extractor at ({s},{a},{s2})")
        self.criterion.check(self)

    @property
    def n_states(self) -> int:
        return self.base.n_states

    @property
    def n_actions(self) -> int:
        return self.base.n_actions

    @property
    def n_observations(self) -> int:
        return self.obs_kernel.shape[2]

    @property
    def gamma(self) -> float:
        return self.base.gamma

    def target_of(self, s: int, a: int, s2: int) -> int:
        for (t, _, _), psi in zip(self.base.transitions[s][a], self.targets[s][a]):
            if t == s2:
                return psi
        raise KeyError(f"({s},{a},{s2}) is not a possible transition")

    def observer_reward(self, s: int, a: int, s2: int) -> float:
        return self.base.reward(s, a, s2)

    def is_terminal(self, s: int) -> bool:
        return s in self.base.terminal_states

    @cached_property
    def observation_support(self) -> tuple:
        """``[a][s2]`` -> tuple of (o, prob) with prob > 0."""
        out = []
        for a in range(self.n_actions):
            row = []
            for s2 in range(self.n_states):
                probs = self.obs_kernel[a, s2]
                row.append(tuple((int(o), float(probs[o])) for o in np.flatnonzero(probs > 0)))
            out.append(tuple(row))
        return tuple(out)

    @cached_property
    def observer_reward_range(self) -> tuple[float, float]:
        """(min, max) of R_obs over transitions out of non-terminal states."""
        vals = [r for s, row in enumerate(self.base.transitions) if s not in self.base.terminal_states
                for succ in row for _, p, r in succ if p > 0]
        if not vals:
            return 0.0, 0.0
        return min(vals), max(vals)

    def reward_range(self) -> tuple[float, float]:
        """Bounds on the full agent reward R' (terminal zeros included)."""
        lo, hi = self.observer_reward_range
        rmin = self.criterion.r_min + self.robs_weight * lo
        rmax = self.criterion.r_max + self.robs_weight * hi
        return min(rmin, 0.0), max(rmax, 0.0)


@dataclass(frozen=True, eq=False)
class ObserverModel:
    """Softmax observer policy, its value table, and the matrices the filter uses."""

    pi_obs: StochasticPolicy
    v_obs: ValueTable
    predict: sp.csr_matrix  # (A * S, S): row a*S + s2 gathers pi(a|s) T(s, a, s2) over s
    target_matrix: sp.csr_matrix  # (n_targets, S): column s is s's contribution to Eq. beta


def observer_sources(problem: PoOamdp) -> list[int]:
    return sorted(set(problem.initial_belief.support()) | {problem.base.initial_state})


def build_observer_model(problem: PoOamdp, eps_vi: float = 1e-4, *, max_sweeps: Optional[int] = None) -> ObserverModel:
    """Solve the observer MDP (dynamics + R_obs) and derive the softmax policy."""
    kwargs = {} if max_sweeps is None else {"max_sweeps": max_sweeps}
    v = value_iteration(problem.base, eps_vi, sources=observer_sources(problem), **kwargs)
    pi = softmax_policy(problem.base, v, problem.tau)
    if problem.random_states:
        probs = pi.probs.copy()
        probs[sorted(problem.random_states)] = 1.0 / problem.n_actions
        pi = StochasticPolicy(probs)
    return ObserverModel(pi, v, *_filter_matrices(problem, pi))


def _filter_matrices(problem: PoOamdp, pi: StochasticPolicy):
    S, A = problem.n_states, problem.n_actions
    pr, pc, pv = [], [], []
    tr, tc, tv = [], [], []
    for s in range(S):
        for a in range(A):
            w = pi.probs[s, a]
            if w <= 0:
                continue
            for (s2, p, _), psi in zip(problem.base.transitions[s][a], problem.targets[s][a]):
                if p <= 0:
                    continue
                pr.append(a * S + s2)
                pc.append(s)
                pv.append(w * p)
                tr.append(psi)
                tc.append(s)
                tv.append(w * p)
    predict = sp.csr_matrix((pv, (pr, pc)), shape=(A * S, S))
    target = sp.csr_matrix((tv, (tr, tc)), shape=(problem.n_targets, S))
    return predict, target


def predicted_joint(problem: PoOamdp, model: ObserverModel, b: Belief) -> np.ndarray:
    """``P(a, s' | b)`` under the observer's model, shape (A, S)."""
    S = problem.n_states
    return (model.predict @ b.dense(S)).reshape(problem.n_actions, S)


def filter_from_joint(problem: PoOamdp, joint: np.ndarray, o: int) -> Belief:
    unnorm = (problem.obs_kernel[:, :, o] * joint).sum(axis=0)
    mass = unnorm.sum()
    if not mass > IMPOSSIBLE_MASS:
        raise ImpossibleObservation(f"observation {o} has zero likelihood")
    return Belief.from_dense(unnorm)


def filter_step(problem: PoOamdp, model: ObserverModel, b: Belief, o: int) -> Belief:
    """One BST filtering step: b'(s') ~ sum_a O(o|a,s') sum_s T(s'|s,a) pi_obs(a|s) b(s)."""
    return filter_from_joint(problem, predicted_joint(problem, model, b), o)


def target_belief(problem: PoOamdp, model: ObserverModel, b: Belief) -> np.ndarray:
    """beta(psi) = sum_{s,a,s'} 1[psi = phi(s,a,s')] T(s,a,s') pi_obs(a|s) b(s)."""
    return model.target_matrix @ b.dense(problem.n_states)


def ideal_belief(problem: PoOamdp, s: int) -> np.ndarray:
    if problem.state_target is None:
        raise ValueError("problem has no state-determined target")
    out = np.zeros(problem.n_targets)
    out[problem.state_target[s]] = 1.0
    return out


def criterion_reward(problem: PoOamdp, s: int, beta, a: int, s_next: int, beta_next) -> float:
    """Agent reward R' = criterion term + robs_weight * R_obs; exactly 0 from terminal states."""
    if problem.is_terminal(s):
        return 0.0
    r = problem.criterion.value(problem, s, beta, a, s_next, beta_next)
    if problem.robs_weight:
        r += problem.robs_weight * problem.observer_reward(s, a, s_next)
    return r


def make_criterion(name: str, **kwargs) -> Criterion:
    name = name.replace("-", "_")
    if name == "legibility":
        return Legibility()
    if name == "explicability":
        return Explicability(**kwargs)
    if name == "action_pred":
        return ActionPredictability()
    if name == "state_pred":
        return StatePredictability()
    raise ValueError(f"unknown criterion {name!r}")


def problem_to_dict(problem: PoOamdp) -> dict:
    """JSON-ready description of a problem; the criterion appears through its description only."""
    base = problem.base
    obs = problem.obs_kernel
    return {
        "name": problem.name,
        "n_states": base.n_states,
        "n_actions": base.n_actions,
        "n_observations": problem.n_observations,
        "n_targets": problem.n_targets,
        "gamma": base.gamma,
        "tau": problem.tau,
        "robs_weight": problem.robs_weight,
        "initial_state": base.initial_state,
        "terminal_states": sorted(base.terminal_states),
        "initial_belief": [[s, p] for s, p in problem.initial_belief.items()],
        "criterion": problem.criterion.describe(),
        "state_labels": list(base.state_labels) if base.state_labels else None,
        "target_labels": list(problem.target_labels) if problem.target_labels else None,
        "observation_labels": list(problem.observation_labels) if problem.observation_labels else None,
        "transitions": [
            [[[s2, p, r, psi] for (s2, p, r), psi in zip(base.transitions[s][a], problem.targets[s][a])]
             for a in range(base.n_actions)]
            for s in range(base.n_states)
        ],
        "observations": [
            [[[int(o), float(obs[a, s, o])] for o in np.flatnonzero(obs[a, s])] for s in range(base.n_states)]
            for a in range(base.n_actions)
        ],
    }
