"""Heuristic search value iteration over (state, belief) pairs with pointwise bounds."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .belief_mdp import BeliefMdp, InfoState, initial_info_state
from .mdp import cost_to_go_reward, greedy_policy, policy_evaluation, value_iteration
from .problem import ObserverModel, PoOamdp

MONOTONE_TOL = 1e-9


@dataclass
class HsviConfig:
    epsilon: float = 1e-3
    timeout: float = 3600.0  # seconds
    init_mode: str = "combined"  # or "naive"
    combined_policy: str = "pi_obs"  # or "pi_star"
    max_depth: int = 10_000
    gamma: Optional[float] = None  # defaults to the problem's discount
    eps_vi: float = 1e-4

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.init_mode not in ("naive", "combined"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")
        self.combined_policy = self.combined_policy.replace("-", "_")
        if self.combined_policy == "pi_star_s":
            self.combined_policy = "pi_star"
        if self.combined_policy not in ("pi_obs", "pi_star"):
            raise ValueError(f"unknown combined policy {self.combined_policy!r}")


class BoundTable:
    """Pointwise value bound: stored values at visited points, an init rule elsewhere.

    Terminal info states always read 0. Updates never loosen the bound; a
    backup that would loosen it by more than MONOTONE_TOL is counted in
    ``violations``.
    """

    def __init__(self, kind: str, init_rule: Callable[[InfoState], float], terminal_states: frozenset):
        if kind not in ("upper", "lower"):
            raise ValueError(kind)
        self.kind = kind
        self.init_rule = init_rule
        self.terminal_states = terminal_states
        self.stored: dict = {}
        self.violations = 0

    def __call__(self, i: InfoState) -> float:
        if i.s in self.terminal_states:
            return 0.0
        v = self.stored.get(i.key)
        return self.init_rule(i) if v is None else v

    def __len__(self) -> int:
        return len(self.stored)

    def update(self, i: InfoState, value: float) -> float:
        old = self(i)
        if self.kind == "upper":
            if value > old + MONOTONE_TOL:
                self.violations += 1
            value = min(value, old)
        else:
            if value < old - MONOTONE_TOL:
                self.violations += 1
            value = max(value, old)
        self.stored[i.key] = value
        return value


def _state_rule(values: np.ndarray) -> Callable[[InfoState], float]:
    return lambda i: float(values[i.s])


def init_naive(problem: PoOamdp, model: ObserverModel, config: Optional[HsviConfig] = None):
    """Constant bounds R'min / (1 - gamma) and R'max / (1 - gamma)."""
    gamma = problem.gamma
    if gamma >= 1:
        raise ValueError("naive initialization needs gamma < 1")
    rmin, rmax = problem.reward_range()
    lo, hi = rmin / (1 - gamma), rmax / (1 - gamma)
    term = problem.base.terminal_states
    return BoundTable("lower", lambda i: lo, term), BoundTable("upper", lambda i: hi, term)


def combined_bound_values(problem: PoOamdp, model: ObserverModel, config: HsviConfig):
    """Per-state lower and upper bound values of the combined initialization.

    The reward splits as R' = R_s + R_b with R_s = robs_weight * R_obs and R_b
    the belief-dependent criterion term. Lower: V_s^pi + R_b^min * V_costToGo^pi.
    Upper: V*_s + R_b^max / (1 - gamma). Each value function is widened by
    its own convergence error so both stay valid and improvable.
    """
    base = problem.base
    gamma = problem.gamma
    if gamma >= 1:
        raise ValueError("combined initialization here assumes gamma < 1")
    w = problem.robs_weight
    r_s = lambda s, a, s2: w * base.reward(s, a, s2)
    crit = problem.criterion
    v_star = value_iteration(base, config.eps_vi, reward=r_s, all_states=True)
    if config.combined_policy == "pi_obs":
        pi = model.pi_obs
    else:
        pi = greedy_policy(base, v_star, reward=r_s)
    v_pi = policy_evaluation(base, pi, r_s, config.eps_vi, all_states=True)
    ctg = policy_evaluation(base, pi, cost_to_go_reward(base), config.eps_vi, all_states=True)
    lower = v_pi.values - v_pi.error_bound(gamma) + crit.r_min * (ctg.values + ctg.error_bound(gamma))
    upper = v_star.values + v_star.error_bound(gamma) + crit.r_max / (1 - gamma)
    lower[base.terminal_mask] = 0.0
    upper[base.terminal_mask] = 0.0
    return lower, upper


def init_combined(problem: PoOamdp, model: ObserverModel, config: Optional[HsviConfig] = None):
    lower, upper = combined_bound_values(problem, model, config or HsviConfig())
    term = problem.base.terminal_states
    return BoundTable("lower", _state_rule(lower), term), BoundTable("upper", _state_rule(upper), term)


def initial_bounds(problem, model, config: HsviConfig):
    if config.init_mode == "naive":
        return init_naive(problem, model, config)
    return init_combined(problem, model, config)


@dataclass
class SolveResult:
    lower: BoundTable
    upper: BoundTable
    root_gap: float
    trajectories_explored: int
    wall_time: float
    gap_log: list  # (seconds, upper(i0), lower(i0))
    complete: bool
    root: InfoState
    max_depth_reached: int = 0
    points: dict = field(default_factory=dict)  # key -> InfoState for every updated point
    bmdp: Optional[BeliefMdp] = None

    @property
    def root_upper(self) -> float:
        return self.upper(self.root)

    @property
    def root_lower(self) -> float:
        return self.lower(self.root)


def depth_bound(problem: PoOamdp, epsilon: float) -> float:
    """Depth beyond which eps * gamma**-t exceeds any possible bound gap."""
    rmin, rmax = problem.reward_range()
    span = (rmax - rmin) / (1 - problem.gamma)
    if span <= epsilon:
        return 0.0
    return math.log(span / epsilon) / math.log(1 / problem.gamma)


class _Solver:
    def __init__(self, problem, model, config, lower, upper, bmdp):
        self.problem = problem
        self.bm = bmdp or BeliefMdp(problem, model)
        self.gamma = problem.gamma
        self.lower = lower
        self.upper = upper
        self.succ: dict = {}
        self.points: dict = {}
        self.n_actions = problem.n_actions
        self.terminal = problem.base.terminal_states

    def successors(self, i: InfoState):
        out = self.succ.get(i.key)
        if out is None:
            out = [[(t.successor, t.probability, t.reward) for t in self.bm.successors(i, a)]
                   for a in range(self.n_actions)]
            self.succ[i.key] = out
        return out

    def update(self, i: InfoState) -> list[float]:
        """Bellman backup of both bounds at i; returns the upper Q-values."""
        U, L, g = self.upper, self.lower, self.gamma
        qu, ql = [], []
        for lst in self.successors(i):
            su = sl = 0.0
            for j, p, r in lst:
                su += p * (r + g * U(j))
                sl += p * (r + g * L(j))
            qu.append(su)
            ql.append(sl)
        U.update(i, max(qu))
        L.update(i, max(ql))
        self.points[i.key] = i
        return qu


def solve(problem: PoOamdp, model: ObserverModel, config: Optional[HsviConfig] = None, *,
          bounds=None, bmdp: Optional[BeliefMdp] = None, on_trial: Optional[Callable] = None) -> SolveResult:
    """Run HSVI from the initial info state until the root gap drops below epsilon.

    Trials follow the upper-greedy action and the successor with the largest
    probability-weighted excess gap; bounds are backed up on the way down and
    again on the way back. Stops early (``complete=False``) on timeout.
    """
    config = config or HsviConfig()
    gamma = problem.gamma
    if config.gamma is not None and abs(config.gamma - gamma) > 1e-12:
        raise ValueError(f"config gamma {config.gamma} differs from problem gamma {gamma}")
    if not 0 < gamma < 1:
        raise ValueError("HSVI requires 0 < gamma < 1")
    lower, upper = bounds if bounds is not None else initial_bounds(problem, model, config)
    solver = _Solver(problem, model, config, lower, upper, bmdp)
    eps = config.epsilon
    root = initial_info_state(problem)
    t0 = time.monotonic()
    deadline = t0 + config.timeout
    log = [(0.0, upper(root), lower(root))]
    trials = 0
    max_depth = 0
    complete = True
    inv_gamma = 1.0 / gamma
    while upper(root) - lower(root) >= eps:
        if time.monotonic() >= deadline:
            complete = False
            break
        path = []
        i, t, thresh = root, 0, eps
        timed_out = False
        while i.s not in solver.terminal and t < config.max_depth:
            if upper(i) - lower(i) < thresh:
                break
            qu = solver.update(i)
            path.append(i)
            a = int(np.argmax(qu))
            nthresh = thresh * inv_gamma
            best, pick = -math.inf, None
            for j, p, _ in solver.successors(i)[a]:
                score = p * (upper(j) - lower(j) - nthresh)
                if score > best:
                    best, pick = score, j
            i, t, thresh = pick, t + 1, nthresh
            if t % 1000 == 0 and time.monotonic() >= deadline:
                timed_out = True
                break
        max_depth = max(max_depth, t)
        for i in reversed(path):
            solver.update(i)
        trials += 1
        log.append((time.monotonic() - t0, upper(root), lower(root)))
        if on_trial is not None:
            on_trial(trials, upper(root), lower(root))
        if timed_out:
            complete = upper(root) - lower(root) < eps
            break
    return SolveResult(
        lower=lower,
        upper=upper,
        root_gap=upper(root) - lower(root),
        trajectories_explored=trials,
        wall_time=time.monotonic() - t0,
        gap_log=log,
        complete=complete,
        root=root,
        max_depth_reached=max_depth,
        points=solver.points,
        bmdp=solver.bm,
    )


class GreedyPolicy:
    """One-step lookahead on a value function over info states; ties to the lowest action."""

    def __init__(self, bmdp: BeliefMdp, value: Callable[[InfoState], float]):
        self.bmdp = bmdp
        self.value = value

    def q_values(self, i: InfoState) -> np.ndarray:
        g = self.bmdp.problem.gamma
        return np.array([
            sum(t.probability * (t.reward + g * self.value(t.successor)) for t in self.bmdp.successors(i, a))
            for a in range(self.bmdp.problem.n_actions)
        ])

    def __call__(self, i: InfoState, rng=None) -> int:
        return int(np.argmax(self.q_values(i)))


def extract_policy(result: SolveResult, problem: PoOamdp, model: ObserverModel) -> GreedyPolicy:
    bm = result.bmdp if result.bmdp is not None and result.bmdp.problem is problem else BeliefMdp(problem, model)
    return GreedyPolicy(bm, result.lower)


def gap_log_csv(result_or_log) -> str:
    log = result_or_log.gap_log if isinstance(result_or_log, SolveResult) else result_or_log
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seconds", "upper", "lower"])
    for t, u, l in log:
        w.writerow([f"{t:.6f}", repr(float(u)), repr(float(l))])
    return buf.getvalue()
