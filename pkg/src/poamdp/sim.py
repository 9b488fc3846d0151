"""Monte Carlo simulation on the true dynamics with the observer's belief tracked alongside."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .belief_mdp import BeliefMdp, InfoState
from .mdp import greedy_policy
from .problem import Belief, ObserverModel, PoOamdp, criterion_reward

DEFAULT_HORIZON_CAP = 3000
DEFAULT_N_TRAJ = 1000
FIELDS = ("t", "state", "action", "observation", "belief", "target_belief", "r_criterion", "r_obs")

Policy = Callable[[InfoState, np.random.Generator], int]


@dataclass(frozen=True)
class Step:
    """One transition. ``belief`` and ``target_belief`` are the observer's view before
    acting; ``observation`` is what the observer receives after the move, so the
    next step's belief is ``filter_step(belief, observation)``. ``r_criterion`` is the
    full agent reward R' (criterion term plus weighted R_obs)."""

    t: int
    state: int
    action: int
    observation: int
    belief: Belief
    target_belief: tuple
    r_criterion: float
    r_obs: float

    def __eq__(self, other) -> bool:
        if not isinstance(other, Step):
            return NotImplemented
        return (
            (self.t, self.state, self.action, self.observation) == (other.t, other.state, other.action, other.observation)
            and self.belief.indices.tolist() == other.belief.indices.tolist()
            and self.belief.probs.tolist() == other.belief.probs.tolist()
            and self.target_belief == other.target_belief
            and (self.r_criterion, self.r_obs) == (other.r_criterion, other.r_obs)
        )


@dataclass
class TrajectoryRecord:
    steps: list
    final_state: int
    final_belief: Belief
    terminated: bool
    horizon_cap_hit: bool

    def returns(self, gamma: float) -> tuple[float, float]:
        """Discounted (criterion, observer) returns."""
        rc = ro = 0.0
        d = 1.0
        for st in self.steps:
            rc += d * st.r_criterion
            ro += d * st.r_obs
            d *= gamma
        return rc, ro


class ObserverPolicy:
    """Samples the observer's softmax policy at the true state."""

    def __init__(self, model: ObserverModel):
        self.cum = np.cumsum(model.pi_obs.probs, axis=1)

    def __call__(self, i: InfoState, rng: np.random.Generator) -> int:
        row = self.cum[i.s]
        return int(min(np.searchsorted(row, rng.random() * row[-1], side="right"), len(row) - 1))


class MdpGreedyPolicy:
    """Greedy optimal policy of the underlying MDP with the observer reward."""

    def __init__(self, problem: PoOamdp, model: ObserverModel):
        self.actions = greedy_policy(problem.base, model.v_obs).probs.argmax(axis=1)

    def __call__(self, i: InfoState, rng: Optional[np.random.Generator] = None) -> int:
        return int(self.actions[i.s])


def _sample(rng: np.random.Generator, probs: Sequence[float]) -> int:
    u = rng.random() * math.fsum(probs)
    acc = 0.0
    for k, p in enumerate(probs):
        acc += p
        if u < acc:
            return k
    return len(probs) - 1


def simulate(problem: PoOamdp, model: ObserverModel, policy: Policy, seed, horizon_cap: int = DEFAULT_HORIZON_CAP,
             *, bmdp: Optional[BeliefMdp] = None) -> TrajectoryRecord:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bm = bmdp or BeliefMdp(problem, model)
    base = problem.base
    s, b = base.initial_state, problem.initial_belief
    steps = []
    t = 0
    while s not in base.terminal_states and t < horizon_cap:
        a = int(policy(InfoState(s, b), rng))
        row = base.transitions[s][a]
        s2 = row[_sample(rng, [p for _, p, _ in row])][0]
        obs = problem.observation_support[a][s2]
        o = obs[_sample(rng, [p for _, p in obs])][0]
        beta = bm.beta(b)
        b2 = bm.next_belief(b, o)
        rc = criterion_reward(problem, s, beta, a, s2, bm.beta(b2))
        steps.append(Step(t, s, a, o, b, tuple(float(x) for x in beta), rc, base.reward(s, a, s2)))
        s, b, t = s2, b2, t + 1
    terminated = s in base.terminal_states
    return TrajectoryRecord(steps, s, b, terminated, not terminated)


@dataclass(frozen=True)
class EvalReport:
    mean_return_criterion: float
    mean_return_observer: float
    std_error_criterion: float
    std_error_observer: float
    n_trajectories: int
    seed: int
    horizon_cap: int
    horizon_cap_hits: int

    def to_json(self) -> str:
        keys = ("mean_return_criterion", "mean_return_observer", "std_error_criterion", "std_error_observer",
                "n_trajectories", "seed", "horizon_cap", "horizon_cap_hits")
        return json.dumps({k: getattr(self, k) for k in keys}, indent=2) + "\n"


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    if np.all(x == x[0]):
        return float(x[0]), 0.0
    return math.fsum(x) / len(x), float(x.std(ddof=1) / math.sqrt(len(x)))


def evaluate(problem: PoOamdp, model: ObserverModel, policy: Policy, n: int = DEFAULT_N_TRAJ, seed: int = 0,
             horizon_cap: int = DEFAULT_HORIZON_CAP, *, bmdp: Optional[BeliefMdp] = None) -> EvalReport:
    """Mean discounted returns over ``n`` trajectories with seeds spawned from ``seed``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    bm = bmdp or BeliefMdp(problem, model)
    children = np.random.SeedSequence(seed).spawn(n)
    rc = np.empty(n)
    ro = np.empty(n)
    caps = 0
    for k, child in enumerate(children):
        rec = simulate(problem, model, policy, np.random.default_rng(child), horizon_cap, bmdp=bm)
        rc[k], ro[k] = rec.returns(problem.gamma)
        caps += rec.horizon_cap_hit
    mc, sc = _mean_se(rc)
    mo, so = _mean_se(ro)
    return EvalReport(mc, mo, sc, so, n, int(seed), int(horizon_cap), int(caps))


def pooled_standard_error(a: EvalReport, b: EvalReport) -> float:
    return math.hypot(a.std_error_criterion, b.std_error_criterion)


# ---------------------------------------------------------------------------
# Export


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _belief_text(b: Belief) -> str:
    return ";".join(f"{s}:{_num(p)}" for s, p in b.items())


def _parse_belief(text: str) -> Belief:
    if not text:
        raise ValueError("empty belief")
    idx, probs = [], []
    for part in text.split(";"):
        s, p = part.split(":")
        idx.append(int(s))
        probs.append(float(p))
    return Belief(idx, probs, normalized=True)


def _step_row(st: Step) -> list:
    return [st.t, st.state, st.action, st.observation, _belief_text(st.belief),
            ";".join(_num(x) for x in st.target_belief), _num(st.r_criterion), _num(st.r_obs)]


def export_trajectory(record: TrajectoryRecord, fmt: str = "csv") -> bytes:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(FIELDS)
        for st in record.steps:
            w.writerow(_step_row(st))
        return buf.getvalue().encode()
    if fmt == "json":
        doc = {
            "terminated": record.terminated,
            "horizon_cap_hit": record.horizon_cap_hit,
            "steps": [dict(zip(FIELDS, _step_row(st))) for st in record.steps],
        }
        return (json.dumps(doc, indent=1) + "\n").encode()
    raise ValueError(f"unknown trajectory format {fmt!r}")


def _step_from(values: Sequence) -> Step:
    t, s, a, o, b, beta, rc, ro = values
    return Step(int(t), int(s), int(a), int(o), _parse_belief(b),
                tuple(float(x) for x in beta.split(";")) if beta else (), float(rc), float(ro))


def parse_trajectory(data: bytes, fmt: str = "csv") -> list:
    text = data.decode() if isinstance(data, bytes) else data
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != FIELDS:
            raise ValueError("bad trajectory header")
        return [_step_from(r) for r in rows[1:]]
    if fmt == "json":
        doc = json.loads(text)
        return [_step_from([d[k] for k in FIELDS]) for d in doc["steps"]]
    raise ValueError(f"unknown trajectory format {fmt!r}")
