"""Observer-aware planning under partial observability.

The agent acts in an MDP while an observer, who sees only noisy
observations, tracks a belief about the system state and a target variable
(goal, next action, next state). The agent is rewarded through that belief
and plans over (state, observer belief) pairs with heuristic search value
iteration.
"""

from .belief_mdp import (
    BeliefMdp,
    InfoState,
    InfoTransition,
    NodeCapExceeded,
    finite_horizon_value,
    finite_horizon_value_recursive,
    horizon_values,
    initial_info_state,
    successors,
)
from .hsvi import BoundTable, GreedyPolicy, HsviConfig, SolveResult, extract_policy, init_combined, init_naive, solve
from .maze import GridParseError, GridSpec, build_problem, benchmark_grids, parse_grid, render_grid, toy_grids
from .mdp import (
    DivergenceError,
    Mdp,
    StochasticPolicy,
    ValueTable,
    greedy_policy,
    is_proper,
    policy_evaluation,
    softmax_policy,
    value_iteration,
)
from .oamdp import Oamdp, OamdpType, convert, oamdp_history_value, random_oamdp
from .problem import (
    Belief,
    ImpossibleObservation,
    ObserverModel,
    PoOamdp,
    build_observer_model,
    criterion_reward,
    filter_step,
    make_criterion,
    target_belief,
)
from .sim import EvalReport, MdpGreedyPolicy, ObserverPolicy, TrajectoryRecord, evaluate, export_trajectory, simulate

__all__ = [name for name in dir() if not name.startswith("_")]
