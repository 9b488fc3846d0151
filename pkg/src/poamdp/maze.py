"""Maze benchmark family: grid text format and PO-OAMDP construction.

Grid files have ``key = value`` header lines, a blank line, then the grid::

    criterion = legibility
    p_obs = 1
    gamma = 0.99
    tau = 0.01
    robs_weight = 1
    actual_goal = 1

    #####
    #1~2#
    #.~.#
    #~S~#
    #####

``#`` wall, ``.`` visible cell, ``~`` hidden cell, ``S``/``s`` visible/hidden
start, ``1``-``9`` goal cells (numbered in order). A goal cell reveals the
agent only when it is the goal of the hypothesis being modeled, so reaching
the actual goal is always seen while alternate goals look hidden.
``actual_goal`` names the goal digit the agent pursues. Coordinates are
``(x, y)``, x the column and y the row, both from the top-left corner.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .mdp import Mdp
from .problem import Belief, CRITERIA, PoOamdp, make_criterion

WALL, VISIBLE, HIDDEN = "#", ".", "~"
ACTIONS = ("up", "down", "left", "right")
MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))
STEP_COST = -0.01
WALL_COST = -1.0
NONE_OBS = "none"

HEADER_KEYS = ("criterion", "p_obs", "gamma", "tau", "robs_weight", "actual_goal")


class GridParseError(ValueError):
    def __init__(self, message: str, line: int, column: int = 0):
        self.line = line
        self.column = column
        where = f"line {line}" + (f", column {column}" if column else "")
        super().__init__(f"{where}: {message}")


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    cells: tuple[str, ...]  # one string per row, characters WALL/VISIBLE/HIDDEN
    start: tuple[int, int]
    goal_cells: tuple[tuple[int, int], ...]
    actual_goal_index: int = 0
    p_obs: float = 1.0
    criterion: str = "legibility"
    gamma: float = 0.99
    tau: float = 0.01
    robs_weight: float = 0.0
    name: str = ""

    def __post_init__(self):
        criterion = self.criterion.replace("-", "_")
        object.__setattr__(self, "criterion", criterion)
        if criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if len(self.cells) != self.height or any(len(r) != self.width for r in self.cells):
            raise ValueError("cells do not match width/height")
        for what, (x, y) in [("start", self.start)] + [(f"goal {k + 1}", g) for k, g in enumerate(self.goal_cells)]:
            if not (0 <= x < self.width and 0 <= y < self.height) or self.cells[y][x] == WALL:
                raise ValueError(f"{what} at {(x, y)} is not on a free cell")
        if not self.goal_cells:
            raise ValueError("grid has no goal cell")
        if len(set(self.goal_cells)) != len(self.goal_cells):
            raise ValueError("duplicate goal cells")
        if self.start in self.goal_cells:
            raise ValueError("start cell cannot be a goal")
        if not 0 <= self.actual_goal_index < len(self.goal_cells):
            raise ValueError("actual goal index out of range")
        if criterion in ("action_pred", "state_pred") and len(self.goal_cells) != 1:
            raise ValueError("predictability grids must have exactly one goal")
        if not 0 < self.p_obs <= 1:
            raise ValueError("p_obs must lie in (0, 1]")

    def with_options(self, **kwargs) -> "GridSpec":
        return replace(self, **kwargs)

    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and self.cells[y][x] != WALL

    def is_observable(self, x: int, y: int, goal: Optional[tuple[int, int]] = None) -> bool:
        """Whether an agent at (x, y) can be seen when ``goal`` is its goal cell."""
        return self.cells[y][x] == VISIBLE or (x, y) == goal


def _format_number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _parse_number(text: str, line: int, key: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise GridParseError(f"{key}: expected a number, got {text!r}", line) from None


def parse_grid(text: str, name: str = "") -> GridSpec:
    lines = text.splitlines()
    header: dict[str, tuple[str, int]] = {}
    n = 0
    while n < len(lines) and lines[n].strip():
        raw = lines[n]
        if "=" not in raw:
            # No header: the grid starts here.
            if not header:
                break
            raise GridParseError("bad header line, expected 'key = value'", n + 1)
        key, _, value = raw.partition("=")
        key = key.strip()
        if key not in HEADER_KEYS:
            raise GridParseError(f"unknown header key {key!r}", n + 1)
        if key in header:
            raise GridParseError(f"duplicate header key {key!r}", n + 1)
        header[key] = (value.strip(), n + 1)
        n += 1
    while n < len(lines) and not lines[n].strip():
        n += 1
    rows = []
    first_row = n + 1
    for raw in lines[n:]:
        if not raw.strip():
            break
        rows.append(raw.rstrip())
    if not rows:
        raise GridParseError("missing grid", first_row)
    width = len(rows[0])
    cells, start, goals = [], None, {}
    for y, row in enumerate(rows):
        ln = first_row + y
        if len(row) != width:
            raise GridParseError(f"row has {len(row)} characters, expected {width}", ln)
        out = []
        for x, ch in enumerate(row):
            col = x + 1
            if ch in (WALL, VISIBLE, HIDDEN):
                out.append(ch)
            elif ch in "Ss":
                if start is not None:
                    raise GridParseError("more than one start cell", ln, col)
                start = (x, y)
                out.append(HIDDEN if ch == "s" else VISIBLE)
            elif ch in "123456789":
                if ch in goals:
                    raise GridParseError(f"goal {ch} appears twice", ln, col)
                goals[ch] = (x, y)
                out.append(HIDDEN)
            else:
                raise GridParseError(f"unexpected character {ch!r}", ln, col)
        cells.append("".join(out))
    if start is None:
        raise GridParseError("missing start cell 'S'", first_row)
    labels = sorted(goals)
    if labels != [str(k) for k in range(1, len(labels) + 1)]:
        raise GridParseError(f"goal digits must be 1..k without gaps, got {''.join(labels)}", first_row)

    def num(key, default):
        if key not in header:
            return default
        value, ln = header[key]
        return _parse_number(value, ln, key)

    kwargs = dict(
        p_obs=num("p_obs", 1.0),
        gamma=num("gamma", 0.99),
        tau=num("tau", 0.01),
        robs_weight=num("robs_weight", 0.0),
    )
    criterion = header.get("criterion", ("legibility", 0))
    actual = num("actual_goal", 1)
    if not float(actual).is_integer() or not 1 <= actual <= len(labels):
        raise GridParseError(f"actual_goal must name a goal digit 1..{len(labels)}", header.get("actual_goal", ("", 0))[1])
    try:
        spec = GridSpec(
            width=width,
            height=len(rows),
            cells=tuple(cells),
            start=start,
            goal_cells=tuple(goals[ch] for ch in labels),
            actual_goal_index=int(actual) - 1,
            criterion=criterion[0],
            name=name,
            **kwargs,
        )
    except ValueError as exc:
        raise GridParseError(str(exc), criterion[1] if "criterion" in str(exc) else first_row) from None
    return spec


def render_grid(spec: GridSpec) -> str:
    head = [
        f"criterion = {spec.criterion}",
        f"p_obs = {_format_number(spec.p_obs)}",
        f"gamma = {_format_number(spec.gamma)}",
        f"tau = {_format_number(spec.tau)}",
        f"robs_weight = {_format_number(spec.robs_weight)}",
        f"actual_goal = {spec.actual_goal_index + 1}",
    ]
    grid = [list(r) for r in spec.cells]
    sx, sy = spec.start
    grid[sy][sx] = "S" if spec.cells[sy][sx] == VISIBLE else "s"
    for k, (x, y) in enumerate(spec.goal_cells):
        grid[y][x] = str(k + 1)
    return "\n".join(head + [""] + ["".join(r) for r in grid]) + "\n"


def normalize_whitespace(text: str) -> str:
    """Strip trailing blanks, collapse the header/grid separator to one blank line."""
    lines = [ln.rstrip() for ln in text.strip("\n").splitlines()]
    out, blank = [], False
    for ln in lines:
        if not ln:
            blank = True
            continue
        if blank and out:
            out.append("")
        blank = False
        out.append(ln)
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Problem construction


@dataclass(frozen=True)
class MazeLayout:
    """Index bookkeeping for a built maze problem."""

    positions: tuple[tuple[int, int], ...]
    n_hypotheses: int
    random_hypothesis: Optional[int]

    @property
    def n_positions(self) -> int:
        return len(self.positions)

    def state(self, pos_index: int, hypothesis: int) -> int:
        return hypothesis * self.n_positions + pos_index

    def split(self, s: int) -> tuple[int, int]:
        return s % self.n_positions, s // self.n_positions

    def position(self, s: int) -> tuple[int, int]:
        return self.positions[s % self.n_positions]


def build_problem(spec: GridSpec) -> PoOamdp:
    positions = tuple((x, y) for y in range(spec.height) for x in range(spec.width) if spec.is_free(x, y))
    pos_index = {p: k for k, p in enumerate(positions)}
    P = len(positions)
    n_goals = len(spec.goal_cells)
    explicable = spec.criterion == "explicability"
    H = n_goals + (1 if explicable else 0)
    random_h = n_goals if explicable else None
    layout = MazeLayout(positions, H, random_h)
    S, A = P * H, len(ACTIONS)

    def goal_of(h):
        return spec.goal_cells[h] if h < n_goals else None

    # The random-behaviour hypothesis never terminates: a random walker may
    # cross goal cells, so leaving one does not rule it out.
    terminal = set()
    for h in range(n_goals):
        terminal.add(layout.state(pos_index[goal_of(h)], h))

    def move(s, a):
        k, h = layout.split(s)
        x, y = positions[k]
        dx, dy = MOVES[a]
        if spec.is_free(x + dx, y + dy):
            return layout.state(pos_index[(x + dx, y + dy)], h), False
        return s, True

    def successors(s, a):
        return [(move(s, a)[0], 1.0)]

    def reward(s, a, s2):
        return WALL_COST if move(s, a)[1] else STEP_COST

    state_labels = tuple(
        f"{positions[k]}|{'psi0' if h == random_h else f'g{h + 1}'}" for h in range(H) for k in range(P)
    )
    start_k = pos_index[spec.start]
    base = Mdp.build(
        S, A, successors, reward, spec.gamma, terminal,
        initial_state=layout.state(start_k, spec.actual_goal_index),
        state_labels=state_labels, action_labels=ACTIONS,
    )

    observable = [
        k for k, (x, y) in enumerate(positions) if spec.is_observable(x, y) or (x, y) in spec.goal_cells
    ]
    obs_of_pos = {k: n + 1 for n, k in enumerate(observable)}
    n_obs = len(observable) + 1
    obs = np.zeros((A, S, n_obs))
    for s in range(S):
        k, h = layout.split(s)
        if spec.is_observable(*positions[k], goal_of(h)):
            obs[:, s, obs_of_pos[k]] = spec.p_obs
            obs[:, s, 0] = 1.0 - spec.p_obs
        else:
            obs[:, s, 0] = 1.0
    obs_labels = (NONE_OBS,) + tuple(str(positions[k]) for k in observable)

    hyp = np.array([layout.split(s)[1] for s in range(S)])
    if spec.criterion in ("legibility", "explicability"):
        phi = lambda s, a, s2: int(hyp[s])
        n_targets = H
        target_labels = tuple("psi0" if h == random_h else f"g{h + 1}" for h in range(H))
        state_target = hyp
    elif spec.criterion == "action_pred":
        phi = lambda s, a, s2: a
        n_targets = A
        target_labels = ACTIONS
        state_target = None
    else:
        phi = lambda s, a, s2: layout.split(s2)[0]
        n_targets = P
        target_labels = tuple(str(p) for p in positions)
        state_target = None
    targets = tuple(
        tuple(tuple(phi(s, a, s2) for s2, _, _ in base.transitions[s][a]) for a in range(A)) for s in range(S)
    )
    criterion = make_criterion(spec.criterion, **({"random_target": random_h} if explicable else {}))
    b0 = Belief([layout.state(start_k, h) for h in range(H)], [1.0 / H] * H)
    problem = PoOamdp(
        base=base,
        n_targets=n_targets,
        targets=targets,
        obs_kernel=obs,
        tau=spec.tau,
        criterion=criterion,
        initial_belief=b0,
        robs_weight=spec.robs_weight,
        state_target=state_target,
        random_states=frozenset(layout.state(k, random_h) for k in range(P)) if explicable else frozenset(),
        target_labels=target_labels,
        observation_labels=obs_labels,
        name=spec.name,
        layout=layout,
    )
    return problem


# ---------------------------------------------------------------------------
# Reconstructed benchmark grids. The original layouts exist only as figures;
# these follow the textual descriptions (goal count, visible rows/cells, paths).

_LEGIBILITY_MAIN = """\
#########
#1~~2~~3#
#~~~~~~~#
#~~~~~~~#
#.......#
#~~~~~~~#
#~~~~~~~#
#~~~S~~~#
#########
"""

# Two routes to the left goal; the longer right-hand route has more visible cells.
_LEGIBILITY_STOCHASTIC = """\
#########
#1~~2~~3#
#~##~##.#
#~##~##.#
#~~~~~~.#
#~##~##.#
#~~~S~~~#
#########
"""

# Hidden corridors, an empty room, and three visible cells (one is the goal).
_PREDICTABILITY_MAIN = """\
#########
#~~~.~s~#
##~######
#~~~~~#~#
#~~~~~#~#
#~~~~~#~#
#~~~~~#~#
###~###~#
###~###~#
#1~.###~#
#~~~~~~~#
#########
"""

_LEGIBILITY_SMALL = """\
#######
#1~2~3#
#~~~~~#
#.....#
#~~~~~#
#~~S~~#
#######
"""

_PREDICTABILITY_SMALL = """\
#######
#1~~~~#
#~###~#
#~~.~~#
#~###~#
#~~S~~#
#######
"""

# Toy instances small enough for exhaustive finite-horizon checks.
_TOY_TWO_GOALS = """\
#####
#1~2#
#.~.#
#~S~#
#####
"""

_TOY_ONE_GOAL = """\
#####
#~~1#
#.#~#
#~S~#
#####
"""


def _grid(text, name, **kwargs) -> GridSpec:
    return parse_grid(text, name=name).with_options(name=name, **kwargs)


def benchmark_grids() -> dict[str, GridSpec]:
    """Best-effort reconstructions of the benchmark grids, keyed by name.

    Exact cell layouts are unknown; the visible-cell structure, goal count and
    observation settings follow the published descriptions.
    """
    g = {}
    g["legibility_main"] = _grid(_LEGIBILITY_MAIN, "legibility_main", criterion="legibility", robs_weight=1.0)
    g["legibility_main_middle"] = g["legibility_main"].with_options(name="legibility_main_middle", actual_goal_index=1)
    g["legibility_stochastic"] = _grid(_LEGIBILITY_STOCHASTIC, "legibility_stochastic", criterion="legibility",
                                       robs_weight=1.0, p_obs=0.5)
    g["explicability_main"] = _grid(_LEGIBILITY_MAIN, "explicability_main", criterion="explicability")
    g["action_pred_main"] = _grid(_PREDICTABILITY_MAIN, "action_pred_main", criterion="action_pred", robs_weight=1.0)
    g["action_pred_main_no_robs"] = g["action_pred_main"].with_options(name="action_pred_main_no_robs", robs_weight=0.0)
    g["state_pred_main"] = _grid(_PREDICTABILITY_MAIN, "state_pred_main", criterion="state_pred")
    g["legibility_small"] = _grid(_LEGIBILITY_SMALL, "legibility_small", criterion="legibility", robs_weight=1.0)
    g["explicability_small"] = _grid(_LEGIBILITY_SMALL, "explicability_small", criterion="explicability")
    g["action_pred_small"] = _grid(_PREDICTABILITY_SMALL, "action_pred_small", criterion="action_pred")
    g["state_pred_small"] = _grid(_PREDICTABILITY_SMALL, "state_pred_small", criterion="state_pred")
    return g


def toy_grids() -> dict[str, GridSpec]:
    """One 3x3 toy maze per criterion."""
    return {
        "toy_legibility": _grid(_TOY_TWO_GOALS, "toy_legibility", criterion="legibility", robs_weight=1.0),
        "toy_explicability": _grid(_TOY_TWO_GOALS, "toy_explicability", criterion="explicability"),
        "toy_action_pred": _grid(_TOY_ONE_GOAL, "toy_action_pred", criterion="action_pred", robs_weight=1.0),
        "toy_state_pred": _grid(_TOY_ONE_GOAL, "toy_state_pred", criterion="state_pred", robs_weight=1.0),
    }
