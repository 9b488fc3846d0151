"""Command-line entry point: solve, evaluate, simulate and convert.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 solver timeout, 2 input error, 3 artifact mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from importlib import metadata
from pathlib import Path

from .belief_mdp import BeliefMdp
from .hsvi import BoundTable, GreedyPolicy, HsviConfig, extract_policy, gap_log_csv, initial_bounds, solve
from .maze import GridParseError, build_problem, parse_grid, render_grid
from .oamdp import convert, oamdp_from_json
from .problem import build_observer_model, problem_to_dict
from .sim import MdpGreedyPolicy, ObserverPolicy, evaluate, export_trajectory, simulate

EXIT_OK, EXIT_TIMEOUT, EXIT_INPUT, EXIT_MISMATCH = 0, 1, 2, 3

# Solver and simulation defaults; grid options fall back to the grid header.
DEFAULTS = {
    "eps_vi": 1e-4,
    "eps_hsvi": 1e-3,
    "timeout_secs": 3600.0,
    "init": "combined",
    "combined_policy": "pi-obs",
    "seed": 0,
    "n_traj": 1000,
    "horizon_cap": 3000,
    "format": "csv",
    "policy": "hsvi",
    "artifact": None,
}
GRID_OPTIONS = {"criterion": "criterion", "gamma": "gamma", "tau": "tau", "robs_weight": "robs_weight", "pobs": "p_obs"}
CRITERION_FLAGS = ("legibility", "explicability", "action-pred", "state-pred")


class InputError(Exception):
    pass


class ArtifactMismatch(Exception):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _resolve(args, grid_keys: bool) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(_read(args.config))
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.config}: invalid JSON config ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise InputError(f"{args.config}: config must be a JSON object")
        known = set(DEFAULTS) | set(GRID_OPTIONS)
        unknown = sorted(set(k.replace("-", "_") for k in loaded) - known)
        if unknown:
            raise InputError(f"{args.config}: unknown config keys {', '.join(unknown)}")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for key in list(DEFAULTS) + (list(GRID_OPTIONS) if grid_keys else []):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _load_grid(path: str, cfg: dict):
    text = _read(path).decode("utf-8", errors="replace")
    try:
        spec = parse_grid(text, name=Path(path).stem)
        overrides = {GRID_OPTIONS[k]: cfg[k] for k in GRID_OPTIONS if cfg.get(k) is not None}
        if "criterion" in overrides:
            overrides["criterion"] = str(overrides["criterion"]).replace("-", "_")
        spec = spec.with_options(**overrides)
    except GridParseError as exc:
        raise InputError(f"{path}: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise InputError(f"{path}: {exc}") from None
    for k in GRID_OPTIONS:
        cfg[k] = getattr(spec, GRID_OPTIONS[k])
    return spec


def _problem_digest(spec, eps_vi: float) -> str:
    return _sha256(json.dumps({"grid": render_grid(spec), "eps_vi": eps_vi}, sort_keys=True).encode())


def _hsvi_config(cfg: dict) -> HsviConfig:
    try:
        return HsviConfig(
            epsilon=float(cfg["eps_hsvi"]),
            timeout=float(cfg["timeout_secs"]),
            init_mode=cfg["init"],
            combined_policy=cfg["combined_policy"],
            eps_vi=float(cfg["eps_vi"]),
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _write(out: Path, name: str, data, outputs: list):
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_bytes(data if isinstance(data, bytes) else data.encode())
    outputs.append(name)


def _manifest(out: Path, command: str, cfg: dict, inputs: dict, t0: float, outputs: list, timing_outputs=()):
    doc = {
        "command": command,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "inputs": inputs,
        "tool_version": _version(),
        "wall_time_seconds": round(time.monotonic() - t0, 6),
        "outputs": sorted(outputs),
        "timing_outputs": list(timing_outputs),
    }
    _write(out, "manifest.json", json.dumps(doc, indent=2) + "\n", [])


def _setup(args, cfg):
    spec = _load_grid(args.grid, cfg)
    problem = build_problem(spec)
    model = build_observer_model(problem, float(cfg["eps_vi"]))
    return spec, problem, model


# ---------------------------------------------------------------------------
# Commands


def cmd_solve(args) -> int:
    t0 = time.monotonic()
    cfg = _resolve(args, grid_keys=True)
    spec, problem, model = _setup(args, cfg)
    config = _hsvi_config(cfg)
    try:
        result = solve(problem, model, config)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out = Path(args.out)
    outputs: list = []
    bounds = {
        "lower": result.root_lower,
        "upper": result.root_upper,
        "gap": result.root_gap,
        "epsilon": config.epsilon,
        "complete": result.complete,
        "trajectories_explored": result.trajectories_explored,
        "points": len(result.points),
        "max_depth_reached": result.max_depth_reached,
    }
    _write(out, "bounds.json", json.dumps(bounds, indent=2) + "\n", outputs)
    _write(out, "gap_log.csv", gap_log_csv(result), outputs)
    artifact = {
        "grid_digest": _problem_digest(spec, config.eps_vi),
        "solver": {"init": config.init_mode, "combined_policy": config.combined_policy, "eps_vi": config.eps_vi},
        "root_lower": result.root_lower,
        "root_upper": result.root_upper,
        "lower_points": [
            [k[0], [list(e) for e in k[1]], v] for k, v in sorted(result.lower.stored.items())
        ],
    }
    _write(out, "policy.json", json.dumps(artifact) + "\n", outputs)
    _manifest(out, "solve", cfg, {args.grid: _sha256(_read(args.grid))}, t0, outputs, ["gap_log.csv"])
    status = "converged" if result.complete else "timed out"
    print(f"{status}: lower {result.root_lower:.6f} upper {result.root_upper:.6f} "
          f"gap {result.root_gap:.3g} after {result.trajectories_explored} trials")
    return EXIT_OK if result.complete else EXIT_TIMEOUT


def _artifact_path(path: str) -> Path:
    p = Path(path)
    return p / "policy.json" if p.is_dir() else p


def _load_artifact(path: str) -> dict:
    p = _artifact_path(path)
    try:
        doc = json.loads(_read(str(p)))
        doc["lower_points"], doc["grid_digest"], doc["solver"]
    except (json.JSONDecodeError, KeyError, TypeError):
        raise InputError(f"{p}: not a policy artifact") from None
    return doc


def _policy(cfg, spec, problem, model, bm):
    kind = str(cfg["policy"]).replace("_", "-")
    if kind == "pi-obs":
        return ObserverPolicy(model)
    if kind == "mdp-greedy":
        return MdpGreedyPolicy(problem, model)
    if kind != "hsvi":
        raise InputError(f"unknown policy source {cfg['policy']!r}")
    if not cfg.get("artifact"):
        raise InputError("--policy hsvi needs --artifact (a solve output directory or policy.json)")
    doc = _load_artifact(cfg["artifact"])
    if doc["grid_digest"] != _problem_digest(spec, float(cfg["eps_vi"])):
        raise ArtifactMismatch("policy artifact was solved for a different problem")
    solver = doc["solver"]
    config = HsviConfig(init_mode=solver["init"], combined_policy=solver["combined_policy"], eps_vi=solver["eps_vi"])
    lower, _ = initial_bounds(problem, model, config)
    table = BoundTable("lower", lower.init_rule, problem.base.terminal_states)
    for s, entries, v in doc["lower_points"]:
        table.stored[(int(s), tuple((int(i), int(q)) for i, q in entries))] = float(v)
    return GreedyPolicy(bm, table)


def cmd_evaluate(args) -> int:
    t0 = time.monotonic()
    cfg = _resolve(args, grid_keys=True)
    spec, problem, model = _setup(args, cfg)
    bm = BeliefMdp(problem, model)
    policy = _policy(cfg, spec, problem, model, bm)
    report = evaluate(problem, model, policy, int(cfg["n_traj"]), int(cfg["seed"]), int(cfg["horizon_cap"]), bmdp=bm)
    out = Path(args.out)
    outputs: list = []
    _write(out, "report.json", report.to_json(), outputs)
    inputs = {args.grid: _sha256(_read(args.grid))}
    if cfg.get("artifact"):
        inputs[str(cfg["artifact"])] = _sha256(_read(str(_artifact_path(cfg["artifact"]))))
    _manifest(out, "evaluate", cfg, inputs, t0, outputs)
    print(f"V criterion {report.mean_return_criterion:.6f} +- {report.std_error_criterion:.6f}")
    print(f"V observer  {report.mean_return_observer:.6f} +- {report.std_error_observer:.6f}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.monotonic()
    cfg = _resolve(args, grid_keys=True)
    if cfg["format"] not in ("csv", "json"):
        raise InputError(f"unknown format {cfg['format']!r}")
    spec, problem, model = _setup(args, cfg)
    bm = BeliefMdp(problem, model)
    policy = _policy(cfg, spec, problem, model, bm)
    record = simulate(problem, model, policy, int(cfg["seed"]), int(cfg["horizon_cap"]), bmdp=bm)
    out = Path(args.out)
    outputs: list = []
    _write(out, f"trajectory.{cfg['format']}", export_trajectory(record, cfg["format"]), outputs)
    _manifest(out, "simulate", cfg, {args.grid: _sha256(_read(args.grid))}, t0, outputs)
    rc, ro = record.returns(problem.gamma)
    print(f"{len(record.steps)} steps, terminated={record.terminated}, return {rc:.6f} (observer {ro:.6f})")
    return EXIT_OK


def cmd_convert(args) -> int:
    t0 = time.monotonic()
    cfg = _resolve(args, grid_keys=False)
    raw = _read(args.spec)
    try:
        oamdp = oamdp_from_json(raw.decode("utf-8"))
        problem = convert(oamdp)
    except (ValueError, UnicodeDecodeError) as exc:
        raise InputError(f"{args.spec}: {exc}") from None
    out = Path(args.out)
    outputs: list = []
    _write(out, "problem.json", json.dumps(problem_to_dict(problem)) + "\n", outputs)
    _manifest(out, "convert", cfg, {args.spec: _sha256(raw)}, t0, outputs)
    print(f"converted: {problem.n_states} states, {problem.n_observations} observations")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _common(p: argparse.ArgumentParser, grid: bool = True):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON file with option values; flags override it")
    if not grid:
        return
    p.add_argument("--criterion", choices=CRITERION_FLAGS)
    p.add_argument("--gamma", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--robs-weight", dest="robs_weight", type=float)
    p.add_argument("--pobs", type=float)
    p.add_argument("--eps-vi", dest="eps_vi", type=float)


def _policy_args(p: argparse.ArgumentParser):
    p.add_argument("--policy", choices=("hsvi", "pi-obs", "mdp-greedy"))
    p.add_argument("--artifact", help="solve output directory or policy.json (for --policy hsvi)")
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon-cap", dest="horizon_cap", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poamdp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=_version())
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run HSVI on a grid")
    p.add_argument("grid")
    _common(p)
    p.add_argument("--eps-hsvi", dest="eps_hsvi", type=float)
    p.add_argument("--timeout-secs", dest="timeout_secs", type=float)
    p.add_argument("--init", choices=("naive", "combined"))
    p.add_argument("--combined-policy", dest="combined_policy", choices=("pi-obs", "pi-star"))
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("evaluate", help="Monte Carlo value of a policy")
    p.add_argument("grid")
    _common(p)
    _policy_args(p)
    p.add_argument("--n-traj", dest="n_traj", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="record one trajectory with the observer's beliefs")
    p.add_argument("grid")
    _common(p)
    _policy_args(p)
    p.add_argument("--format", choices=("csv", "json"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("convert", help="convert an OAMDP JSON spec to a PO-OAMDP")
    p.add_argument("spec")
    _common(p, grid=False)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ArtifactMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
