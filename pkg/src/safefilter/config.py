"""Strict YAML run configuration: unknown keys are rejected, since a silently
ignored typo in a safety parameter is itself a safety hazard. Units are SI.

See the README for the full schema. Every run emits a resolved copy of its
configuration next to its outputs for reproducibility.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from .cbf import builtin_barrier_double_integrator, cbf_qp_filter
from .dynamics import (
    MarginFunction,
    SystemModel,
    discretize_box,
    make_double_integrator,
    make_dubins_car,
    make_inverted_pendulum,
    make_linear_model,
    margin_halfspace,
    margin_keepout_ball,
    margin_min,
)
from .exploration import (
    exploration_filter,
    load_occupancy_world,
    make_planar_double_integrator,
)
from .filters import SafetyFilter, least_restrictive_filter, passthrough_filter
from .intervals import Box
from .reachability import ValueGrid, load_value_grid, solve
from .shielding import (
    braking_fallback,
    braking_terminal_set,
    mps_filter,
    optimal_fallback,
    value_grid_terminal_set,
)
from .tube_mpc import tube_mpc_filter
from . import harness


class ConfigError(ValueError):
    """Malformed or unknown configuration content (message names the key path)."""


_TOP_KEYS = {"model", "margin", "grid", "filter", "harness", "verify", "output", "compare"}


def load_config(path) -> dict:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config parse error: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping of sections")
    _check_keys(data, _TOP_KEYS, "")
    return data


def _check_keys(mapping, allowed, path) -> None:
    if not isinstance(mapping, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    unknown = set(mapping) - set(allowed)
    if unknown:
        key = sorted(unknown)[0]
        loc = f"{path}.{key}" if path else key
        raise ConfigError(f"unknown config key {loc!r}")


def _require(mapping, key, path):
    if key not in mapping:
        loc = f"{path}.{key}" if path else key
        raise ConfigError(f"missing config key {loc!r}")
    return mapping[key]


def _number(mapping, key, path, default=None):
    if key not in mapping:
        if default is not None:
            return default
        loc = f"{path}.{key}" if path else key
        raise ConfigError(f"missing config key {loc!r}")
    val = mapping[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"config key {path}.{key} must be a number")
    return float(val)


def _vector(mapping, key, path):
    val = _require(mapping, key, path)
    try:
        return np.asarray(val, dtype=np.float64).reshape(-1)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {path}.{key} must be a numeric list") from e


def _matrix(mapping, key, path):
    val = _require(mapping, key, path)
    try:
        arr = np.asarray(val, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {path}.{key} must be a numeric matrix") from e
    if arr.ndim != 2:
        raise ConfigError(f"config key {path}.{key} must be a 2-d matrix")
    return arr


# --- model -------------------------------------------------------------------

_MODEL_KEYS = {
    "double_integrator": {"kind", "u_max", "d_max", "dt"},
    "dubins_car": {"kind", "speed", "omega_max", "d_max", "dt"},
    "inverted_pendulum": {"kind", "torque_max", "d_max", "dt"},
    "planar_double_integrator": {"kind", "u_max", "dt"},
    "linear": {
        "kind", "a", "b", "control_lower", "control_upper",
        "dist_lower", "dist_upper", "dt",
    },
}


def build_model(cfg: dict) -> SystemModel:
    kind = _require(cfg, "kind", "model")
    if kind not in _MODEL_KEYS:
        raise ConfigError(f"unknown model.kind {kind!r}")
    _check_keys(cfg, _MODEL_KEYS[kind], "model")
    try:
        if kind == "double_integrator":
            return make_double_integrator(
                _number(cfg, "u_max", "model"),
                _number(cfg, "d_max", "model", 0.0),
                _number(cfg, "dt", "model"),
            )
        if kind == "dubins_car":
            return make_dubins_car(
                _number(cfg, "speed", "model"),
                _number(cfg, "omega_max", "model"),
                _number(cfg, "d_max", "model", 0.0),
                _number(cfg, "dt", "model"),
            )
        if kind == "inverted_pendulum":
            return make_inverted_pendulum(
                _number(cfg, "torque_max", "model"),
                _number(cfg, "d_max", "model", 0.0),
                _number(cfg, "dt", "model"),
            )
        if kind == "planar_double_integrator":
            return make_planar_double_integrator(
                _number(cfg, "u_max", "model"), _number(cfg, "dt", "model")
            )
        control = Box(_vector(cfg, "control_lower", "model"), _vector(cfg, "control_upper", "model"))
        if "dist_lower" in cfg or "dist_upper" in cfg:
            dist = Box(_vector(cfg, "dist_lower", "model"), _vector(cfg, "dist_upper", "model"))
        else:
            dist = Box([], [])
        return make_linear_model(
            _matrix(cfg, "a", "model"), _matrix(cfg, "b", "model"),
            control, dist, _number(cfg, "dt", "model", 1.0),
        )
    except ValueError as e:
        raise ConfigError(f"invalid model parameters: {e}") from e


# --- margin ------------------------------------------------------------------


def build_margin(cfg: dict, path: str = "margin") -> MarginFunction:
    kind = _require(cfg, "kind", path)
    try:
        if kind == "halfspace":
            _check_keys(cfg, {"kind", "normal", "offset"}, path)
            return margin_halfspace(_vector(cfg, "normal", path), _number(cfg, "offset", path))
        if kind == "ball":
            _check_keys(cfg, {"kind", "center", "radius"}, path)
            return margin_keepout_ball(_vector(cfg, "center", path), _number(cfg, "radius", path))
        if kind == "min":
            _check_keys(cfg, {"kind", "parts"}, path)
            parts = _require(cfg, "parts", path)
            if not isinstance(parts, list) or not parts:
                raise ConfigError(f"{path}.parts must be a nonempty list")
            return margin_min(
                [build_margin(p, f"{path}.parts[{i}]") for i, p in enumerate(parts)]
            )
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"invalid margin parameters: {e}") from e
    raise ConfigError(f"unknown {path}.kind {kind!r}")


def margin_halfspaces(cfg: dict, path: str = "margin") -> list[tuple[np.ndarray, float]]:
    """Flatten a halfspace / min-of-halfspaces margin config to (normal, offset) pairs."""
    kind = _require(cfg, "kind", path)
    if kind == "halfspace":
        return [(_vector(cfg, "normal", path), _number(cfg, "offset", path))]
    if kind == "min":
        out = []
        for i, p in enumerate(_require(cfg, "parts", path)):
            out.extend(margin_halfspaces(p, f"{path}.parts[{i}]"))
        return out
    raise ConfigError(f"{path}: tube MPC needs halfspace margins, got {kind!r}")


# --- grid --------------------------------------------------------------------


@dataclass(frozen=True)
class GridSettings:
    domain: Box
    shape: tuple[int, ...]
    u_counts: list[int]
    d_counts: list[int]
    tolerance: float
    max_iters: int


def build_grid_settings(cfg: dict) -> GridSettings:
    _check_keys(
        cfg,
        {"lower", "upper", "shape", "u_counts", "d_counts", "tolerance", "max_iters"},
        "grid",
    )
    lower = _vector(cfg, "lower", "grid")
    upper = _vector(cfg, "upper", "grid")
    shape = tuple(int(s) for s in _vector(cfg, "shape", "grid"))
    tolerance = _number(cfg, "tolerance", "grid", 1e-6)
    if tolerance <= 0:
        raise ConfigError("grid.tolerance must be positive")
    max_iters = int(_number(cfg, "max_iters", "grid", 1000))
    u_counts = [int(c) for c in cfg.get("u_counts", [3])]
    d_counts = [int(c) for c in cfg.get("d_counts", [2])]
    try:
        domain = Box(lower, upper)
    except ValueError as e:
        raise ConfigError(f"invalid grid domain: {e}") from e
    return GridSettings(domain, shape, u_counts, d_counts, tolerance, max_iters)


def solve_or_load_grid(
    model: SystemModel,
    margin: MarginFunction,
    settings: GridSettings,
    value_grid_path: Optional[str] = None,
):
    if value_grid_path is not None:
        return load_value_grid(value_grid_path), None
    grid, report = solve(
        model, margin, (settings.domain, settings.shape),
        settings.u_counts, settings.d_counts, settings.tolerance, settings.max_iters,
    )
    return grid, report


# --- filter ------------------------------------------------------------------

_FILTER_KEYS = {
    "none": {"kind"},
    "least_restrictive": {"kind", "value_grid"},
    "cbf_qp": {"kind", "kappa", "wall"},
    "mps": {"kind", "horizon", "fallback", "terminal", "value_grid"},
    "tube_mpc": {"kind", "gain", "terminal_lower", "terminal_upper", "horizon"},
    "exploration": {"kind", "sensor_radius", "horizon", "world", "cell_size"},
}


@dataclass
class FilterBundle:
    """A built filter plus the artifacts other sections may need."""

    filter: SafetyFilter
    grid: Optional[ValueGrid] = None


def build_filter(
    cfg: dict,
    model: SystemModel,
    margin: MarginFunction,
    margin_cfg: dict,
    grid_settings: Optional[GridSettings],
    base_dir: str = ".",
) -> FilterBundle:
    kind = _require(cfg, "kind", "filter")
    if kind not in _FILTER_KEYS:
        raise ConfigError(f"unknown filter.kind {kind!r}")
    _check_keys(cfg, _FILTER_KEYS[kind], "filter")

    def _grid():
        if grid_settings is None:
            raise ConfigError("this filter kind needs a [grid] section")
        path = cfg.get("value_grid")
        if path is not None:
            path = os.path.join(base_dir, path)
        grid, _ = solve_or_load_grid(model, margin, grid_settings, path)
        return grid

    try:
        if kind == "none":
            return FilterBundle(passthrough_filter(model))
        if kind == "least_restrictive":
            grid = _grid()
            u_cands = discretize_box(model.control_set, grid_settings.u_counts)
            d_cands = discretize_box(
                model.disturbance_set,
                grid_settings.d_counts if model.disturbance_dim else [],
            )
            return FilterBundle(
                least_restrictive_filter(model, grid, u_cands, d_cands), grid
            )
        if kind == "cbf_qp":
            u_max = float(model.control_set.upper[0])
            kappa = _number(cfg, "kappa", "filter", 0.5 / model.dt)
            wall = _number(cfg, "wall", "filter", 0.0)
            barrier = builtin_barrier_double_integrator(u_max, kappa, wall)
            return FilterBundle(cbf_qp_filter(model, barrier))
        if kind == "mps":
            horizon = int(_number(cfg, "horizon", "filter"))
            fb_cfg = _require(cfg, "fallback", "filter")
            term_cfg = _require(cfg, "terminal", "filter")
            grid = None
            fb_kind = _require(fb_cfg, "kind", "filter.fallback")
            if fb_kind == "braking":
                _check_keys(fb_cfg, {"kind", "v_tol"}, "filter.fallback")
                fallback = braking_fallback(model, _number(fb_cfg, "v_tol", "filter.fallback"))
            elif fb_kind == "optimal":
                _check_keys(fb_cfg, {"kind"}, "filter.fallback")
                grid = _grid()
                u_cands = discretize_box(model.control_set, grid_settings.u_counts)
                d_cands = discretize_box(
                    model.disturbance_set,
                    grid_settings.d_counts if model.disturbance_dim else [],
                )
                fallback = optimal_fallback(model, grid, u_cands, d_cands)
            else:
                raise ConfigError(f"unknown filter.fallback.kind {fb_kind!r}")
            term_kind = _require(term_cfg, "kind", "filter.terminal")
            if term_kind == "braking":
                _check_keys(
                    term_cfg, {"kind", "v_tol", "safe_lower", "safe_upper"}, "filter.terminal"
                )
                terminal = braking_terminal_set(
                    model,
                    _number(term_cfg, "v_tol", "filter.terminal"),
                    Box(
                        _vector(term_cfg, "safe_lower", "filter.terminal"),
                        _vector(term_cfg, "safe_upper", "filter.terminal"),
                    ),
                )
            elif term_kind == "value_grid":
                _check_keys(term_cfg, {"kind"}, "filter.terminal")
                if grid is None:
                    grid = _grid()
                terminal = value_grid_terminal_set(grid)
            else:
                raise ConfigError(f"unknown filter.terminal.kind {term_kind!r}")
            return FilterBundle(
                mps_filter(model, fallback, terminal, margin, horizon), grid
            )
        if kind == "tube_mpc":
            if model.name != "linear":
                raise ConfigError("tube_mpc needs model.kind = linear")
            A = np.zeros((model.state_dim, model.state_dim))
            B = np.zeros((model.state_dim, model.control_dim))
            # recover A, B from the linear step map (exact for linear models)
            for i in range(model.state_dim):
                e = np.zeros(model.state_dim)
                e[i] = 1.0
                A[:, i] = model.step(e, np.zeros(model.control_dim), model.zero_disturbance())
            for i in range(model.control_dim):
                e = np.zeros(model.control_dim)
                e[i] = 1.0
                B[:, i] = model.step(np.zeros(model.state_dim), e, model.zero_disturbance())
            flt = tube_mpc_filter(
                A,
                B,
                _matrix(cfg, "gain", "filter"),
                model.control_set,
                model.disturbance_set,
                margin_halfspaces(margin_cfg),
                Box(
                    _vector(cfg, "terminal_lower", "filter"),
                    _vector(cfg, "terminal_upper", "filter"),
                ),
                int(_number(cfg, "horizon", "filter")),
            )
            return FilterBundle(flt)
        # exploration
        world = load_occupancy_world(
            os.path.join(base_dir, str(_require(cfg, "world", "filter"))),
            _number(cfg, "cell_size", "filter"),
        )
        flt = exploration_filter(
            model,
            _number(cfg, "sensor_radius", "filter"),
            world,
            int(_number(cfg, "horizon", "filter")),
        )
        return FilterBundle(flt)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(f"invalid filter configuration: {e}") from e


# --- harness policies ----------------------------------------------------------

_HARNESS_KEYS = {
    "x0", "steps", "seeds", "task", "disturbance", "goal", "control_weight",
}


@dataclass
class HarnessSettings:
    x0: np.ndarray
    steps: int
    seeds: list[int]
    scenario_goal: Optional[np.ndarray]
    control_weight: float
    task_cfg: dict
    disturbance_cfg: dict


def build_harness_settings(cfg: dict) -> HarnessSettings:
    _check_keys(cfg, _HARNESS_KEYS, "harness")
    x0 = _vector(cfg, "x0", "harness")
    steps = int(_number(cfg, "steps", "harness"))
    seeds = cfg.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("harness.seeds must be a list of integers")
    goal = np.asarray(cfg["goal"], dtype=np.float64) if "goal" in cfg else None
    weight = _number(cfg, "control_weight", "harness", 0.1)
    task_cfg = cfg.get("task", {"kind": "constant", "value": []})
    dist_cfg = cfg.get("disturbance", {"kind": "zero"})
    return HarnessSettings(x0, steps, list(seeds), goal, weight, task_cfg, dist_cfg)


def build_task_policy(
    cfg: dict,
    model: SystemModel,
    margin: MarginFunction,
    grid_settings: Optional[GridSettings],
):
    kind = _require(cfg, "kind", "harness.task")
    if kind == "goal":
        _check_keys(cfg, {"kind", "gain", "goal"}, "harness.task")
        return harness.proportional_policy(
            _matrix(cfg, "gain", "harness.task"),
            _vector(cfg, "goal", "harness.task"),
            model.control_set,
        )
    if kind == "random":
        _check_keys(cfg, {"kind"}, "harness.task")
        return harness.random_policy(model.control_set)
    if kind == "adversarial":
        _check_keys(cfg, {"kind", "u_counts"}, "harness.task")
        counts = cfg.get(
            "u_counts", grid_settings.u_counts if grid_settings else [3] * model.control_dim
        )
        return harness.margin_descent_policy(
            model, margin, discretize_box(model.control_set, counts)
        )
    if kind == "constant":
        _check_keys(cfg, {"kind", "value"}, "harness.task")
        return harness.constant_policy(_vector(cfg, "value", "harness.task"))
    raise ConfigError(f"unknown harness.task.kind {kind!r}")


def build_disturbance_policy(
    cfg: dict,
    model: SystemModel,
    margin: MarginFunction,
    grid: Optional[ValueGrid],
    grid_settings: Optional[GridSettings],
):
    kind = _require(cfg, "kind", "harness.disturbance")
    if kind == "zero":
        _check_keys(cfg, {"kind"}, "harness.disturbance")
        return harness.zero_disturbance(model)
    if kind == "random":
        _check_keys(cfg, {"kind"}, "harness.disturbance")
        return harness.random_disturbance(model)
    if kind == "constant":
        _check_keys(cfg, {"kind", "value"}, "harness.disturbance")
        return harness.constant_disturbance(_vector(cfg, "value", "harness.disturbance"))
    if kind == "adversarial":
        _check_keys(cfg, {"kind", "d_counts"}, "harness.disturbance")
        if model.disturbance_dim == 0:
            return harness.zero_disturbance(model)
        if grid is None:
            # the adversary steers against the safety value even when the
            # filter under test does not use one (e.g. the unfiltered baseline)
            if grid_settings is None:
                raise ConfigError("adversarial disturbance needs a [grid] section")
            grid, _ = solve_or_load_grid(model, margin, grid_settings)
        counts = cfg.get(
            "d_counts", grid_settings.d_counts if grid_settings else [2] * model.disturbance_dim
        )
        return harness.adversarial_disturbance(
            model, grid, discretize_box(model.disturbance_set, counts)
        )
    raise ConfigError(f"unknown harness.disturbance.kind {kind!r}")


def dump_resolved_config(cfg: dict, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True)
