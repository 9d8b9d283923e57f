"""Declarative experiment configuration.

A config is a JSON document (line and block comments allowed) that pins
everything a run needs: the plant, the excitation experiment, the
controller parameters, and the target schedule. Validation is strict;
unknown or missing keys are reported with their full path so a typo in a
nested block is findable without reading this file.
"""

import json
from pathlib import Path

import numpy as np

from .closed_loop import Experiment, TargetSchedule
from .equilibria import TargetSetpoint
from .mpc import MpcConfig
from .plant import SystemRealization, four_tank, random_minimal
from .qp import QpSettings
from .sets import BoxSet

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Config rejected; the message names the offending key path."""


def strip_comments(text):
    """Remove // line and /* block */ comments, respecting strings."""
    out = []
    i = 0
    n = len(text)
    in_string = False
    while i < n:
        ch = text[i]
        if in_string:
            out.append(ch)
            if ch == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 2
                continue
            if ch == '"':
                in_string = False
            i += 1
            continue
        if ch == '"':
            in_string = True
            out.append(ch)
            i += 1
            continue
        if ch == "/" and i + 1 < n and text[i + 1] == "/":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch == "/" and i + 1 < n and text[i + 1] == "*":
            i += 2
            while i + 1 < n and not (text[i] == "*" and text[i + 1] == "/"):
                i += 1
            i += 2
            continue
        out.append(ch)
        i += 1
    return "".join(out)


def _check_keys(obj, path, required, optional=()):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    allowed = set(required) | set(optional)
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    for key in required:
        if key not in obj:
            raise ConfigError(f"{path}.{key}: missing required key")


def _number(obj, path):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    return float(obj)


def _integer(obj, path):
    if isinstance(obj, bool) or not isinstance(obj, int):
        raise ConfigError(f"{path}: expected an integer")
    return int(obj)


def _vector(obj, path):
    if not isinstance(obj, list) or not obj:
        raise ConfigError(f"{path}: expected a nonempty array of numbers")
    return np.array([_number(v, f"{path}[{i}]") for i, v in enumerate(obj)])


def _matrix(obj, path):
    if not isinstance(obj, list) or not obj:
        raise ConfigError(f"{path}: expected a nonempty array of rows")
    rows = [
        _vector(row, f"{path}[{i}]") for i, row in enumerate(obj)]
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ConfigError(f"{path}: rows have differing lengths")
    return np.array(rows)


def _weight(obj, path):
    # scalar weight or an explicit matrix
    if isinstance(obj, list):
        return _matrix(obj, path)
    return _number(obj, path)


def _box(obj, path):
    _check_keys(obj, path, required=("lower", "upper"))
    try:
        return BoxSet(_vector(obj["lower"], f"{path}.lower"),
                      _vector(obj["upper"], f"{path}.upper"))
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from err


_SOLVER_KEYS = ("eps_abs", "eps_rel", "max_iter", "rho", "sigma",
                "over_relaxation", "adaptive_rho_interval", "scaling_iters",
                "polish", "eps_infeasible", "check_interval")


def _solver(obj, path):
    _check_keys(obj, path, required=(), optional=_SOLVER_KEYS)
    kwargs = {}
    for key, val in obj.items():
        place = f"{path}.{key}"
        if key == "polish":
            if not isinstance(val, bool):
                raise ConfigError(f"{place}: expected true or false")
            kwargs[key] = val
        elif key in ("max_iter", "adaptive_rho_interval", "scaling_iters",
                     "check_interval"):
            kwargs[key] = _integer(val, place)
        else:
            kwargs[key] = _number(val, place)
    try:
        return QpSettings(**kwargs)
    except ValueError as err:
        raise ConfigError(f"{path}: {err}") from err


def _plant(obj, path):
    _check_keys(obj, path, required=("kind",),
                optional=("order", "inputs", "outputs", "seed",
                          "spectral_radius", "a", "b", "c", "d"))
    kind = obj["kind"]
    if kind == "four_tank":
        extras = set(obj) - {"kind"}
        if extras:
            raise ConfigError(
                f"{path}.{sorted(extras)[0]}: not a four_tank field")
        return four_tank()
    if kind == "random":
        _check_keys(obj, path,
                    required=("kind", "order", "inputs", "outputs", "seed"),
                    optional=("spectral_radius",))
        kwargs = {}
        if "spectral_radius" in obj:
            kwargs["spectral_radius"] = _number(
                obj["spectral_radius"], f"{path}.spectral_radius")
        return random_minimal(
            _integer(obj["order"], f"{path}.order"),
            _integer(obj["inputs"], f"{path}.inputs"),
            _integer(obj["outputs"], f"{path}.outputs"),
            seed=_integer(obj["seed"], f"{path}.seed"), **kwargs)
    if kind == "matrices":
        _check_keys(obj, path, required=("kind", "a", "b", "c"),
                    optional=("d",))
        a = _matrix(obj["a"], f"{path}.a")
        b = _matrix(obj["b"], f"{path}.b")
        c = _matrix(obj["c"], f"{path}.c")
        d = (_matrix(obj["d"], f"{path}.d") if "d" in obj
             else np.zeros((c.shape[0], b.shape[1])))
        try:
            return SystemRealization(a, b, c, d)
        except ValueError as err:
            raise ConfigError(f"{path}: {err}") from err
    raise ConfigError(
        f"{path}.kind: must be four_tank, random, or matrices, got {kind!r}")


def _target_entry(obj, path):
    _check_keys(obj, path, required=("y",), optional=("u",))
    y = _vector(obj["y"], f"{path}.y")
    u = _vector(obj["u"], f"{path}.u") if "u" in obj else None
    return TargetSetpoint(y, u)


class RunConfig:
    """A validated configuration document.

    Construction validates everything except cross-field consistency that
    only the controller can check (those surface when the experiment is
    built). The original normalized document is kept for serialization.
    """

    def __init__(self, document):
        doc = document
        _check_keys(doc, "config",
                    required=("schema_version", "plant", "data",
                              "controller", "run"),
                    optional=("name", "target", "schedule", "sweep"))
        version = _integer(doc["schema_version"], "config.schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(
                f"config.schema_version: expected {SCHEMA_VERSION},"
                f" got {version}")
        if ("target" in doc) == ("schedule" in doc):
            raise ConfigError(
                "config: exactly one of 'target' and 'schedule' is required")
        self.name = doc.get("name", "unnamed")
        if not isinstance(self.name, str):
            raise ConfigError("config.name: expected a string")

        self.plant = _plant(doc["plant"], "config.plant")

        data = doc["data"]
        _check_keys(data, "config.data", required=("length", "seed"),
                    optional=("bounds",))
        self.data_length = _integer(data["length"], "config.data.length")
        self.data_seed = _integer(data["seed"], "config.data.seed")
        if "bounds" in data:
            bounds = _vector(data["bounds"], "config.data.bounds")
            if bounds.shape != (2,):
                raise ConfigError(
                    "config.data.bounds: expected [low, high]")
            self.data_bounds = (float(bounds[0]), float(bounds[1]))
        else:
            self.data_bounds = (-1.0, 1.0)

        ctrl = doc["controller"]
        _check_keys(ctrl, "config.controller",
                    required=("horizon", "order", "q_weight", "r_weight",
                              "input_box", "output_box"),
                    optional=("s_weight", "t_weight", "alpha_reg",
                              "shrink_factor", "eq_input_box",
                              "eq_output_box", "solver"))
        kwargs = {
            "horizon": _integer(ctrl["horizon"], "config.controller.horizon"),
            "order": _integer(ctrl["order"], "config.controller.order"),
            "q_weight": _weight(ctrl["q_weight"], "config.controller.q_weight"),
            "r_weight": _weight(ctrl["r_weight"], "config.controller.r_weight"),
            "input_box": _box(ctrl["input_box"], "config.controller.input_box"),
            "output_box": _box(ctrl["output_box"],
                               "config.controller.output_box"),
        }
        if "s_weight" in ctrl:
            kwargs["s_weight"] = _weight(ctrl["s_weight"],
                                         "config.controller.s_weight")
        if "t_weight" in ctrl:
            kwargs["t_weight"] = _weight(ctrl["t_weight"],
                                         "config.controller.t_weight")
        if "alpha_reg" in ctrl:
            kwargs["alpha_reg"] = _number(ctrl["alpha_reg"],
                                          "config.controller.alpha_reg")
        if "shrink_factor" in ctrl:
            kwargs["shrink_factor"] = _number(
                ctrl["shrink_factor"], "config.controller.shrink_factor")
        if "eq_input_box" in ctrl:
            kwargs["eq_input_box"] = _box(ctrl["eq_input_box"],
                                          "config.controller.eq_input_box")
        if "eq_output_box" in ctrl:
            kwargs["eq_output_box"] = _box(ctrl["eq_output_box"],
                                           "config.controller.eq_output_box")
        if "solver" in ctrl:
            kwargs["solver_settings"] = _solver(ctrl["solver"],
                                                "config.controller.solver")
        try:
            self.controller = MpcConfig(**kwargs)
        except ValueError as err:
            raise ConfigError(f"config.controller: {err}") from err

        if "target" in doc:
            self.schedule = TargetSchedule.constant(
                _target_entry(doc["target"], "config.target"))
        else:
            entries = doc["schedule"]
            if not isinstance(entries, list) or not entries:
                raise ConfigError(
                    "config.schedule: expected a nonempty array")
            pairs = []
            for i, entry in enumerate(entries):
                path = f"config.schedule[{i}]"
                _check_keys(entry, path, required=("start", "y"),
                            optional=("u",))
                start = _integer(entry["start"], f"{path}.start")
                pairs.append((start, _target_entry(
                    {k: v for k, v in entry.items() if k != "start"}, path)))
            try:
                self.schedule = TargetSchedule(pairs)
            except ValueError as err:
                raise ConfigError(f"config.schedule: {err}") from err

        run = doc["run"]
        _check_keys(run, "config.run", required=("steps",),
                    optional=("x0", "warmup", "snapshot_times",
                              "settling_band"))
        self.steps = _integer(run["steps"], "config.run.steps")
        self.x0 = (_vector(run["x0"], "config.run.x0")
                   if "x0" in run else None)
        self.warmup = (_matrix(run["warmup"], "config.run.warmup")
                       if "warmup" in run else None)
        if "snapshot_times" in run:
            self.snapshot_times = tuple(
                _integer(v, f"config.run.snapshot_times[{i}]")
                for i, v in enumerate(run["snapshot_times"]))
        else:
            self.snapshot_times = (0, 12, 24, 36, 48)
        self.settling_band = (_number(run["settling_band"],
                                      "config.run.settling_band")
                              if "settling_band" in run else 0.02)

        if "sweep" in doc:
            sweep = doc["sweep"]
            _check_keys(sweep, "config.sweep", required=("data_seeds",))
            seeds = sweep["data_seeds"]
            if not isinstance(seeds, list) or not seeds:
                raise ConfigError(
                    "config.sweep.data_seeds: expected a nonempty array")
            self.sweep_seeds = tuple(
                _integer(s, f"config.sweep.data_seeds[{i}]")
                for i, s in enumerate(seeds))
        else:
            self.sweep_seeds = None

        self.document = document

    @property
    def first_target(self):
        return self.schedule.entries[0][1]

    def experiment(self, data_seed=None):
        """Build the Experiment this config describes.

        Args:
            data_seed: Optional override of the excitation seed.
        """
        try:
            return Experiment(
                plant=self.plant, config=self.controller,
                schedule=self.schedule, t_sim=self.steps,
                data_length=self.data_length, data_bounds=self.data_bounds,
                data_seed=self.data_seed if data_seed is None else data_seed,
                x0=self.x0, warmup=self.warmup,
                snapshot_times=self.snapshot_times,
                settling_band=self.settling_band)
        except ValueError as err:
            raise ConfigError(f"config: {err}") from err

    def sweep_experiments(self):
        """Experiments keyed ``seed-<k>``, one per sweep seed."""
        if self.sweep_seeds is None:
            raise ConfigError("config.sweep: missing")
        return {f"seed-{s}": self.experiment(data_seed=s)
                for s in self.sweep_seeds}


def loads(text):
    """Parse config text (JSON with comments) into a RunConfig."""
    try:
        document = json.loads(strip_comments(text))
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: {err}") from err
    return RunConfig(document)


def load(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err}") from err
    return loads(text)


def dumps(cfg):
    """Serialize back to canonical JSON (comments are not preserved)."""
    return json.dumps(cfg.document, indent=2) + "\n"
