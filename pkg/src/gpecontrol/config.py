"""INI run configuration.

Times are given in ms and lengths in um; the ``[units]`` block declares how
many ms and um one dimensionless unit corresponds to. Energies (trap
coefficients, ``kappa``) and ``gamma`` are dimensionless. Everything handed
to the numerical core is dimensionless. Relative file paths are resolved
against the directory of the config file; the output directory is
relative to the working directory.

Example::

    [units]
    mass = 1.0
    time_scale_ms = 0.25
    length_scale_um = 0.5

    [grid]
    n_points = 256
    x_min = -8.0
    x_max = 8.0

    [trap]
    kind = quartic_anharmonic
    coefficients = 0.5, 0.15
    kappa = 1.0
    lambda0 = 0.0
    lambdaT = 0.0

    [propagation]
    dt = 0.005
    T = 8.0

    [filter]
    kind = critically_damped
    tau_star = 0.5
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import control as ctl
from .grid import Grid1D, UnitSystem
from .optimizer import DIRECTIONS, SMOOTHING_MODES, OptimizerSettings
from .potentials import TRAP_KINDS, TrapPotential

FILTER_KINDS = ("none",) + ctl.KERNEL_KINDS

# section -> key -> (type, default); REQUIRED marks mandatory keys
REQUIRED = object()
SCHEMA = {
    "units": {
        "mass": (float, 1.0),
        "time_scale_ms": (float, 1.0),
        "length_scale_um": (float, 1.0),
    },
    "grid": {
        "n_points": (int, REQUIRED),
        "x_min": (float, REQUIRED),
        "x_max": (float, REQUIRED),
    },
    "trap": {
        "kind": (str, REQUIRED),
        "coefficients": ("floats", REQUIRED),
        "kappa": (float, 0.0),
        "lambda0": (float, 0.0),
        "lambdaT": (float, 0.0),
    },
    "propagation": {
        "dt": (float, REQUIRED),
        "T": (float, REQUIRED),
        "T_star": (float, None),
        "store_every": (int, 1),
    },
    "filter": {
        "kind": (str, "none"),
        "tau_star": (float, None),
        "cutoff": (float, None),
        "file": (str, None),
    },
    "optimizer": {
        "gamma": (float, 1e-9),
        "max_iterations": (int, 500),
        "gradient_tolerance": (float, 1e-8),
        "cost_tolerance": (float, 1e-4),
        "smoothing": (str, "L2"),
        "direction": (str, "conjugate"),
        "initial_step": (float, None),
        "guess_amplitude": (float, 0.0),
        "seed": (int, 0),
    },
    "stationary": {
        "tolerance": (float, 1e-10),
        "dt": (float, None),
        "max_steps": (int, 200_000),
    },
    "sweep": {
        "horizons": ("floats", None),
        "workers": (int, 1),
    },
    "output": {
        "directory": (str, "results"),
    },
}


class ConfigError(ValueError):
    """Invalid or incomplete configuration; ``key`` names the culprit."""

    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


def _convert(raw, kind, key):
    try:
        if kind == "floats":
            values = tuple(float(v) for v in raw.replace(";", ",").split(",") if v.strip())
            if not values:
                raise ValueError("empty list")
            return values
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} ({exc})", key) from None


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration in reporting units, plus its source."""

    values: dict
    source: Path | None = None
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    # derived objects (dimensionless) ------------------------------------
    @property
    def units(self) -> UnitSystem:
        u = self.values["units"]
        return UnitSystem(u["mass"], u["time_scale_ms"], u["length_scale_um"])

    @property
    def grid(self) -> Grid1D:
        g = self.values["grid"]
        units = self.units
        return Grid1D(g["n_points"], units.length_to_units(g["x_min"]), units.length_to_units(g["x_max"]))

    @property
    def trap(self) -> TrapPotential:
        t = self.values["trap"]
        return TrapPotential(t["kind"], t["coefficients"])

    @property
    def dt(self) -> float:
        return self.units.time_to_units(self.values["propagation"]["dt"])

    def kernel(self):
        """Filter kernel or ``None``."""
        f = self.values["filter"]
        kind = f["kind"]
        if kind == "none":
            return None
        units = self.units
        dt = self.dt
        if kind == "tabulated":
            return ctl.load_kernel(self.resolve(f["file"]), dt, t_scale=units.time_scale_ms_per_unit)
        if kind == "impulse":
            return ctl.make_kernel("impulse", dt)
        if f["cutoff"] is not None:
            cutoff = f["cutoff"] * units.time_scale_ms_per_unit
        else:
            cutoff = ctl.cutoff_for_response_time(kind, units.time_to_units(f["tau_star"]))
        return ctl.make_kernel(kind, dt, cutoff=cutoff)

    def horizons(self, T_ms=None):
        """``(T, T*)`` in dimensionless units for horizon ``T_ms``."""
        units = self.units
        p = self.values["propagation"]
        T = units.time_to_units(p["T"] if T_ms is None else T_ms)
        kernel = self.kernel()
        tau = 0.0 if kernel is None else kernel.tau_star
        T_star = T + tau
        if T_ms is None and p["T_star"] is not None:
            given = units.time_to_units(p["T_star"])
            if abs(given - T_star) > 0.5 * self.dt:
                raise ConfigError(
                    f"T* = {p['T_star']} ms is inconsistent with T + tau* = "
                    f"{units.time_to_ms(T_star):.6g} ms", "propagation.T_star")
        return T, T_star

    def optimizer_settings(self, seed=None) -> OptimizerSettings:
        o = self.values["optimizer"]
        units = self.units
        kw = dict(
            max_iterations=o["max_iterations"],
            gradient_tolerance=o["gradient_tolerance"],
            cost_tolerance=o["cost_tolerance"],
            smoothing=o["smoothing"],
            direction=o["direction"],
            guess_amplitude=units.length_to_units(o["guess_amplitude"]),
            seed=o["seed"] if seed is None else seed,
        )
        if o["initial_step"] is not None:
            kw["initial_step"] = units.length_to_units(o["initial_step"])
        return OptimizerSettings(**kw)

    def imaginary_dt(self) -> float:
        s = self.values["stationary"]
        return self.dt if s["dt"] is None else self.units.time_to_units(s["dt"])

    def sweep_horizons(self):
        h = self.values["sweep"]["horizons"]
        return (self.values["propagation"]["T"],) if h is None else h

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def _validate(values, base_dir):
    def positive(dotted):
        section, key = dotted.split(".")
        v = values[section][key]
        if v is not None and not v > 0:
            raise ConfigError(f"must be positive, got {v}", dotted)

    for dotted in ("units.mass", "units.time_scale_ms", "units.length_scale_um", "propagation.dt",
                   "propagation.T", "propagation.store_every", "optimizer.gamma", "stationary.tolerance",
                   "stationary.dt", "filter.tau_star", "filter.cutoff", "sweep.workers",
                   "optimizer.initial_step", "optimizer.cost_tolerance"):
        positive(dotted)
    if values["grid"]["n_points"] < 8:
        raise ConfigError("need at least 8 points", "grid.n_points")
    if not values["grid"]["x_max"] > values["grid"]["x_min"]:
        raise ConfigError("x_max must exceed x_min", "grid.x_max")
    if values["trap"]["kind"] not in TRAP_KINDS:
        raise ConfigError(f"unknown trap kind; expected one of {TRAP_KINDS}", "trap.kind")
    if values["trap"]["kappa"] < 0:
        raise ConfigError("must be non-negative", "trap.kappa")
    try:
        TrapPotential(values["trap"]["kind"], values["trap"]["coefficients"])
    except ValueError as exc:
        raise ConfigError(str(exc), "trap.coefficients") from None
    f = values["filter"]
    if f["kind"] not in FILTER_KINDS:
        raise ConfigError(f"unknown filter kind; expected one of {FILTER_KINDS}", "filter.kind")
    if f["kind"] in ("exponential", "critically_damped") and (f["tau_star"] is None) == (f["cutoff"] is None):
        raise ConfigError("give exactly one of tau_star or cutoff", "filter.tau_star")
    if f["kind"] == "tabulated":
        if f["file"] is None:
            raise ConfigError("tabulated filter needs a file", "filter.file")
        path = Path(f["file"]) if Path(f["file"]).is_absolute() else base_dir / f["file"]
        if not path.is_file():
            raise ConfigError(f"kernel file {path} does not exist", "filter.file")
    if values["optimizer"]["smoothing"] not in SMOOTHING_MODES:
        raise ConfigError(f"expected one of {SMOOTHING_MODES}", "optimizer.smoothing")
    if values["optimizer"]["direction"] not in DIRECTIONS:
        raise ConfigError(f"expected one of {DIRECTIONS}", "optimizer.direction")
    if values["optimizer"]["max_iterations"] < 0:
        raise ConfigError("must be non-negative", "optimizer.max_iterations")
    if values["sweep"]["horizons"] is not None and min(values["sweep"]["horizons"]) <= 0:
        raise ConfigError("horizons must be positive", "sweep.horizons")


def parse_config(text, source=None, overrides=()) -> RunConfig:
    """Parse INI text into a validated :class:`RunConfig`.

    ``overrides`` are ``section.key=value`` strings applied on top.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(source or "<config>"))
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}".replace("\n", " ")) from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value", item)
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value.strip())

    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section)
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", f"{section}.{key}")

    values = {}
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (kind, default) in keys.items():
            dotted = f"{section}.{key}"
            if parser.has_option(section, key) and parser[section][key].strip() != "":
                values[section][key] = _convert(parser[section][key].strip(), kind, dotted)
            elif default is REQUIRED:
                raise ConfigError("missing required key", dotted)
            else:
                values[section][key] = default
    base_dir = Path(source).resolve().parent if source else Path.cwd()
    _validate(values, base_dir)
    return RunConfig(values, Path(source) if source else None, base_dir)


def shipped_scenarios():
    """Names of the scenario files bundled with the package."""
    root = resources.files("gpecontrol") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def scenario_path(name) -> Path:
    """Path of a bundled scenario (``.cfg`` suffix optional)."""
    name = name if name.endswith(".cfg") else name + ".cfg"
    path = Path(str(resources.files("gpecontrol") / "scenarios" / name))
    if not path.is_file():
        raise ConfigError(f"no shipped scenario {name!r}; available: {shipped_scenarios()}", "config")
    return path


def load_config(path, overrides=()) -> RunConfig:
    """Read a config file; bare names fall back to the shipped scenarios."""
    p = Path(path)
    if not p.is_file():
        if p.parent == Path(".") or str(p.parent) == "":
            p = scenario_path(p.name)
        else:
            raise ConfigError(f"config file {path} does not exist", "config")
    try:
        text = p.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {p}: {exc}", "config") from None
    if not text.strip():
        raise ConfigError("configuration is empty", "config")
    return parse_config(text, p, overrides)
