"""Command line: config parsing, subcommand dispatch and file output.

Configuration is plain text, one ``section.key = value`` per line, ``#``
starting a comment.  Any key can be overridden on the command line with
``--section.key value``.  Usage::

    immersed-fsi run       [config] [--section.key value ...]
    immersed-fsi sweep     [config] ...
    immersed-fsi converge  [config] ...
    immersed-fsi stokes-mms [config] ...
    immersed-fsi check     [config] ...

Exit status: 0 on success, 1 when a run fails (instability, curve leaving
the domain, violated time-step restriction), 2 on a configuration error.
"""

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from .assembly import FluidParams, SolidModel, assemble_operators
from .bench import (GLOBAL_CONV, SPACE_CONV, STOKES_COLUMNS, STUDY_COLUMNS, TIME_CONV, StudyPlan,
                    convergence_study, run_scenario, scenario_by_name, stability_sweep,
                    stokes_mms)
from .diagnostics import EnergyRecord, write_table
from .errors import ConfigError, FsiError, InvalidArgumentError
from .schemes import SCHEMES, SchemeConfig, cfl_check

log = logging.getLogger("immersed_fsi")

SUBCOMMANDS = ("run", "sweep", "converge", "stokes-mms", "check")
STUDY_KINDS = ("TimeConv", "SpaceConv", "GlobalConv")
PRESETS = {"TimeConv": TIME_CONV, "SpaceConv": SPACE_CONV, "GlobalConv": GLOBAL_CONV}


def _positive(x):
    return x > 0


def _nonnegative(x):
    return x >= 0


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    check: object = None
    choices: tuple = None
    listed: bool = False


# ``None`` defaults mean "take the value from the scenario or study preset"
SCHEMA = {
    "scenario.name": Key(str, "auto", choices=("auto", "EllipseRelax", "SteadyCircle")),
    "scenario.R": Key(float, None, _positive),
    "scenario.a": Key(float, None, _positive),
    "scenario.b": Key(float, None, _positive),
    "scenario.cx": Key(float, 0.5),
    "scenario.cy": Key(float, 0.5),
    "scenario.prestressed": Key(bool, False),
    "fluid.rho_f": Key(float, 1.0, _positive),
    "fluid.mu": Key(float, 0.1, _positive),
    "solid.rho_s": Key(float, 1.0, _positive),
    "solid.eps": Key(float, 0.1, _positive),
    "solid.kind": Key(str, "string", choices=("string", "membrane")),
    "solid.lambda0": Key(float, 1.0, _nonnegative),
    "solid.lambda1": Key(float, 10.0, _nonnegative),
    "solid.K_coef": Key(float, 1.0, _nonnegative),
    "scheme.name": Key(str, "monolithic", choices=SCHEMES),
    "scheme.r": Key(int, 1, choices=(0, 1, 2)),
    "scheme.tau": Key(float, 0.05, _positive),
    "scheme.t_final": Key(float, 1.0, _nonnegative),
    "scheme.gamma": Key(float, 0.05, _positive),
    "scheme.frozen": Key(bool, False),
    "mesh.n": Key(int, 16, _positive),
    "study.kind": Key(str, "TimeConv", choices=STUDY_KINDS),
    "study.taus": Key(float, None, _positive, listed=True),
    "study.ns": Key(int, None, _positive, listed=True),
    "study.ref_n": Key(int, None, _positive),
    "study.ref_tau": Key(float, None, _positive),
    "study.t_eval": Key(float, None, _positive),
    "study.ref_scheme": Key(str, "monolithic", choices=SCHEMES),
    "sweep.taus": Key(float, (0.04, 0.08, 0.16, 0.32, 0.64, 1.28), _positive, listed=True),
    "sweep.n": Key(int, 32, _positive),
    "sweep.n_steps": Key(int, 100, _positive),
    "stokes.ns": Key(int, (8, 16, 32, 64), _positive, listed=True),
    "output.dir": Key(str, "out"),
    "output.snapshot_every": Key(int, 0, _nonnegative),
}


def _convert_scalar(kind, text):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    return kind(text)


def convert(name, text, line=None):
    """Typed value of ``text`` for config key ``name``."""
    spec = SCHEMA.get(name)
    if spec is None:
        raise ConfigError(f"unknown key {name!r}", line)
    text = text.strip()
    try:
        if spec.listed:
            value = tuple(_convert_scalar(spec.kind, t) for t in text.replace(",", " ").split())
            if not value:
                raise ValueError("empty list")
            items = value
        else:
            value = _convert_scalar(spec.kind, text)
            items = (value,)
    except ValueError:
        what = f"list of {spec.kind.__name__}" if spec.listed else spec.kind.__name__
        raise ConfigError(f"{name}: expected {what}, got {text!r}", line) from None
    for item in items:
        if spec.choices is not None and item not in spec.choices:
            raise ConfigError(f"{name}: {item!r} is not one of {', '.join(map(str, spec.choices))}",
                              line)
        if spec.check is not None and not spec.check(item):
            raise ConfigError(f"{name}: value {item!r} out of range", line)
    return value


@dataclass
class RunConfig:
    values: dict
    origin: dict

    def __getitem__(self, name):
        return self.values[name]

    def text(self):
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.values.items())

    @property
    def hash(self):
        # where results land does not change what was computed
        body = "".join(f"{k} = {_render(v)}\n" for k, v in self.values.items() if k != "output.dir")
        return hashlib.sha256(body.encode()).hexdigest()[:16]


def _render(value):
    if value is None:
        return "preset"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(path=None, overrides=()):
    """Read ``path`` (optional) and apply ``(key, value)`` overrides."""
    values = {k: spec.default for k, spec in SCHEMA.items()}
    origin = {k: "default" for k in SCHEMA}
    if path is not None:
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        for no, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", no)
            key, text = (s.strip() for s in line.split("=", 1))
            values[key] = convert(key, text, no)
            origin[key] = f"line {no}"
    for key, text in overrides:
        try:
            values[key] = convert(key, text)
        except ConfigError as exc:
            raise ConfigError(f"flag --{key}: {exc}") from None
        origin[key] = "flag"
    defaulted = [k for k, o in origin.items() if o == "default"]
    if defaulted:
        log.info("using defaults for %d keys: %s", len(defaulted), ", ".join(defaulted))
    return RunConfig(values=values, origin=origin)


def _line_of(config, key):
    o = config.origin.get(key, "")
    return int(o[5:]) if o.startswith("line ") else None


def _solid(config):
    return SolidModel(rho_s=config["solid.rho_s"], eps=config["solid.eps"],
                      kind=config["solid.kind"], lambda0=config["solid.lambda0"],
                      lambda1=config["solid.lambda1"], K_coef=config["solid.K_coef"])


def _fluid(config):
    return FluidParams(rho_f=config["fluid.rho_f"], mu=config["fluid.mu"])


def build_scheme(config):
    try:
        return SchemeConfig(scheme=config["scheme.name"], r=config["scheme.r"],
                            tau=config["scheme.tau"], t_final=config["scheme.t_final"],
                            fluid=_fluid(config), solid=_solid(config),
                            gamma=config["scheme.gamma"], frozen=config["scheme.frozen"])
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), _line_of(config, "scheme.r")) from None


def build_scenario(config, study_kind=None):
    name = config["scenario.name"]
    if name == "auto":
        name = "SteadyCircle" if study_kind in ("SpaceConv", "GlobalConv") else "EllipseRelax"
    overrides = dict(center=(config["scenario.cx"], config["scenario.cy"]),
                     prestressed=config["scenario.prestressed"],
                     fluid=_fluid(config), solid=_solid(config))
    for key in ("R", "a", "b"):
        if config[f"scenario.{key}"] is not None:
            overrides[key] = config[f"scenario.{key}"]
    try:
        return scenario_by_name(name, **overrides)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), _line_of(config, "scenario.name")) from None


def build_plan(config):
    kind = config["study.kind"]
    base = PRESETS[kind]
    fields = {}
    for key in ("taus", "ns", "ref_n", "ref_tau", "t_eval", "ref_scheme"):
        if config[f"study.{key}"] is not None:
            fields[key] = config[f"study.{key}"]
    try:
        return replace(base, **fields)
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc), _line_of(config, "study.kind")) from None


class Output:
    """Writes every file of a command into one directory."""

    def __init__(self, config):
        self.config = config
        self.dir = Path(config["output.dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hash = config.hash

    def table(self, name, columns, rows):
        path = self.dir / name
        write_table(path, columns, rows, self.hash)
        return path

    def effective_config(self):
        path = self.dir / "effective_config.txt"
        with open(path, "w", newline="\n") as fh:
            fh.write(f"# columns: key value | config_hash: {self.hash}\n")
            fh.write(self.config.text())
        return path


SNAPSHOT_COLUMNS = ["part", "index", "x", "y", "vx", "vy", "p", "dx", "dy"]


def snapshot_rows(state, fmesh, smesh):
    """Fluid vertices (part 0) with velocity and pressure, then curve nodes
    (part 1) at their reference position with velocity and displacement."""
    nv, m = fmesh.n_vertices, smesh.n_nodes
    rows = []
    for i, (x, y) in enumerate(fmesh.vertices):
        rows.append([0, i, x, y, state.u[i], state.u[nv + i], state.p[i], 0.0, 0.0])
    for k, (x, y) in enumerate(smesh.nodes):
        rows.append([1, k, x, y, state.ddot[k], state.ddot[m + k], 0.0, state.d[k], state.d[m + k]])
    return rows


def cmd_run(config, out):
    scenario = build_scenario(config)
    scheme = build_scheme(config)
    n = config["mesh.n"]
    every = config["output.snapshot_every"]
    records = []
    meshes = scenario.build(n)

    def sink(kind, payload):
        if kind == "record":
            records.append(payload.row())
        else:
            out.table(f"snapshot_{payload.n}.csv", SNAPSHOT_COLUMNS,
                      snapshot_rows(payload, meshes.fmesh, meshes.smesh))

    result = run_scenario(scenario, scheme, n, sink=sink, snapshot_every=every or None,
                          raise_on_failure=False)
    out.table("energy.csv", EnergyRecord.columns(), records)
    if result.status != "ok":
        print(f"run failed at step {result.records[-1].n}: {result.status}: {result.message}",
              file=sys.stderr)
        return 1
    print(f"run finished: {result.state.n} steps, E/E0 = {result.energies[-1] / result.energies[0]:.6g}")
    return 0


SWEEP_COLUMNS = ["tau", "stable", "completed", "max_energy_ratio", "cfl_ok", "steps_done"]


def cmd_sweep(config, out):
    scenario = build_scenario(config)
    scheme = build_scheme(config)
    rows = stability_sweep(scenario, scheme.scheme, scheme.r, config["sweep.taus"],
                           n=config["sweep.n"], n_steps=config["sweep.n_steps"],
                           gamma=scheme.gamma)
    table = []
    for k, row in enumerate(rows):
        out.table(f"energy_tau{k}.csv", EnergyRecord.columns(),
                  [rec.row() for rec in row.result.records])
        table.append([row.tau, int(row.stable), int(row.status == "ok"), row.max_energy_ratio,
                      int(row.cfl_ok), row.steps_done])
        print(f"tau={row.tau:g} stable={row.stable} status={row.status} "
              f"maxE/E0={row.max_energy_ratio:.6g} cfl_ok={row.cfl_ok}")
    out.table("sweep.csv", SWEEP_COLUMNS, table)
    guaranteed = scheme.scheme in ("monolithic", "monolithic-linearized") or \
        (scheme.scheme == "alg3" and scheme.r in (0, 1))
    return 1 if guaranteed and not all(r.stable for r in rows) else 0


def cmd_converge(config, out):
    plan = build_plan(config)
    scenario = build_scenario(config, plan.kind)
    scheme = build_scheme(config)
    result = convergence_study(plan, scenario, scheme)
    path = out.table(f"errors_{plan.kind.lower()}.csv", STUDY_COLUMNS, result.rows())
    for row in result.rows():
        rate = "" if row[5] is None else f"  rate {row[5]:.4f}"
        print(f"{row[0]:<10g} total {row[4]:.6e}{rate}")
    print(f"wrote {path}")
    return 0


def cmd_stokes(config, out):
    rows, _ = stokes_mms(config["stokes.ns"], gamma=config["scheme.gamma"], mu=config["fluid.mu"])
    path = out.table("errors_stokes_mms.csv", STOKES_COLUMNS, rows)
    for row in rows:
        print(" ".join("-" if v is None else f"{v:.4g}" for v in row))
    print(f"wrote {path}")
    return 0


def cmd_check(config, out):
    scenario = build_scenario(config)
    scheme = build_scheme(config)
    built = scenario.build(config["mesh.n"])
    ops = assemble_operators(built.fmesh, built.smesh, scheme.fluid, scheme.solid, scheme.gamma)
    rep = cfl_check(scheme, ops.M_s, ops.K_s)
    print(f"lambda_max = {rep.lambda_max:.10g}")
    print(f"tau^2 lambda_max / (rho_s eps) = {rep.alg2_margin:.6g} ({'ok' if rep.alg2_ok else 'violated'})")
    print(f"2 tau^6 lambda_max^3 / (rho_s eps)^3 = {rep.alg3_r2_margin:.6g} "
          f"({'ok' if rep.alg3_r2_ok else 'violated'})")
    if rep.unconditional:
        print("unconditional")
        return 0
    print("ok" if rep.scheme_ok else "violated")
    return 0 if rep.scheme_ok else 1


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "converge": cmd_converge,
            "stokes-mms": cmd_stokes, "check": cmd_check}


def _split_overrides(extra):
    pairs, i = [], 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"flag {arg} needs a value")
            value = extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def dispatch(subcommand, config):
    """Run ``subcommand`` and return the process exit status."""
    if subcommand not in COMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Output(config)
    out.effective_config()
    try:
        return COMMANDS[subcommand](config, out)
    except ConfigError:
        raise
    except FsiError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="immersed-fsi",
                                     description="Immersed thin structure in a Stokes fluid.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", nargs="?", help="file of 'section.key = value' lines")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        config = parse_config(args.config, _split_overrides(extra))
        return dispatch(args.subcommand, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
