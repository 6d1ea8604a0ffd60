"""Command-line surface: problem configuration, runs and output files.

Configuration files are line-oriented ``key = value`` text with ``[section]``
headers. ``[component]`` and ``[ring]`` blocks may repeat; every other section
appears at most once.

    [problem]     mode (sb|ds), steps, dt, eps, dynamics, axes
    [dynamics]    A, B, D as matrices, rows separated by ';' (dynamics = explicit);
                  one matrix for every step or one per step separated by '|'
    [component]   side (initial|terminal), weight, mean, cov | variance
    [ring]        side, count, radius, center, variance, weight, angles (full|half)
    [simulation]  paths, seed, schemes, saved_paths
    [limit]       T, dt_list, t_probe, x_probe
    [solver]      augmented-Lagrangian settings for density steering
    [output]      dir
"""
import argparse
import configparser
import csv
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

import covariance_steering
import mixture_policy
import simulator
from static.examples import example_config_path
from transport_plan import verify_plan
from utils.errors import ConfigParseError, ConfigValidationError, GmmBridgeError
from utils.gaussians import GaussianComponent, Gmm
from utils.settings import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

REPEATABLE = ("component", "ring")
KNOWN_KEYS = {
    "problem": {"mode", "steps", "dt", "eps", "dynamics", "axes"},
    "dynamics": {"a", "b", "d"},
    "component": {"side", "weight", "mean", "cov", "variance"},
    "ring": {"side", "count", "radius", "center", "variance", "weight", "angles"},
    "simulation": {"paths", "seed", "schemes", "saved_paths"},
    "limit": {"t", "dt_list", "t_probe", "x_probe"},
    "solver": {f.name for f in fields(covariance_steering.SteeringOptions)},
    "output": {"dir"},
}
DYNAMICS_KINDS = ("random-walk", "double-integrator", "explicit")
_HEADER = re.compile(r"^\[([^\]]+)\]\s*$")
_REQUIRED = object()


@dataclass(frozen=True)
class LimitConfig:
    T: float
    dt_list: tuple
    t_probe: float = None
    x_probe: np.ndarray = None


@dataclass(frozen=True)
class ProblemConfig:
    path: str
    mode: str
    N: int
    dt: float
    eps: float
    dynamics_kind: str
    dynamics: object
    rho0: Gmm
    rhoN: Gmm
    paths: int = 1000
    seed: int = 0
    schemes: tuple = (simulator.PER_STEP,)
    saved_paths: int = 500
    limit: LimitConfig = None
    solver: covariance_steering.SteeringOptions = covariance_steering.SteeringOptions()
    out_dir: str = "out"


def _split_blocks(text):
    """Give repeated blocks unique names and remember where every key lives"""
    lines = []
    section_lines = {}
    key_lines = {}
    counters = {}
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        match = _HEADER.match(stripped)
        if match:
            name = match.group(1).strip().lower()
            if name in REPEATABLE:
                counters[name] = counters.get(name, 0) + 1
                name = f"{name}:{counters[name]}"
            current = name
            section_lines[name] = no
            lines.append(f"[{name}]")
            continue
        if current and stripped and not stripped.startswith(("#", ";")) and "=" in stripped:
            key_lines[(current, stripped.split("=", 1)[0].strip().lower())] = no
        lines.append(line)
    return "\n".join(lines) + "\n", section_lines, key_lines


class _Reader:
    """Typed access to a parsed config with line-numbered validation errors"""

    def __init__(self, parser, path, section_lines, key_lines):
        self.parser = parser
        self.path = path
        self.section_lines = section_lines
        self.key_lines = key_lines

    def fail(self, section, key, why):
        line = self.key_lines.get((section, key)) or self.section_lines.get(section)
        where = f"{self.path}:{line}" if line else self.path
        label = f"[{section}] {key}" if key else f"[{section}]"
        raise ConfigValidationError(f"{where}: {label}: {why}", field=f"{section}.{key}" if key else section)

    def has(self, section, key=None):
        if key is None:
            return self.parser.has_section(section)
        return self.parser.has_option(section, key)

    def raw(self, section, key, default=_REQUIRED):
        if self.has(section) and self.parser.has_option(section, key):
            return self.parser.get(section, key).strip()
        if default is _REQUIRED:
            self.fail(section, key, "missing required value")
        return default

    def float(self, section, key, default=_REQUIRED, positive=False):
        value = self.raw(section, key, default)
        if value is None:
            return None
        try:
            out = float(value)
        except ValueError:
            self.fail(section, key, f"expected a number, got {value!r}")
        if not np.isfinite(out) or (positive and out <= 0.0):
            self.fail(section, key, f"expected a positive finite number, got {value!r}")
        return out

    def int(self, section, key, default=_REQUIRED, minimum=None):
        value = self.raw(section, key, default)
        if value is None:
            return None
        try:
            out = int(value)
        except ValueError:
            self.fail(section, key, f"expected an integer, got {value!r}")
        if minimum is not None and out < minimum:
            self.fail(section, key, f"must be at least {minimum}, got {out}")
        return out

    def choice(self, section, key, options, default=_REQUIRED):
        value = self.raw(section, key, default)
        if value is not None and value.lower() not in options:
            self.fail(section, key, f"expected one of {', '.join(options)}, got {value!r}")
        return value.lower() if value is not None else value

    def vector(self, section, key, default=_REQUIRED):
        value = self.raw(section, key, default)
        if value is None:
            return None
        try:
            return np.array([float(tok) for tok in value.replace(",", " ").split()])
        except ValueError:
            self.fail(section, key, f"expected numbers separated by spaces, got {value!r}")

    def matrix(self, section, key, default=_REQUIRED):
        value = self.raw(section, key, default)
        if value is None:
            return None
        try:
            rows = [[float(tok) for tok in row.replace(",", " ").split()] for row in value.split(";")]
            return np.array(rows, dtype=float)
        except ValueError:
            self.fail(section, key, f"expected rows of numbers separated by ';', got {value!r}")

    def matrices(self, section, key, count):
        """One matrix, or exactly `count` matrices separated by '|'"""
        value = self.raw(section, key)
        parts = value.split("|")
        if len(parts) not in (1, count):
            self.fail(section, key, f"expected 1 or {count} matrices separated by '|', got {len(parts)}")
        stack = []
        for part in parts:
            try:
                rows = [[float(tok) for tok in row.replace(",", " ").split()] for row in part.split(";")]
                stack.append(np.array(rows, dtype=float))
            except ValueError:
                self.fail(section, key, f"expected rows of numbers separated by ';', got {part.strip()!r}")
        if len({M.shape for M in stack}) != 1:
            self.fail(section, key, "every step must use the same matrix shape")
        return np.repeat(stack[0][None], count, 0) if len(stack) == 1 else np.stack(stack)


def _parse(text, path):
    renamed, section_lines, key_lines = _split_blocks(text)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(renamed, source=path)
    except configparser.ParsingError as exc:
        line = getattr(exc, "lineno", None) or (exc.errors[0][0] if getattr(exc, "errors", None) else None)
        raise ConfigParseError(f"{path}:{line}: cannot parse line", line=line) from exc
    except (configparser.DuplicateSectionError, configparser.DuplicateOptionError) as exc:
        raise ConfigParseError(f"{path}:{exc.lineno}: {exc.message}", line=exc.lineno) from exc
    except configparser.Error as exc:
        raise ConfigParseError(f"{path}: {exc}") from exc
    reader = _Reader(parser, path, section_lines, key_lines)
    for section in parser.sections():
        base = section.split(":", 1)[0]
        if base not in KNOWN_KEYS:
            reader.fail(section, None, "unknown section")
        for key in parser.options(section):
            if key not in KNOWN_KEYS[base]:
                reader.fail(section, key, "unknown key")
    return reader


def _component_cov(reader, section, dim):
    if reader.has(section, "cov"):
        cov = reader.matrix(section, "cov")
        if cov.shape != (dim, dim):
            reader.fail(section, "cov", f"expected a {dim}x{dim} matrix, got shape {cov.shape}")
        return cov
    return reader.float(section, "variance", positive=True) * np.eye(dim)


def _read_components(reader):
    """Collect (weight or None, component, section) per side in file order"""
    sides = {"initial": [], "terminal": []}
    for section in reader.parser.sections():
        base = section.split(":", 1)[0]
        if base not in REPEATABLE:
            continue
        side = reader.choice(section, "side", tuple(sides))
        try:
            if base == "component":
                mean = reader.vector(section, "mean")
                cov = _component_cov(reader, section, mean.size)
                sides[side].append((reader.float(section, "weight", None), GaussianComponent(mean, cov), section))
            else:
                count = reader.int(section, "count", minimum=1)
                radius = reader.float(section, "radius")
                center = reader.vector(section, "center", "0 0")
                if center.size < 2:
                    reader.fail(section, "center", "a ring needs at least two coordinates")
                span = np.pi if reader.choice(section, "angles", ("full", "half"), "full") == "half" else 2 * np.pi
                total = reader.float(section, "weight", None)
                cov = _component_cov(reader, section, center.size)
                for j in range(count):
                    theta = span * j / count
                    mean = center.copy()
                    mean[:2] += radius * np.array([np.cos(theta), np.sin(theta)])
                    weight = None if total is None else total / count
                    sides[side].append((weight, GaussianComponent(mean, cov), section))
        except GmmBridgeError as exc:
            if isinstance(exc, ConfigValidationError):
                raise
            reader.fail(section, None, str(exc))
    return sides


def _build_gmm(reader, entries, side):
    if not entries:
        raise ConfigValidationError(f"{reader.path}: no {side} components", field=side)
    given = [w for w, _, _ in entries if w is not None]
    if given and len(given) != len(entries):
        reader.fail(entries[0][2], "weight", f"either every {side} component has a weight or none does")
    weights = np.array(given) if given else np.full(len(entries), 1.0 / len(entries))
    if np.any(weights <= 0.0) or abs(weights.sum() - 1.0) > 1e-9:
        reader.fail(entries[0][2], "weight",
                    f"{side} GMM weights must be positive and sum to 1, got sum {weights.sum():.12g}")
    try:
        return Gmm(weights / weights.sum(), [c for _, c, _ in entries])
    except GmmBridgeError as exc:
        raise ConfigValidationError(f"{reader.path}: {side} GMM: {exc}", field=side) from exc


def _build_dynamics(reader, kind, n, N, eps, dt):
    try:
        if kind == "random-walk":
            return covariance_steering.random_walk(n, N, eps, dt)
        if kind == "double-integrator":
            axes = reader.int("problem", "axes", n // 2, minimum=1)
            if 2 * axes != n:
                reader.fail("problem", "axes", f"double integrator with {axes} axes has state size {2 * axes}, "
                                               f"components have size {n}")
            return covariance_steering.double_integrator(N, dt, eps, axes)
        A, B, D = (reader.matrices("dynamics", key, N) for key in ("a", "b", "d"))
        if A.shape[1:] != (n, n):
            reader.fail("dynamics", "a", f"expected {n}x{n}, got {A.shape[1:]}")
        for key, M in (("b", B), ("d", D)):
            if M.shape[1] != n:
                reader.fail("dynamics", key, f"expected {n} rows, got {M.shape[1]}")
        return covariance_steering.LinearDynamics(A, B, D)
    except ConfigValidationError:
        raise
    except GmmBridgeError as exc:
        raise ConfigValidationError(f"{reader.path}: dynamics: {exc}", field="problem.dynamics") from exc


def load_config(path):
    """Read and validate a problem configuration file"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigParseError(f"cannot read configuration {path}: {exc}") from exc
    reader = _parse(text, path)

    mode = reader.choice("problem", "mode", (mixture_policy.SB, mixture_policy.DS))
    N = reader.int("problem", "steps", minimum=1)
    dt = reader.float("problem", "dt", "1.0", positive=True)
    eps = reader.float("problem", "eps", positive=True)
    kind = reader.choice("problem", "dynamics", DYNAMICS_KINDS, "random-walk")
    if mode == mixture_policy.SB and kind != "random-walk":
        reader.fail("problem", "dynamics", "Schrodinger bridge runs use the random-walk reference")

    sides = _read_components(reader)
    rho0 = _build_gmm(reader, sides["initial"], "initial")
    rhoN = _build_gmm(reader, sides["terminal"], "terminal")
    if rho0.dim != rhoN.dim:
        raise ConfigValidationError(
            f"{reader.path}: initial components live in R^{rho0.dim}, terminal in R^{rhoN.dim}", field="terminal"
        )
    dynamics = _build_dynamics(reader, kind, rho0.dim, N, eps, dt)

    schemes = tuple(s.strip() for s in reader.raw("simulation", "schemes", simulator.PER_STEP).split(","))
    for s in schemes:
        if s not in simulator.SCHEMES:
            reader.fail("simulation", "schemes", f"unknown scheme {s!r}")

    limit = None
    if reader.has("limit"):
        dt_list = tuple(reader.vector("limit", "dt_list"))
        x_probe = reader.vector("limit", "x_probe", None)
        if x_probe is not None and x_probe.size != rho0.dim:
            reader.fail("limit", "x_probe", f"expected {rho0.dim} coordinates")
        limit = LimitConfig(
            T=reader.float("limit", "t", positive=True),
            dt_list=dt_list,
            t_probe=reader.float("limit", "t_probe", None),
            x_probe=x_probe,
        )

    solver = covariance_steering.SteeringOptions()
    if reader.has("solver"):
        overrides = {}
        for f in fields(solver):
            if reader.has("solver", f.name):
                overrides[f.name] = (reader.int if f.type in (int, "int") else reader.float)("solver", f.name)
        solver = replace(solver, **overrides)

    config = ProblemConfig(
        path=path, mode=mode, N=N, dt=dt, eps=eps, dynamics_kind=kind, dynamics=dynamics,
        rho0=rho0, rhoN=rhoN,
        paths=reader.int("simulation", "paths", 1000, minimum=1),
        seed=reader.int("simulation", "seed", 0, minimum=0),
        schemes=schemes,
        saved_paths=reader.int("simulation", "saved_paths", 500, minimum=0),
        limit=limit,
        solver=solver,
        out_dir=reader.raw("output", "dir", "out"),
    )
    logger.debug("loaded %s: mode %s, %d steps, %d x %d components", path, mode, N, len(rho0), len(rhoN))
    return config


def _fmt(value):
    return repr(float(value))


class _Outputs:
    """Files written by one run, removed again if the run fails"""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.created = []

    def path(self, name):
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, name)
        self.created.append(path)
        return path

    def write_json(self, name, payload):
        with open(self.path(name), "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

    def write_csv(self, name, header, rows):
        with open(self.path(name), "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    def discard(self):
        for path in self.created:
            if os.path.exists(path):
                os.remove(path)
        self.created = []


def build_problem(config):
    return mixture_policy.build_mixture_bridge(
        config.rho0, config.rhoN, config.mode, config.N, config.eps, config.dt,
        dynamics=config.dynamics if config.mode == mixture_policy.DS else None,
        options=config.solver,
    )


def plan_payload(mb):
    plan = mb.plan
    if not verify_plan(plan, plan.alpha, plan.beta):
        logger.warning("transport plan misses its marginals by more than the feasibility tolerance")
    return {
        "mode": mb.mode,
        "lambda": plan.lam.tolist(),
        "objective": float(plan.objective),
        "costs": mb.costs.tolist(),
        "alpha": plan.alpha.tolist(),
        "beta": plan.beta.tolist(),
        "row_potentials": plan.row_potentials.tolist(),
        "col_potentials": plan.col_potentials.tolist(),
        "pivots": int(plan.iterations),
    }


def marginal_rows(mb):
    n = mb.n
    header = ["k", "i", "j", "weight"] + [f"mean_{a}" for a in range(n)] + [
        f"cov_{a}_{b}" for a in range(n) for b in range(n)
    ]
    rows = []
    for k in range(mb.N + 1):
        for p in mb.active:
            i, j = mb.pair_index(p)
            sol = mb.pairs[i][j]
            rows.append(
                [k, i, j, _fmt(mb.plan.lam[i, j])]
                + [_fmt(v) for v in sol.mu_path[k]]
                + [_fmt(v) for v in sol.sigma_path[k].ravel()]
            )
    return header, rows


def trajectory_rows(batches, saved):
    n = batches[0].states.shape[2]
    header = ["path", "k"] + [f"x_{a}" for a in range(n)] + ["scheme"]
    rows = []
    for batch in batches:
        for path in range(min(saved, batch.M)):
            for k in range(batch.N + 1):
                rows.append([path, k] + [_fmt(v) for v in batch.states[path, k]] + [batch.scheme])
    return header, rows


def _estimate(est):
    return {"value": float(est.value), "std_error": float(est.std_error), "paths": int(est.M)}


def simulate(mb, config):
    """Roll out every configured scheme and collect the estimates"""
    batches = [simulator.rollout(mb, scheme, config.paths, config.seed) for scheme in config.schemes]
    payload = {"mode": mb.mode, "paths": int(config.paths), "seed": int(config.seed), "schemes": {}}
    if mb.mode == mixture_policy.SB:
        payload["sb_upper_bound"] = mixture_policy.sb_upper_bound(mb)
    else:
        payload["ds_total_cost"] = mixture_policy.ds_total_cost(mb)

    for batch in batches:
        entry = {}
        terminal = simulator.empirical_marginal(batch, mb.N, mb)
        entry["terminal_weights"] = terminal.histogram.sum(axis=0).tolist()
        entry["terminal_mean"] = terminal.mean.tolist()
        if mb.mode == mixture_policy.SB:
            entry["path_kl"] = _estimate(simulator.estimate_path_kl(batch, mb, batch.scheme))
        else:
            entry["control_cost"] = _estimate(simulator.estimate_control_cost(batch))
        payload["schemes"][batch.scheme] = entry

    if mb.mode == mixture_policy.SB and set(config.schemes) == set(simulator.SCHEMES):
        by_scheme = {b.scheme: b for b in batches}
        paired = (
            simulator.path_log_ratios(by_scheme[simulator.PER_STEP], mb)
            - simulator.path_log_ratios(by_scheme[simulator.ONCE], mb)
        )
        payload["per_step_minus_once"] = {
            "value": float(paired.mean()),
            "std_error": float(paired.std(ddof=1) / np.sqrt(paired.size)) if paired.size > 1 else float("nan"),
        }
    return batches, payload


def limit_rows(config):
    limit = config.limit
    rows = simulator.limit_check(
        config.rho0, config.rhoN, config.eps, limit.T, limit.dt_list,
        x_probe=limit.x_probe, t_probe=limit.t_probe, seed=config.seed,
    )
    header = ["dt", "drift_err", "diff_err", "ratio", "steps", "k", "gen_err"]
    return header, [
        [_fmt(r.dt), _fmt(r.drift_err), _fmt(r.diff_err), _fmt(r.ratio), r.steps, r.k, _fmt(r.gen_err)]
        for r in rows
    ]


def run(config, command="simulate"):
    """Execute one command for a loaded configuration and write its artifacts"""
    outputs = _Outputs(config.out_dir)
    try:
        if command in ("solve", "simulate"):
            mb = build_problem(config)
            outputs.write_json("plan.json", plan_payload(mb))
            outputs.write_csv("marginals.csv", *marginal_rows(mb))
            print(f"Solved {mb.shape[0]}x{mb.shape[1]} {mb.mode} pairs, plan objective {mb.plan.objective:.6g}")
            if command == "simulate":
                batches, payload = simulate(mb, config)
                outputs.write_csv("trajectories.csv", *trajectory_rows(batches, config.saved_paths))
                outputs.write_json("estimates.json", payload)
                print(f"Simulated {config.paths} paths per scheme ({', '.join(config.schemes)})")
        if command == "limit-check" or (command == "simulate" and config.limit is not None):
            if config.limit is None:
                raise ConfigValidationError(f"{config.path}: limit-check needs a [limit] section", field="limit")
            outputs.write_csv("limits.csv", *limit_rows(config))
            print(f"Limit check over {len(config.limit.dt_list)} step sizes written")
    except BaseException:
        outputs.discard()
        raise
    print(f"Outputs in {config.out_dir}")
    return EXIT_OK


def _apply_overrides(config, args, out_dir=None):
    changes = {}
    if out_dir is not None:
        changes["out_dir"] = out_dir
    if args.seed_override is not None:
        changes["seed"] = args.seed_override
    if args.paths_override is not None:
        changes["paths"] = args.paths_override
    return replace(config, **changes)


def reproduce_example(number, args):
    config = load_config(example_config_path(number))
    base = args.out or config.out_dir
    if int(number) == 1:
        for mode in (mixture_policy.SB, mixture_policy.DS):
            run(_apply_overrides(replace(config, mode=mode), args, os.path.join(base, mode)), "simulate")
    else:
        run(_apply_overrides(config, args, base), "simulate")
    return EXIT_OK


def _u64(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="gmm-bridge", description="Mixture Schrodinger bridge and density steering")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_config=True):
        if with_config:
            p.add_argument("--config", required=True, help="problem configuration file")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed-override", type=_u64, help="replace the configured seed")
        p.add_argument("--paths-override", type=_positive, help="replace the configured path count")

    for name, help_text in (
        ("solve", "solve every pair and the mixing plan"),
        ("simulate", "solve, then roll out and estimate"),
        ("limit-check", "continuous-time limit diagnostics"),
    ):
        common(sub.add_parser(name, help=help_text))
    repro = sub.add_parser("reproduce-example", help="run a bundled example")
    repro.add_argument("example", type=int, choices=(1, 2))
    # Bundled examples carry their own configuration
    common(repro, with_config=False)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        if args.command == "reproduce-example":
            return reproduce_example(args.example, args)
        config = load_config(args.config)
        return run(_apply_overrides(config, args, args.out), args.command)
    except (ConfigParseError, ConfigValidationError) as exc:
        print(f"Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GmmBridgeError as exc:
        print(f"Solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
