"""Command-line front end: validate, solve, curves, grid and sensitivity sweeps.

Exit status is 0 on success, 2 when an input fails validation or cannot be
parsed, and 3 when any equilibrium solve did not converge (outputs are still
written, flagged). Every output starts with a provenance record carrying the
tool version and a SHA-256 digest of the resolved configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    ANALYSIS_OPTIONS,
    curves_csv,
    pareto_grid_search,
    sensitivity_demand,
    sensitivity_vot,
)
from .equilibrium import SolverOptions, solve
from .exceptions import ConvergenceWarning, LanePricingError, NetworkValidationError
from .network import LatencyFn, Network, find_violations, validate
from .policies import UserGroup, scenario_from_dict
from .singleedge import curves

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 2, 3


class InputError(LanePricingError):
    """Unreadable file or missing/invalid field, located by file and field path."""


def _read_json(path, what):
    if path is None:
        raise InputError(f"--{what} is required for this command")
    try:
        with open(Path(path)) as fh:
            return json.load(fh)
    except OSError as exc:
        raise InputError(f"{path}: cannot read {what} file ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc


def _field(data, dotted, path, default=...):
    node = data
    for part in dotted.split("."):
        if isinstance(node, dict) and part in node:
            node = node[part]
        elif default is not ...:
            return default
        else:
            raise InputError(f"{path}: missing field '{dotted}'")
    return node


def _parse(fn, path, what):
    try:
        return fn()
    except InputError:
        raise
    except NetworkValidationError:
        raise
    except KeyError as exc:
        raise InputError(f"{path}: missing field {exc} in {what}") from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: invalid {what}: {exc}") from exc


def _grid(spec, path, name, default):
    """A list of values or ``{"start", "stop", "step"}`` (stop inclusive)."""
    value = _field(spec, name, path, default)
    if isinstance(value, dict):
        start, stop, step = (float(value[k]) for k in ("start", "stop", "step"))
        n = int(round((stop - start) / step)) + 1
        return np.round(start + step * np.arange(n), 12)
    return np.asarray(value, dtype=float)


def _options(args, default):
    opts = default
    if args.gap_tol is not None:
        opts = replace(opts, gap_tol=args.gap_tol)
    if args.max_iters is not None:
        opts = replace(opts, max_iters=args.max_iters)
    if args.seed is not None:
        opts = replace(opts, seed=args.seed)
    return opts


def _digest(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _provenance(config):
    return f"lanepricing {__version__} config-sha256={_digest(config)}"


def _emit(args, text):
    if args.out:
        with open(args.out, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _emit_json(args, config, payload):
    body = {"provenance": {"tool": "lanepricing", "version": __version__, "config_sha256": _digest(config)}}
    body.update(payload)
    _emit(args, json.dumps(body, indent=2, sort_keys=True) + "\n")


def _base_config(args, **inputs):
    return {"command": args.command, "gap_tol": args.gap_tol, "max_iters": args.max_iters,
            "seed": args.seed, **inputs}


def _single_edge_inputs(data, path):
    latency = _parse(lambda: LatencyFn.from_spec(_field(data, "latency", path)), path, "latency")
    return latency, float(_field(data, "toll", path)), float(_field(data, "vot_eligible", path))


# ---------------------------------------------------------------------------
# commands


def cmd_validate(args):
    data = _read_json(args.network, "network")
    network = _parse(lambda: Network.from_dict(data), args.network, "network")
    violations = find_violations(network)
    config = _base_config(args, network=data)
    if violations:
        for v in violations:
            print(f"{args.network}: {type(v).__name__}: {v}", file=sys.stderr)
        _emit_json(args, config, {"valid": False,
                                  "violations": [{"kind": type(v).__name__, "message": str(v)} for v in violations]})
        return EXIT_INVALID
    payload = {"valid": True, "n_edges": network.n_edges}
    if args.scenario:
        sdata = _read_json(args.scenario, "scenario")
        scenario = _parse(lambda: scenario_from_dict(sdata, network.n_edges), args.scenario, "scenario")
        config["scenario"] = sdata
        payload.update({"horizon": scenario.horizon, "groups": len(scenario.groups), "policy": scenario.policy.kind})
    _emit_json(args, config, payload)
    return EXIT_OK


def cmd_solve(args):
    ndata = _read_json(args.network, "network")
    sdata = _read_json(args.scenario, "scenario")
    network = validate(_parse(lambda: Network.from_dict(ndata), args.network, "network"))
    scenario = _parse(lambda: scenario_from_dict(sdata, network.n_edges), args.scenario, "scenario")
    options = _options(args, SolverOptions())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        result = solve(network, list(scenario.groups), scenario.policy, options)
    config = _base_config(args, network=ndata, scenario=sdata)
    payload = {"result": result.to_dict(), "eligible_express": result.eligible_express(scenario.groups)}
    _emit_json(args, config, payload)
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_curves(args):
    data = _read_json(args.scenario, "scenario")
    latency, toll, vot_e = _single_edge_inputs(data, args.scenario)
    vot_i = _field(data, "vot_ineligible", args.scenario, None)
    alphas = _grid(data, args.scenario, "alphas", {"start": 0.0, "stop": 1.0, "step": 0.01})
    table = curves(latency, toll, vot_e, None if vot_i is None else float(vot_i), alphas)
    out = io.StringIO()
    out.write(f"# {_provenance(_base_config(args, scenario=data))}\n")
    names = ("alpha", "yC", "yD", "yC_credit", "yC_pocket")
    out.write(",".join(names) + "\n")
    for i in range(len(alphas)):
        out.write(",".join(repr(float(table[n][i])) for n in names) + "\n")
    _emit(args, out.getvalue())
    return EXIT_OK


def cmd_grid(args):
    ndata = _read_json(args.network, "network")
    sdata = _read_json(args.scenario, "scenario")
    network = validate(_parse(lambda: Network.from_dict(ndata), args.network, "network"))
    path = args.scenario

    def build():
        horizon = int(sdata.get("horizon", 1))
        groups = [UserGroup(str(g.get("id", i)), bool(g["eligible"]), g["vot"], g.get("demand", 1.0)).with_horizon(horizon)
                  for i, g in enumerate(_field(sdata, "groups", path))]
        return groups

    groups = _parse(build, path, "groups")
    kind = _field(sdata, "kind", path, "cbcp")
    tolls = _grid(sdata, path, "tolls", {"start": 0.0, "stop": 20.0, "step": 1.0})
    budgets = _grid(sdata, path, "budgets", {"start": 0.0, "stop": 90.0, "step": 5.0})
    weights = _field(sdata, "weights", path, [[1.0, 1.0, 1.0]])
    report = _parse(lambda: pareto_grid_search(network, groups, tolls, budgets, weights, kind,
                                               _options(args, ANALYSIS_OPTIONS), n_jobs=args.jobs),
                    path, "grid scenario")
    config = _base_config(args, network=ndata, scenario=sdata)
    _emit(args, report.to_csv(header_comment=_provenance(config)))
    return EXIT_OK if all(r.converged for r in report.rows) else EXIT_NOT_CONVERGED


def cmd_sensitivity_vot(args):
    data = _read_json(args.scenario, "scenario")
    path = args.scenario
    latency, toll, vot_e = _single_edge_inputs(data, path)
    vbars = np.atleast_1d(np.asarray(_field(data, "vbar_ineligible", path), dtype=float))
    delta = float(_field(data, "delta_ineligible", path, 0.0))
    horizon = int(_field(data, "horizon", path, 5))
    alphas = _grid(data, path, "alphas", {"start": 0.0, "stop": 1.0, "step": 0.05})
    seed = args.seed if args.seed is not None else int(_field(data, "seed", path, 0))
    opts = _options(args, ANALYSIS_OPTIONS)
    families = [_parse(lambda v=v: sensitivity_vot(latency, toll, vot_e, float(v), delta, horizon, seed, alphas,
                                                   options=opts, n_jobs=args.jobs), path, "scenario")
                for v in vbars]
    config = _base_config(args, scenario=data)
    out = io.StringIO()
    curves_csv(families, out, header_comment=_provenance(config))
    _emit(args, out.getvalue())
    return EXIT_OK if all(c.converged for c in families) else EXIT_NOT_CONVERGED


def cmd_sensitivity_demand(args):
    data = _read_json(args.scenario, "scenario")
    path = args.scenario
    latency, toll, vot_e = _single_edge_inputs(data, path)
    vot_i = float(_field(data, "vot_ineligible", path))
    demands = _grid(data, path, "demands", [0.0, 0.5, 1.0, 1.5])
    alphas = _grid(data, path, "alphas", {"start": 0.0, "stop": 1.0, "step": 0.05})
    families = _parse(lambda: sensitivity_demand(latency, toll, vot_e, vot_i, demands, alphas,
                                                 options=_options(args, ANALYSIS_OPTIONS), n_jobs=args.jobs),
                      path, "scenario")
    config = _base_config(args, scenario=data)
    out = io.StringIO()
    curves_csv(families, out, header_comment=_provenance(config))
    _emit(args, out.getvalue())
    return EXIT_OK if all(c.converged for c in families) else EXIT_NOT_CONVERGED


COMMANDS = {
    "validate": cmd_validate,
    "solve": cmd_solve,
    "curves": cmd_curves,
    "grid": cmd_grid,
    "sensitivity-vot": cmd_sensitivity_vot,
    "sensitivity-demand": cmd_sensitivity_demand,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="lanepricing", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lanepricing {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--network", help="network JSON file")
        p.add_argument("--scenario", help="scenario JSON file")
        p.add_argument("--out", help="output file (default: stdout)")
        p.add_argument("--jobs", type=int, default=None, help="parallel workers for sweeps")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--gap-tol", type=float, default=None)
        p.add_argument("--max-iters", type=int, default=None)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NetworkValidationError as exc:
        print(f"{args.network}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except LanePricingError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main(argv=None):
    sys.exit(run(argv))
