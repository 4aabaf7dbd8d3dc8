"""Command-line driver: ``bmdp solve|probe|compare``.

Exit codes: 0 success, 1 configuration or input error, 2 a theorem probe
was violated, 3 the solver failed.

Output files (written to ``--out-dir`` or ``outputs.directory``):

``report.json``   full convergence report
``iterates.csv``  columns ``n, J_tau, gap, step_divergence, bound_value``
``probes.json``   sampled convexity / smoothness / three-point residuals
``rates.csv``     columns ``fitted_rate, theoretical_rate, intercept, r2, lambda, tau``

Plot recipe: ``python -c "import pandas as pd; pd.read_csv('iterates.csv').plot(x='n', y='gap', logy=True)"``.
"""
import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from .dynamics import MODEL_REGISTRY, LQModelParams
from .errors import (BmdpError, ConfigError, IncompatibleReports, OracleDidNotConverge, OracleTooLarge,
                     ParseError, RangeError, SchemaError, SizeExceeded)
from .measures import ActionSpace, ChiSquared, EntropicOT, RelativeEntropy
from .solver import (ConvergenceReport, MirrorDescentConfig, oracle_optimal_control, run_mirror_descent,
                     theorem_probes)

SCHEMA_VERSION = 1

_number = {"type": "number"}
_tensor = {"anyOf": [_number, {"type": "array"}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["tree", "model", "action_space", "regularizer", "solver"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "tree": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_steps"],
            "properties": {
                "T": {"type": "number", "exclusiveMinimum": 0},
                "n_steps": {"type": "integer", "minimum": 1, "maximum": 16},
                "d_prime": {"type": "integer", "minimum": 1, "maximum": 2},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"type": "string"},
                "parameters": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: _tensor for k in ("beta", "B", "sigma0", "Q", "R", "G", "x0", "S")},
                },
            },
        },
        "action_space": {
            "type": "object",
            "additionalProperties": False,
            "oneOf": [{"required": ["points"]}, {"required": ["linspace"]}],
            "properties": {
                "points": {"type": "array", "minItems": 1},
                "linspace": {"type": "array", "prefixItems": [_number, _number, {"type": "integer", "minimum": 1}],
                             "minItems": 3, "maxItems": 3},
            },
        },
        "regularizer": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["relative_entropy", "chi_squared", "entropic_ot"]},
                "kappa": {"type": "number", "exclusiveMinimum": 0},
                "cost": {"anyOf": [{"const": "squared_distance"}, {"type": "array"},
                                   {"type": "object", "additionalProperties": False,
                                    "required": ["path"], "properties": {"path": {"type": "string"}}}]},
                "reference": {"type": "array", "items": _number},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tau": {"type": "number", "minimum": 0},
                "lambda": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"const": "auto"}]},
                "max_iters": {"type": "integer", "minimum": 0},
                "tol": {"type": "number", "minimum": 0},
                "oracle": {"enum": ["auto", "none"]},
                "n_probe_pairs": {"type": "integer", "minimum": 0},
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["csv", "json"]}, "uniqueItems": True},
                "emit_probe_report": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "tree": {"T": 1.0, "d_prime": 1},
    "model": {"parameters": {}},
    "regularizer": {"kappa": 1.0, "cost": "squared_distance"},
    "solver": {"tau": 0.0, "lambda": "auto", "max_iters": 200, "tol": 0.0, "oracle": "auto",
               "n_probe_pairs": 50},
    "outputs": {"directory": "out", "formats": ["csv", "json"], "emit_probe_report": True},
}


def _fill(config, defaults):
    out = copy.deepcopy(config)
    for key, value in defaults.items():
        if isinstance(value, dict):
            out[key] = _fill(out.get(key, {}), value)
        else:
            out.setdefault(key, copy.deepcopy(value))
    return out


def validate_config(raw, base_dir=None):
    """Schema-check ``raw``, fill defaults and apply the cross-field checks."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaError(path, err.message)
    cfg = _fill(raw, DEFAULTS)
    lam, tau = cfg["solver"]["lambda"], cfg["solver"]["tau"]
    if lam != "auto" and tau > lam:
        raise RangeError(["solver.tau", "solver.lambda"], f"solver.tau={tau} exceeds solver.lambda={lam}")
    tree = cfg["tree"]
    if tree["n_steps"] * tree["d_prime"] > 20:
        raise SizeExceeded(f"tree.n_steps * tree.d_prime = {tree['n_steps'] * tree['d_prime']} "
                           "exceeds 20 (more than 2**20 leaves)")
    if cfg["model"]["kind"] not in MODEL_REGISTRY:
        raise SchemaError("model.kind", f"unknown model {cfg['model']['kind']!r}")
    cost = cfg["regularizer"]["cost"]
    if isinstance(cost, dict) and base_dir is not None:
        cost["path"] = str(Path(base_dir, cost["path"]))
    return cfg


def load_config(path):
    """Read and validate a JSON experiment configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return validate_config(raw, base_dir=Path(path).parent)


def _actions(spec):
    if "points" in spec:
        return ActionSpace(spec["points"])
    lo, hi, n = spec["linspace"]
    return ActionSpace.linspace(lo, hi, n)


def _regularizer(spec, actions):
    kind = spec["kind"]
    if kind == "relative_entropy":
        return RelativeEntropy()
    if kind == "chi_squared":
        return ChiSquared()
    cost = spec["cost"]
    if cost == "squared_distance":
        cost = actions.squared_distance_cost()
    elif isinstance(cost, dict):
        try:
            cost = np.loadtxt(cost["path"], delimiter=",", ndmin=2)
        except OSError as exc:
            raise ParseError(f"cannot read cost matrix {cost['path']}: {exc}") from exc
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (actions.size, actions.size):
        raise SchemaError("regularizer.cost", f"cost matrix must be {actions.size}x{actions.size}")
    return EntropicOT(cost, kappa=spec["kappa"])


def build_solver_config(cfg):
    """Turn a validated configuration dictionary into a :class:`MirrorDescentConfig`."""
    actions = _actions(cfg["action_space"])
    tree = cfg["tree"]
    params = dict(cfg["model"]["parameters"])
    extra = {}
    if "S" in params:
        extra["S"] = params.pop("S")
    x0 = np.atleast_1d(np.asarray(params.get("x0", 0.0), dtype=float))
    try:
        lq = LQModelParams(d=x0.size, d_prime=tree["d_prime"], k=actions.dim, **params)
        model = MODEL_REGISTRY[cfg["model"]["kind"]](lq, actions, **extra)
    except (ValueError, TypeError) as exc:
        raise SchemaError("model.parameters", str(exc)) from exc
    reg = _regularizer(cfg["regularizer"], actions)
    solver = cfg["solver"]
    ref = cfg["regularizer"].get("reference")
    if ref is not None and len(ref) != actions.size:
        raise SchemaError("regularizer.reference", f"expected {actions.size} weights")
    try:
        return MirrorDescentConfig(
            model=model, regularizer=reg, tau=float(solver["tau"]), lam=solver["lambda"],
            max_iters=solver["max_iters"], tol=float(solver["tol"]), T=float(tree["T"]),
            n_steps=tree["n_steps"], d_prime=tree["d_prime"], reference=ref, seed=cfg["seed"],
            n_probe_pairs=solver["n_probe_pairs"],
        )
    except BmdpError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise SchemaError("regularizer.reference", str(exc)) from exc


# ----------------------------------------------------------------------------
# output


def dumps(obj):
    # json writes floats with repr, i.e. the shortest round-trip decimal
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])


def write_outputs(report, out_dir, formats, probes=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "json" in formats:
        (out / "report.json").write_text(dumps(report.to_dict()))
        if probes is not None:
            (out / "probes.json").write_text(dumps(probes.to_dict()))
    if "csv" in formats:
        n_iter = len(report.J_tau)
        rows = []
        for n in range(n_iter):
            rows.append([
                n, report.J_tau[n],
                report.gap[n] if report.gap is not None else None,
                report.step_divergence[n] if n < len(report.step_divergence) else None,
                report.bound[n] if report.bound is not None else None,
            ])
        _write_csv(out / "iterates.csv", ["n", "J_tau", "gap", "step_divergence", "bound_value"], rows)
        _write_csv(out / "rates.csv", ["fitted_rate", "theoretical_rate", "intercept", "r2", "lambda", "tau"],
                   [[report.fitted_rate, report.theoretical_rate, report.rate_intercept, report.rate_r2,
                     report.lam, report.tau]])


def read_report(path):
    try:
        return ConvergenceReport.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"cannot read report {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# commands


def _oracle(cfg, solver_cfg, log):
    if cfg["solver"]["oracle"] == "none":
        return None
    try:
        return oracle_optimal_control(solver_cfg)
    except (OracleTooLarge, OracleDidNotConverge) as exc:
        log(f"oracle unavailable: {exc}")
        return None


def run(cfg, out_dir=None, quiet=False, probes_only=False):
    """Execute a validated configuration; returns the exit code."""
    log = (lambda *a: None) if quiet else (lambda *a: print(*a, file=sys.stderr))
    out_dir = cfg["outputs"]["directory"] if out_dir is None else out_dir
    formats = cfg["outputs"]["formats"]
    try:
        solver_cfg = build_solver_config(cfg)
        if probes_only:
            probes = theorem_probes(solver_cfg)
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "probes.json").write_text(dumps(probes.to_dict()))
            log(_probe_line(probes))
            return 0 if probes.ok else 2
        oracle = _oracle(cfg, solver_cfg, log)
        report = run_mirror_descent(solver_cfg, oracle=oracle)
        probes = None
        if cfg["outputs"]["emit_probe_report"]:
            probes = theorem_probes(solver_cfg, lam=report.lam)
            report.probe_summary = probes.summary()
        write_outputs(report, out_dir, formats, probes)
    except ConfigError:
        raise
    except (BmdpError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log(f"solver error: {type(exc).__name__}: {exc}")
        return 3
    log(f"lambda={report.lam:g} ({report.lam_source})  iterations={report.iterations}  "
        f"J_tau={report.J_tau[-1]:.12g}  dissipation_violations={report.dissipation_violations}")
    if report.fitted_rate is not None:
        log(f"fitted rate {report.fitted_rate:.6f}  (ceiling {report.theoretical_rate:.6f})")
    if probes is not None:
        log(_probe_line(probes))
        if not probes.ok:
            return 2
    return 0


def _probe_line(probes):
    return (f"probes: convexity violations {probes.convexity_violations}, smoothness violations "
            f"{probes.smoothness_violations}, three-point violations {probes.three_point_violations}")


def compare(report_a, report_b):
    """Final unregularised costs and the regularisation-bias estimate of two runs on one problem."""
    for key in ("model", "actions", "tree"):
        if report_a.config.get(key) != report_b.config.get(key):
            raise IncompatibleReports(f"reports differ in {key}")
    finals = [report_a.J0[-1], report_b.J0[-1]]
    best = min(finals)
    return {
        "J0_final": finals,
        "tau": [report_a.tau, report_b.tau],
        "J0_difference": finals[0] - finals[1],
        "bias_estimate": [j - best for j in finals],
    }


def _thread_cap():
    raw = os.environ.get("BMDP_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"BMDP_THREADS must be a positive integer, got {raw!r}")
    return n


def build_parser():
    parser = argparse.ArgumentParser(prog="bmdp", description=__doc__.splitlines()[0])
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("solve", "run mirror descent and write all outputs"),
                       ("probe", "run the sampled theorem probes only")):
        p = sub.add_parser(name, help=text)
        p.add_argument("config")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    p = sub.add_parser("compare", help="compare two report.json files")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        limit = _thread_cap()
        with threadpool_limits(limits=limit):
            if args.command == "compare":
                summary = compare(read_report(args.report_a), read_report(args.report_b))
                for label, j, bias, tau in zip("ab", summary["J0_final"], summary["bias_estimate"],
                                               summary["tau"]):
                    print(f"{label}: tau={tau:g}  J0_final={j!r}  bias_estimate={bias!r}")
                print(f"J0 difference (a - b): {summary['J0_difference']!r}")
                return 0
            cfg = load_config(args.config)
            return run(cfg, out_dir=args.out_dir, quiet=args.quiet, probes_only=args.command == "probe")
    except (ConfigError, SizeExceeded, IncompatibleReports) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
