"""Scenario-driven command line front end.

Each verb reads a JSON scenario config, runs the matching pipeline, and
writes report.json plus any requested bulk data under the output directory.
Reports embed a reproduction stanza (the effective config and the code
version) so artifacts can be regenerated byte for byte; the only field that
varies between reruns of one scenario is created_utc.

Exit codes: 0 when the run passed or completed, 1 on a usage error
(bad flags, unreadable or schema-invalid config; nothing is written),
2 when a requested check or certificate failed, 3 when the certificate
came back inconclusive.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import export
from .adjoint import martingale_check
from .certificate import CertifyConfig, certify
from .planner import (
    BangBangPolicy,
    ShootConfig,
    SopInstance,
    assemble_solution,
    bangbang_necessity,
    safety_check,
    solve_sop,
)
from .risk import AVaR, Expectation, MixtureAVaR, risk_subgradient, risk_value
from .rng import ensemble_normals
from .sde import (
    ControlLaw,
    DynamicsSpec,
    StateEnsemble,
    euler_maruyama,
    make_grid,
    sample_brownian,
    scalar_linear_dynamics,
    strong_convergence_order,
)
from .variational import ito_counterexample, linearization_rate, tangent_from_control

REPORT_VERSION = "riskpmp_report_v1"
THREADS_ENV = "RISKPMP_THREADS"

_EXIT = {"pass": 0, "completed": 0, "fail": 2, "inconclusive": 3}


class UsageError(Exception):
    """Config or command-line problem; maps to exit code 1, no artifacts."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags, which this tool reserves for
    # failed checks, so route parse errors through UsageError instead
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# scenario schemas

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_BOOL = {"type": "boolean"}
_NUMS = {"type": "array", "items": _NUM}
_SEED = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}
_UNIT = {"type": "number", "exclusiveMinimum": 0, "maximum": 1}


def _obj(props, required=()):
    return {
        "type": "object",
        "properties": props,
        "required": list(required),
        "additionalProperties": False,
    }


_DYNAMICS = _obj(
    {
        "name": {"enum": ["scalar-linear", "double-integrator"]},
        "a": _NUM,
        "b": _NUM,
        "cubic": _NUM,
        "noise": _NONNEG,
    },
    ["name"],
)

_INSTANCE = _obj(
    {
        "y0": _NUM,
        "v0": _NUM,
        "y_target": _NUM,
        "horizon": _POS,
        "alpha": _UNIT,
        "noise": _NONNEG,
    },
    ["y0", "v0", "y_target", "horizon", "alpha"],
)

_POLICY = {
    "oneOf": [
        _obj(
            {
                "initial_sign": {"enum": [-1, 1]},
                "switches": {"type": "array", "items": _NUM, "maxItems": 2},
            },
            ["initial_sign"],
        ),
        _obj({"constant": _NUM}, ["constant"]),
    ]
}

_TOLERANCES = _obj(
    {
        "scale": _POS,
        "slackness_tol": _POS,
        "active_tol": _POS,
        "feasibility_tol": _POS,
        "risk_gap_tol": _POS,
        "gap_threshold": _POS,
        "violating_measure_tol": _POS,
        "bsde_residual_bound": _POS,
        "normality_tol": _POS,
        "martingale_sigma": _POS,
    }
)

_SHOOT = _obj(
    {
        "max_switches": {"type": "integer", "minimum": 0, "maximum": 2},
        "lattice": {"type": "integer", "minimum": 2},
        "coordinate_rounds": {"type": "integer", "minimum": 0},
    }
)

_MEASURE = _obj(
    {
        "type": {"enum": ["expectation", "avar", "mixture"]},
        "alpha": _UNIT,
        "alphas": {"type": "array", "items": _UNIT, "minItems": 1},
        "weights": {"type": "array", "items": _POS, "minItems": 1},
    },
    ["type"],
)


def _scenario(kind, props, required=()):
    base = {"kind": {"const": kind}, "seed": _SEED, "out_dir": {"type": "string"}}
    base.update(props)
    return _obj(base, ["kind", "seed"] + list(required))


_SCHEMAS = {
    "simulate": _scenario(
        "simulate",
        {
            "dynamics": _DYNAMICS,
            "x0": _NUMS,
            "control": _obj({"constant": {"anyOf": [_NUM, _NUMS]}}, ["constant"]),
            "horizon": _POS,
            "n_steps": _POSINT,
            "n_paths": _POSINT,
            "write_paths": _BOOL,
            "binary": _BOOL,
        },
        ["dynamics", "x0", "horizon", "n_steps", "n_paths"],
    ),
    "risk-eval": _scenario(
        "risk-eval",
        {
            "measure": _MEASURE,
            "samples": {"type": "array", "items": _NUM, "minItems": 1},
            "sample": _obj({"n": _POSINT, "mean": _NUM, "std": _NONNEG}, ["n"]),
            "write_xi": _BOOL,
        },
        ["measure"],
    ),
    "adjoint": _scenario(
        "adjoint",
        {
            "instance": _INSTANCE,
            "policy": _POLICY,
            "n_steps": _POSINT,
            "n_paths": _POSINT,
            "write_costates": _BOOL,
            "write_paths": _BOOL,
            "binary": _BOOL,
        },
        ["instance", "policy", "n_steps", "n_paths"],
    ),
    "certify": _scenario(
        "certify",
        {
            "instance": _INSTANCE,
            "policy": _POLICY,
            "shoot": _SHOOT,
            "tolerances": _TOLERANCES,
            "n_steps": _POSINT,
            "n_paths": _POSINT,
            "write_costates": _BOOL,
            "write_paths": _BOOL,
            "binary": _BOOL,
        },
        ["instance", "n_steps", "n_paths"],
    ),
    "sop-solve": _scenario(
        "sop-solve",
        {
            "instance": _INSTANCE,
            "shoot": _SHOOT,
            "tolerances": _TOLERANCES,
            "certify": _BOOL,
            "n_steps": _POSINT,
            "n_paths": _POSINT,
            "write_costates": _BOOL,
            "write_paths": _BOOL,
            "binary": _BOOL,
        },
        ["instance", "n_steps", "n_paths"],
    ),
    "counterexample": _scenario("counterexample", {}),
    "convergence": _scenario(
        "convergence",
        {
            "study": {"enum": ["linearization-rate", "strong-order"]},
            "problem": _DYNAMICS,
            "x0": {"anyOf": [_NUM, _NUMS]},
            "horizon": _POS,
            "n_steps": _POSINT,
            "n_paths": _POSINT,
            "u_star": _NUM,
            "w": _NUM,
            "epsilons": {"type": "array", "items": _UNIT, "minItems": 1},
            "n_steps_levels": {"type": "array", "items": _POSINT, "minItems": 2},
        },
        ["study"],
    ),
}

_STUDY_FIELDS = {
    "linearization-rate": {
        "required": ["problem", "x0", "horizon", "n_steps", "n_paths", "u_star", "w", "epsilons"],
        "forbidden": ["n_steps_levels"],
    },
    "strong-order": {
        "required": ["problem", "x0", "horizon", "n_steps_levels", "n_paths"],
        "forbidden": ["u_star", "w", "epsilons", "n_steps"],
    },
}

_DYNAMICS_PARAMS = {
    "scalar-linear": {"a", "b"},
    "double-integrator": {"cubic", "noise"},
}


def _check_dynamics(cfg, where):
    extra = (set(cfg) - {"name"}) - _DYNAMICS_PARAMS[cfg["name"]]
    if extra:
        raise UsageError(
            f"{where}: {sorted(extra)} do not apply to dynamics {cfg['name']!r}"
        )


def _post_validate(cfg):
    kind = cfg["kind"]
    if kind == "simulate":
        _check_dynamics(cfg["dynamics"], "dynamics")
    elif kind == "risk-eval":
        if ("samples" in cfg) == ("sample" in cfg):
            raise UsageError("provide exactly one of 'samples' and 'sample'")
        m = cfg["measure"]
        if m["type"] == "avar" and "alpha" not in m:
            raise UsageError("avar measure needs an 'alpha'")
        if m["type"] == "mixture":
            if "alphas" not in m or "weights" not in m:
                raise UsageError("mixture measure needs 'alphas' and 'weights'")
            if len(m["alphas"]) != len(m["weights"]):
                raise UsageError("mixture 'alphas' and 'weights' differ in length")
        if m["type"] == "expectation" and len(m) > 1:
            raise UsageError("expectation measure takes no parameters")
    elif kind == "certify":
        if "policy" in cfg and "shoot" in cfg:
            raise UsageError("'shoot' settings only apply when no policy is given")
    elif kind == "convergence":
        rules = _STUDY_FIELDS[cfg["study"]]
        missing = [k for k in rules["required"] if k not in cfg]
        if missing:
            raise UsageError(f"study {cfg['study']!r} needs {missing}")
        present = [k for k in rules["forbidden"] if k in cfg]
        if present:
            raise UsageError(f"study {cfg['study']!r} does not use {present}")
        _check_dynamics(cfg["problem"], "problem")
        if "epsilons" in cfg:
            eps = cfg["epsilons"]
            if any(b >= a for a, b in zip(eps, eps[1:])):
                raise UsageError("epsilons must be strictly decreasing")
        if cfg["study"] == "strong-order":
            if cfg["problem"]["name"] != "scalar-linear":
                raise UsageError("strong-order needs dynamics with a closed form: scalar-linear")
            levels = sorted(cfg["n_steps_levels"])
            if any(levels[-1] % k for k in levels):
                raise UsageError("every level in n_steps_levels must divide the finest level")


def load_scenario(path, kind):
    """Read, parse, and schema-validate a scenario config for the given verb."""
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config: {exc}") from exc
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    if cfg.get("kind") != kind:
        raise UsageError(f"config kind {cfg.get('kind')!r} does not match verb {kind!r}")
    try:
        jsonschema.validate(cfg, _SCHEMAS[kind])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "config"
        raise UsageError(f"config rejected at {where}: {exc.message}") from exc
    _post_validate(cfg)
    return cfg


# ---------------------------------------------------------------------------
# config -> domain objects


def _double_integrator_dynamics(cubic=0.0, noise=1.0):
    cubic = float(cubic)
    noise = float(noise)

    def drift(t, x, u):
        return np.stack([x[:, 1], u[:, 0] - cubic * x[:, 0] ** 3], axis=1)

    def diffusion(t, x, u):
        out = np.zeros(x.shape + (1,))
        out[:, 0, 0] = noise
        return out

    def drift_jac(t, x, u):
        jac = np.zeros((x.shape[0], 2, 2))
        jac[:, 0, 1] = 1.0
        jac[:, 1, 0] = -3.0 * cubic * x[:, 0] ** 2
        return jac

    return DynamicsSpec(
        state_dim=2,
        control_dim=1,
        noise_dim=1,
        drift=drift,
        diffusion=diffusion,
        drift_jac=drift_jac,
        control_grid=np.linspace(-1, 1, 21),
    )


def _dynamics(cfg) -> DynamicsSpec:
    if cfg["name"] == "scalar-linear":
        return scalar_linear_dynamics(cfg.get("a", 0.8), cfg.get("b", 0.3))
    return _double_integrator_dynamics(cfg.get("cubic", 0.0), cfg.get("noise", 1.0))


def _measure(cfg):
    try:
        if cfg["type"] == "expectation":
            return Expectation()
        if cfg["type"] == "avar":
            return AVaR(cfg["alpha"])
        return MixtureAVaR(cfg["alphas"], cfg["weights"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _instance(cfg) -> SopInstance:
    try:
        return SopInstance(
            y0=cfg["y0"],
            v0=cfg["v0"],
            y_target=cfg["y_target"],
            horizon=cfg["horizon"],
            alpha=cfg["alpha"],
            noise=cfg.get("noise", 1.0),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _policy_values(cfg, instance, grid):
    """Control values on the grid for an explicit candidate policy."""
    if "constant" in cfg:
        c = float(cfg["constant"])
        return None, np.full((grid.n_steps, 1), c)
    try:
        policy = BangBangPolicy(
            initial_sign=float(cfg["initial_sign"]),
            switches=tuple(float(s) for s in cfg.get("switches", ())),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for s in policy.switches:
        if not 0.0 <= s <= instance.horizon:
            raise UsageError(f"switch time {s} lies outside [0, {instance.horizon}]")
    return policy, policy.on_grid(grid)


# ---------------------------------------------------------------------------
# serialization helpers


def _jsonable(value):
    if is_dataclass(value) and not isinstance(value, type):
        return _jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        return float(value)
    return value


def _fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def _write_rows(path, columns, rows):
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


_PLOT_SECTIONS = {
    "rates": ("rates.csv", ("eps", "r")),
    "strong_order": ("strong_order.csv", ("n_steps", "rms_error")),
    "costate_mean": ("costate_mean.csv", ("t", "mean_p_y", "stderr")),
    "gap_hist": ("gap_hist.csv", ("bin_lo", "bin_hi", "count")),
    "incumbents": ("incumbents.csv", ("evaluation", "best_cost")),
}


def emit_plot_data(report, out_dir):
    """Write the report's tabular sections as tidy CSVs; returns filenames.

    A section that is present but empty still produces its header row, so
    downstream plotting scripts never special-case missing files.
    """
    out = Path(out_dir)
    results = report.get("results", {})
    written = []
    for key, (fname, columns) in _PLOT_SECTIONS.items():
        if key not in results:
            continue
        _write_rows(out / fname, columns, results[key])
        written.append(fname)
    return written


def _code_version():
    try:
        return metadata.version("riskpmp")
    except metadata.PackageNotFoundError:
        return "unknown"


def _costate_mean_rows(costates):
    p = costates.p
    stderr = p[:, :, 0].std(axis=0, ddof=1) / np.sqrt(p.shape[0])
    return [
        {"t": t, "mean_p_y": m, "stderr": s}
        for t, m, s in zip(costates.grid.nodes, p[:, :, 0].mean(axis=0), stderr)
    ]


def _gap_hist_rows(gaps, bins=32):
    flat = np.asarray(gaps).ravel()
    hi = max(float(flat.max()), 1e-12)
    counts, edges = np.histogram(flat, bins=bins, range=(0.0, hi))
    return [
        {"bin_lo": lo, "bin_hi": hi_, "count": int(c)}
        for lo, hi_, c in zip(edges[:-1], edges[1:], counts)
    ]


def _dump_block(cfg, ctx, label, grid, values):
    export.write_dump(
        ctx.out_dir / f"{label}.bin",
        values,
        state_dim=values.shape[2],
        noise_dim=1,
        n_steps=grid.n_steps,
        n_paths=values.shape[0],
        seed=cfg["seed"],
    )
    return f"{label}.bin"


def _write_state_artifacts(cfg, ctx, states, default=True):
    if not cfg.get("write_paths", default):
        return {}
    export.write_csv(ctx.out_dir / "paths.csv", states.grid.nodes, states.values, prefix="x")
    artifacts = {"paths_csv": "paths.csv"}
    if cfg.get("binary", False):
        artifacts["paths_dump"] = _dump_block(cfg, ctx, "paths", states.grid, states.values)
    return artifacts


def _write_costate_artifacts(cfg, ctx, costates):
    if not cfg.get("write_costates", True):
        return {}
    grid = costates.grid
    export.write_csv(ctx.out_dir / "costates.csv", grid.nodes, costates.p, prefix="p")
    q = costates.q
    flat = q.reshape(q.shape[0], q.shape[1], -1)
    export.write_csv(ctx.out_dir / "qcoef.csv", grid.nodes[:-1], flat, prefix="q")
    artifacts = {"costates_csv": "costates.csv", "martingale_integrand_csv": "qcoef.csv"}
    if cfg.get("binary", False):
        artifacts["costates_dump"] = _dump_block(cfg, ctx, "costates", grid, costates.p)
    return artifacts


# ---------------------------------------------------------------------------
# verb runners


class RunContext:
    def __init__(self, out_dir, threads):
        self.out_dir = Path(out_dir)
        self.threads = threads


def _simulate_ensemble(dyn, law, x0, grid, n_paths, seed, threads):
    if threads <= 1:
        return euler_maruyama(dyn, law, x0, sample_brownian(grid, dyn.noise_dim, n_paths, seed))
    # paths are independent and the generator is counter-based in the global
    # path index, so disjoint chunks reproduce the single-pass ensemble
    # bit for bit in any chunking
    values = np.empty((n_paths, grid.n_steps + 1, dyn.state_dim))
    failures = np.full(n_paths, -1, dtype=int)
    chunk = -(-n_paths // threads)
    spans = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]

    def work(span):
        lo, hi = span
        bm = sample_brownian(grid, dyn.noise_dim, hi - lo, seed, path_offset=lo)
        part = euler_maruyama(dyn, law, x0, bm)
        values[lo:hi] = part.values
        if part.first_failure is not None:
            failures[lo:hi] = part.first_failure

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(work, spans))
    return StateEnsemble(grid, values, failures)


def _run_simulate(cfg, ctx):
    dyn = _dynamics(cfg["dynamics"])
    x0 = np.asarray(cfg["x0"], dtype=float)
    if x0.shape != (dyn.state_dim,):
        raise UsageError(f"x0 must have {dyn.state_dim} components")
    if "control" in cfg:
        u = np.atleast_1d(np.asarray(cfg["control"]["constant"], dtype=float))
    else:
        u = np.zeros(dyn.control_dim)
    if u.shape != (dyn.control_dim,):
        raise UsageError(f"control must have {dyn.control_dim} components")
    grid = make_grid(cfg["horizon"], cfg["n_steps"])
    law = ControlLaw(np.tile(u, (grid.n_steps, 1)))
    states = _simulate_ensemble(dyn, law, x0, grid, cfg["n_paths"], cfg["seed"], ctx.threads)
    failed = states.failed_paths
    terminal = states.values[:, -1, :]
    results = {
        "n_paths": cfg["n_paths"],
        "n_steps": cfg["n_steps"],
        "failed_paths": int(failed.size),
        "terminal_mean": terminal.mean(axis=0),
        "terminal_std": terminal.std(axis=0, ddof=1) if cfg["n_paths"] > 1 else np.zeros(dyn.state_dim),
    }
    artifacts = _write_state_artifacts(cfg, ctx, states)
    return "completed", results, artifacts


def _run_risk_eval(cfg, ctx):
    measure = _measure(cfg["measure"])
    if "samples" in cfg:
        z = np.asarray(cfg["samples"], dtype=float)
    else:
        spec = cfg["sample"]
        draws = ensemble_normals(cfg["seed"], spec["n"], 1)[:, 0]
        z = spec.get("mean", 0.0) + spec.get("std", 1.0) * draws
    value = risk_value(measure, z)
    sub = risk_subgradient(measure, z)
    mean_xi = float(sub.xi.mean())
    pairing = float(np.mean(sub.xi * z))
    tol = 1e-9 + 1e-12 * abs(value)
    status = "pass" if abs(mean_xi - 1.0) <= 1e-9 and abs(pairing - value) <= tol else "fail"
    results = {
        "n": int(z.size),
        "value": value,
        "subgradient": {
            "mean_xi": mean_xi,
            "pairing": pairing,
            "quantile": sub.quantile,
            "atom_weight": sub.atom_weight,
            "boundary_hit": sub.boundary_hit,
            "unique": sub.unique,
        },
    }
    artifacts = {}
    if cfg.get("write_xi", False):
        rows = [{"index": i, "z": zi, "xi": xi} for i, (zi, xi) in enumerate(zip(z, sub.xi))]
        _write_rows(ctx.out_dir / "xi.csv", ("index", "z", "xi"), rows)
        artifacts["xi_csv"] = "xi.csv"
    return status, results, artifacts


def _candidate_solution(cfg, ctx):
    instance = _instance(cfg["instance"])
    grid = make_grid(instance.horizon, cfg["n_steps"])
    brownian = sample_brownian(grid, 1, cfg["n_paths"], cfg["seed"])
    policy, values = _policy_values(cfg["policy"], instance, grid)
    return assemble_solution(instance, values, brownian, policy=policy)


def _diagnostics_summary(costates):
    diag = costates.diagnostics
    return {
        "basis_size": diag.basis_size,
        "residual_rms": diag.residual_rms,
        "mu_residual_rms": diag.mu_residual_rms,
        "ridge_flagged": diag.ridge_flagged,
        "bsde_residual_max": costates.bsde_residual_max,
    }


def _run_adjoint(cfg, ctx):
    sol = _candidate_solution(cfg, ctx)
    mart = martingale_check(sol.costates, sol.fund)
    results = {
        "regression": _diagnostics_summary(sol.costates),
        "martingale": {
            "passed": mart.passed,
            "max_abs_slope": float(np.max(np.abs(mart.slopes))),
            "max_stderr": float(np.max(mart.stderrs)),
        },
        "costate_mean": _costate_mean_rows(sol.costates),
    }
    artifacts = _write_state_artifacts(cfg, ctx, sol.states, default=False)
    artifacts.update(_write_costate_artifacts(cfg, ctx, sol.costates))
    return ("pass" if mart.passed else "fail"), results, artifacts


def _certify_solution(cfg, ctx, sol):
    try:
        config = CertifyConfig(**cfg.get("tolerances", {}))
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    cert, gaps = certify(sol.problem, sol.bundle, config)
    cert_text = json.dumps(cert.as_dict(), sort_keys=True, indent=2) + "\n"
    (ctx.out_dir / "certificate.json").write_text(cert_text)
    results = {
        "certificate": cert.as_dict(),
        "max_gap": {
            "mean": gaps.mean,
            "max": gaps.max,
            "violating_fractions": {format(k, "g"): v for k, v in gaps.violating_fractions.items()},
        },
        "gap_hist": _gap_hist_rows(gaps.gaps),
        "costate_mean": _costate_mean_rows(sol.costates),
    }
    return cert.verdict, results, {"certificate": "certificate.json"}


def _run_certify(cfg, ctx):
    if "policy" in cfg:
        sol = _candidate_solution(cfg, ctx)
    else:
        sol = solve_sop(
            _instance(cfg["instance"]),
            n_steps=cfg["n_steps"],
            n_paths=cfg["n_paths"],
            seed=cfg["seed"],
            config=ShootConfig(**cfg.get("shoot", {})),
        )
    status, results, artifacts = _certify_solution(cfg, ctx, sol)
    artifacts.update(_write_state_artifacts(cfg, ctx, sol.states, default=False))
    artifacts.update(_write_costate_artifacts(cfg, ctx, sol.costates))
    return status, results, artifacts


def _run_sop_solve(cfg, ctx):
    instance = _instance(cfg["instance"])
    sol = solve_sop(
        instance,
        n_steps=cfg["n_steps"],
        n_paths=cfg["n_paths"],
        seed=cfg["seed"],
        config=ShootConfig(**cfg.get("shoot", {})),
    )
    safety = safety_check(instance, sol.states)
    necessity = bangbang_necessity(sol)
    results = {
        "policy": {
            "initial_sign": sol.policy.initial_sign,
            "switches": list(sol.policy.switches),
        },
        "cost": sol.cost,
        "evaluations": len(sol.incumbents),
        "incumbents": [
            {"evaluation": i + 1, "best_cost": c} for i, c in enumerate(sol.incumbents)
        ],
        "safety": {
            "avar_terminal_position": safety.avar_value,
            "margin": safety.margin,
            "band": safety.band,
            "safe": safety.safe,
        },
        "bangbang": {
            "status": necessity.status,
            "saturation_fraction": necessity.saturation_fraction,
            "interior_windows": necessity.interior_windows,
            "zero_band_windows": necessity.zero_band_windows,
            "pairing_mean": necessity.pairing_mean,
            "pairing_band": necessity.pairing_band,
            "chain": necessity.chain,
        },
        "costate_mean": _costate_mean_rows(sol.costates),
    }
    artifacts = {}
    status = "completed"
    if cfg.get("certify", True):
        status, cert_results, artifacts = _certify_solution(cfg, ctx, sol)
        cert_results.pop("costate_mean")
        results.update(cert_results)
    artifacts.update(_write_state_artifacts(cfg, ctx, sol.states, default=False))
    artifacts.update(_write_costate_artifacts(cfg, ctx, sol.costates))
    return status, results, artifacts


def _run_counterexample(cfg, ctx):
    rep = ito_counterexample()
    ok = abs(rep.pointwise_min_sq_dist - 0.2) <= 1e-9 and rep.lebesgue_gap == 0.0
    results = {
        "ito_gap_lower_bound": rep.ito_lower_bound,
        "pointwise_min_sq_dist": rep.pointwise_min_sq_dist,
        "target": list(rep.target),
        "nearest_points": [list(p) for p in rep.nearest_points],
        "lebesgue_selection": rep.lebesgue_selection,
        "lebesgue_gap": rep.lebesgue_gap,
    }
    return ("pass" if ok else "fail"), results, {}


def _run_convergence(cfg, ctx):
    dyn = _dynamics(cfg["problem"])
    x0 = np.atleast_1d(np.asarray(cfg["x0"], dtype=float))
    if x0.shape != (dyn.state_dim,):
        raise UsageError(f"x0 must have {dyn.state_dim} components")
    if cfg["study"] == "strong-order":
        rep = strong_convergence_order(
            dyn, x0, cfg["horizon"], cfg["n_steps_levels"], cfg["n_paths"], cfg["seed"]
        )
        results = {
            "estimate": rep.estimate,
            "pairwise_orders": rep.pairwise_orders,
            "strong_order": [
                {"n_steps": int(k), "rms_error": float(e)}
                for k, e in zip(rep.n_steps_levels, rep.errors)
            ],
        }
        return "completed", results, {}
    grid = make_grid(cfg["horizon"], cfg["n_steps"])
    brownian = sample_brownian(grid, dyn.noise_dim, cfg["n_paths"], cfg["seed"])
    u_star = ControlLaw.constant(cfg["u_star"], grid.n_steps)
    states = euler_maruyama(dyn, u_star, x0, brownian)
    sel = tangent_from_control(dyn, states, u_star, ControlLaw.constant(cfg["w"], grid.n_steps))
    table = linearization_rate(dyn, states, u_star, sel, cfg["epsilons"], brownian)
    results = {
        "passed": table.passed,
        "rates": [{"eps": e, "r": r} for e, r in table.rows()],
    }
    return ("pass" if table.passed else "fail"), results, {}


_RUNNERS = {
    "simulate": _run_simulate,
    "risk-eval": _run_risk_eval,
    "adjoint": _run_adjoint,
    "certify": _run_certify,
    "sop-solve": _run_sop_solve,
    "counterexample": _run_counterexample,
    "convergence": _run_convergence,
}


# ---------------------------------------------------------------------------
# orchestration


def _resolve_threads(flag_value):
    if flag_value is not None:
        value = flag_value
    else:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            value = int(raw)
        except ValueError as exc:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if value < 1:
        raise UsageError(f"thread count must be at least 1, got {value}")
    return value


def build_parser():
    parser = _Parser(prog="riskpmp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", metavar="verb")
    sub.required = True
    for verb in _SCHEMAS:
        p = sub.add_parser(verb, help=f"run a {verb} scenario")
        p.add_argument("--config", required=True, help="path to the JSON scenario config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument(
            "--threads",
            type=int,
            help=f"worker threads; results do not depend on it (env {THREADS_ENV})",
        )
    return parser


def run(argv):
    args = build_parser().parse_args(argv)
    threads = _resolve_threads(args.threads)
    cfg = load_scenario(args.config, args.verb)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise UsageError(f"seed must lie in [0, 2^64), got {args.seed}")
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    out_dir = Path(cfg.get("out_dir", "riskpmp_out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = RunContext(out_dir, threads)

    status, results, artifacts = _RUNNERS[args.verb](cfg, ctx)

    # the report must not record the invocation itself: thread count and
    # command line may vary between byte-identical reruns of one scenario
    report = {
        "version": REPORT_VERSION,
        "kind": args.verb,
        "status": status,
        "seed": cfg["seed"],
        "results": _jsonable(results),
        "artifacts": dict(artifacts),
        "reproduction": {
            "config": cfg,
            "code_version": _code_version(),
        },
        "created_utc": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
    }
    report["artifacts"]["plots"] = emit_plot_data(report, out_dir)
    report["artifacts"]["report"] = "report.json"
    (out_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"{args.verb}: {status} ({out_dir / 'report.json'})")
    return _EXIT[status]


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        return run(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
