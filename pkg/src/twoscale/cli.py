"""Configuration-driven experiment runner.

A config is flat ``key = value`` text. Top-level keys select the model
(``benchmark`` plus its parameters, ``model_config`` naming a model file, or
``loss`` plus ``gamma``/``beta``/``q`` for the relaxation commands) together
with ``seed``, ``workers`` and ``out``. Exactly one section, named after the
command, holds that command's parameters::

    benchmark = ou
    seed = 42

    [invariant]
    n_samples = 100000

Every artifact is built in memory and only written once the command has
succeeded, so usage errors leave no files behind. Exit codes: 0 success,
1 numerical failure (the report carries the error), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import ergodic, hjb, homogenize, relax, sde
from .errors import ParameterError, TwoScaleError
from .model import BENCHMARKS, Box, make_benchmark, model_from_config, parse_kv, validate_assumptions

SCHEMA_VERSION = 1
REPORT_NAME = "report.json"
COMMANDS = ("validate", "simulate", "invariant", "exit-times", "cell", "effective-h", "effective-g", "hjb-full",
            "hjb-effective", "converge", "deep-relax", "gap-study")
RELAX_COMMANDS = ("deep-relax", "gap-study")
RELAX_KEYS = {"loss": str, "q": float, "gamma": float, "beta": float, "n": int, "probe_radius": float}
RUNNER_KEYS = ("seed", "workers", "out")

REQUIRED = object()


class UsageError(Exception):
    """Bad command line or config; maps to exit code 2."""


# ---------------------------------------------------------------------------
# output formatting


def _num(v):
    v = float(v)
    if not math.isfinite(v):
        return "null"
    return format(v, ".17g")


def to_json(obj, indent=0):
    """JSON text with every float at 17 significant digits and non-finite values as null."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return to_json(obj.tolist(), indent)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {to_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(to_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else _num(v))
                    for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# parameters


def _floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


_KINDS = {"float": float, "int": int, "floats": _floats, "str": str, "bool": _bool}


def _opt(kind):
    def conv(text):
        if str(text).strip().lower() in ("", "none", "auto"):
            return None
        return _KINDS[kind](text)
    return conv


SCHEMAS = {
    "validate": {"x_lo": ("floats", [-3.0]), "x_hi": ("floats", [3.0]), "y_lo": ("floats", [-3.0]),
                 "y_hi": ("floats", [3.0]), "grid_density": ("int", 21), "tol": ("float", 1e-9),
                 "n_pairs": ("int", 10000)},
    "simulate": {"x0": ("floats", None), "y0": ("floats", None), "dt": ("float", None), "n_paths": ("int", 100),
                 "u": ("floats", None), "n_write": ("int", 10), "record_every": ("int", 1)},
    "invariant": {"x": ("floats", None), "n_samples": ("int", 100000), "burn_in": ("float", 5.0),
                  "thinning": ("float?", None), "dt": ("float", 0.01), "n_chains": ("int", 100),
                  "y0": ("floats", None)},
    "exit-times": {"x": ("floats", None), "y0": ("floats", None), "radii": ("floats", REQUIRED),
                   "dt": ("float", 0.01), "n_paths": ("int", 1000), "censor_horizon": ("float?", None),
                   "delta": ("floats", []), "bridge": ("bool", True)},
    "cell": {"x": ("floats", None), "t": ("float", 0.0), "p": ("floats", None), "P": ("floats", None),
             "radii": ("floats", REQUIRED), "alpha": ("float", homogenize.DEFAULT_ALPHA), "dt": ("float", 0.05),
             "n_paths": ("int", 64), "horizon_factor": ("float", homogenize.DEFAULT_HORIZON_FACTOR),
             "bridge": ("bool", True), "field": ("str", "hamiltonian")},
    "effective-h": {"x_lo": ("float", -2.0), "x_hi": ("float", 2.0), "nx": ("int", 9), "t": ("float", 0.0),
                    "p": ("floats", [-1.0, 0.0, 1.0]), "P": ("floats", [0.0, 0.0, 0.0]),
                    "n_nodes": ("int", 257)},
    "effective-g": {"x": ("floats", None), "radii": ("floats", REQUIRED), "t0": ("float", 1.0),
                    "dt": ("float", 0.01), "n_paths": ("int", 20000), "y0": ("floats", None),
                    "bridge": ("bool", True)},
    "hjb-full": {"x_lo": ("float", -3.0), "x_hi": ("float", 3.0), "nx": ("int", 33), "y_lo": ("float", -3.0),
                 "y_hi": ("float", 3.0), "ny": ("int", 33), "n_saves": ("int", 11), "epsilon": ("float?", None)},
    "hjb-effective": {"x_lo": ("float", -3.0), "x_hi": ("float", 3.0), "nx": ("int", 33), "n_saves": ("int", 11),
                      "n_nodes": ("int", 257)},
    "converge": {"epsilons": ("floats", REQUIRED), "x_lo": ("float", -3.0), "x_hi": ("float", 3.0),
                 "nx": ("int", 33), "y_lo": ("float", -3.0), "y_hi": ("float", 3.0), "ny": ("int", 33),
                 "n_saves": ("int", 11), "coarse_nx": ("int?", None), "coarse_ny": ("int?", None),
                 "probe_lo": ("float", 0.25), "probe_hi": ("float", 0.75), "probe_t_hi": ("float", 0.9),
                 "n_nodes": ("int", 257)},
    "deep-relax": {"epsilon": ("float", REQUIRED), "x0": ("floats", [1.0]), "y0": ("floats", None),
                   "T": ("float", 1.0), "dt": ("float", None), "n_paths": ("int", 1000), "u": ("float", 1.0),
                   "record_every": ("int", 1)},
    "gap-study": {"epsilons": ("floats", REQUIRED), "x0": ("floats", [1.0]), "y0": ("floats", None),
                  "T": ("float", 1.0), "dt": ("float", REQUIRED), "n_paths": ("int", 1000)},
}


def _convert(kind):
    if kind.endswith("?"):
        return _opt(kind[:-1])
    return _KINDS[kind]


def _resolve(command, raw):
    schema = SCHEMAS[command]
    out = {}
    for key in raw:
        if key not in schema:
            raise UsageError(f"unknown key {key!r} in [{command}]; valid: {', '.join(schema)}")
    for key, (kind, default) in schema.items():
        if key in raw:
            try:
                out[key] = _convert(kind)(raw[key])
            except (TypeError, ValueError):
                raise UsageError(f"key {key!r}: cannot parse {raw[key]!r} as {kind.rstrip('?')}") from None
        elif default is REQUIRED:
            raise UsageError(f"missing required key {key!r} in [{command}]")
        else:
            out[key] = default
    return out


@dataclass
class ExperimentConfig:
    command: str
    params: dict
    model_keys: dict
    seed: int
    workers: int = 1
    out: str = "out"
    source_dir: str = "."
    echo: dict = field(default_factory=dict)


def parse_config(text, overrides=None, source_dir="."):
    """Parse config text and apply command-line ``overrides`` (seed, workers, out)."""
    try:
        top, sections = parse_kv(text)
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    if len(sections) != 1:
        raise UsageError(f"config needs exactly one [command] section; valid commands: {', '.join(COMMANDS)}")
    (command, raw), = sections.items()
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}; valid commands: {', '.join(COMMANDS)}")
    top = dict(top)
    for key, value in (overrides or {}).items():
        if value is not None:
            top[key] = str(value)
    for key in ("seed", "workers"):
        if key in top:
            try:
                top[key] = int(top[key])
            except ValueError:
                raise UsageError(f"key {key!r}: expected an integer, got {top[key]!r}") from None
    if "seed" not in top:
        raise UsageError("missing required key 'seed' (set it in the config or pass --seed)")
    workers = top.pop("workers", 1)
    if workers < 1:
        raise UsageError("key 'workers': must be >= 1")
    out = top.pop("out", "out")
    seed = top.pop("seed")
    params = _resolve(command, raw)
    echo = {"command": command, "seed": seed, "model": dict(top), "params": dict(raw)}
    return ExperimentConfig(command, params, top, seed, workers, out, source_dir, echo)


# ---------------------------------------------------------------------------
# model selection


def _build_model(cfg):
    keys = dict(cfg.model_keys)
    if "model_config" in keys:
        if len(keys) > 1:
            raise UsageError("model_config cannot be combined with other model keys")
        path = os.path.join(cfg.source_dir, keys["model_config"])
        try:
            with open(path, encoding="utf-8") as fh:
                return model_from_config(fh.read())
        except OSError as exc:
            raise UsageError(f"key 'model_config': cannot read {path!r}: {exc.strerror}") from None
    name = keys.pop("benchmark", None)
    if name is None:
        raise UsageError("missing required key 'benchmark' (or 'model_config')")
    if name not in BENCHMARKS:
        raise UsageError(f"key 'benchmark': unknown benchmark {name!r}; valid: {', '.join(BENCHMARKS)}")
    try:
        return make_benchmark(name, keys)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"model parameters: {exc}") from None


def _build_relaxation(cfg):
    keys = dict(cfg.model_keys)
    for key in keys:
        if key not in RELAX_KEYS:
            raise UsageError(f"unknown key {key!r} for {cfg.command}; valid: {', '.join(RELAX_KEYS)}")
    try:
        vals = {k: RELAX_KEYS[k](v) for k, v in keys.items()}
    except ValueError as exc:
        raise UsageError(f"relaxation parameters: {exc}") from None
    name = vals.pop("loss", "quadratic")
    if name not in relax.LOSSES:
        raise UsageError(f"key 'loss': unknown loss {name!r}; valid: {', '.join(relax.LOSSES)}")
    if name != "quadratic" and "q" in vals:
        raise UsageError("key 'q' only applies to the quadratic loss")
    try:
        return relax.RelaxationSpec.named(name, **vals)
    except ParameterError as exc:
        raise UsageError(f"relaxation parameters: {exc}") from None


def _vec(value, dim, key, default=0.0):
    if value is None:
        return np.full(dim, default)
    v = np.asarray(value, dtype=float)
    if v.shape != (dim,):
        raise UsageError(f"key {key!r}: expected {dim} value(s), got {len(v)}")
    return v


def _verdict(ok, warn=False):
    return "pass" if ok else ("warn" if warn else "fail")


# ---------------------------------------------------------------------------
# commands; each returns (results, {filename: text})


def _cmd_validate(model, p, cfg):
    n, m = model.n, model.m
    box = Box(_vec(p["x_lo"] * n if len(p["x_lo"]) == 1 else p["x_lo"], n, "x_lo"),
              _vec(p["x_hi"] * n if len(p["x_hi"]) == 1 else p["x_hi"], n, "x_hi"),
              _vec(p["y_lo"] * m if len(p["y_lo"]) == 1 else p["y_lo"], m, "y_lo"),
              _vec(p["y_hi"] * m if len(p["y_hi"]) == 1 else p["y_hi"], m, "y_hi"))
    rep = validate_assumptions(model, box, p["grid_density"], p["tol"], p["n_pairs"], cfg.seed)
    rows = [(k, v.verdict, v.margin) for k, v in rep.verdicts.items()]
    ok = all(v.verdict == "satisfied" for v in rep.verdicts.values())
    bad = any(v.verdict == "violated" for v in rep.verdicts.values())
    results = {"assumptions": rep.to_dict(), "verdict": "pass" if ok else ("fail" if bad else "warn"),
               "reason": "all probed assumptions satisfied" if ok else "see per-assumption verdicts"}
    return results, {"assumptions.csv": _csv(["assumption", "verdict", "margin"], rows)}


def _cmd_simulate(model, p, cfg):
    x0 = _vec(p["x0"], model.n, "x0")
    y0 = _vec(p["y0"], model.m, "y0")
    dt = p["dt"] if p["dt"] is not None else model.epsilon / sde.STIFFNESS_RATIO
    u = model.control_set.points[0] if p["u"] is None else _vec(p["u"], model.control_set.k, "u")
    policy = sde.ControlPolicy.constant(model.control_set, u)
    n_write = min(p["n_write"], p["n_paths"])
    ens = sde.simulate_path_ensemble(model, policy, x0, y0, dt, n_write, cfg.seed, cfg.workers,
                                     record_every=p["record_every"])
    payoff = sde.estimate_payoff(model, policy, 0.0, x0, y0, dt, p["n_paths"], cfg.seed, cfg.workers)
    header = ["path"] + ens.path(0).header()
    rows = []
    for i in range(len(ens)):
        sp = ens.path(i)
        for k in range(len(sp.t)):
            rows.append([sp.path_index, sp.t[k], *sp.x[k], *sp.y[k], *sp.u[k]])
    results = {"dt": dt, "control": np.asarray(u).tolist(), "payoff": payoff.to_dict(), "paths_written": n_write}
    return results, {"paths.csv": _csv(header, rows)}


def _cmd_invariant(model, p, cfg):
    x = _vec(p["x"], model.n, "x")
    y0 = None if p["y0"] is None else _vec(p["y0"], model.m, "y0")
    mu = ergodic.sample_invariant_measure(model, x, p["n_samples"], p["burn_in"], p["thinning"], p["dt"],
                                          cfg.seed, p["n_chains"], y0, cfg.workers)
    mean = np.atleast_1d(mu.mean())
    var = np.atleast_1d(mu.variance())
    se_mean = np.atleast_1d(mu.standard_error())
    results = {"n_samples": len(mu), "mean": mean.tolist(), "variance": var.tolist(),
               "mean_standard_error": se_mean.tolist()}
    if model.fast_log_density is not None and model.m <= 2:
        rule = ergodic.model_gibbs_rule(model, x)
        o_mean = np.atleast_1d(rule.expect(lambda y: y))
        o_var = np.atleast_1d(rule.expect(lambda y: (y - o_mean) ** 2))
        se_var = np.atleast_1d(mu.standard_error(lambda y: (y - mean) ** 2))
        z = max(float(np.max(np.abs(mean - o_mean) / np.maximum(se_mean, 1e-300))),
                float(np.max(np.abs(var - o_var) / np.maximum(se_var, 1e-300))))
        results.update({"oracle_mean": o_mean.tolist(), "oracle_variance": o_var.tolist(),
                        "variance_standard_error": se_var.tolist(), "max_z": z,
                        "verdict": _verdict(z <= 3.0, z <= 5.0),
                        "reason": "moments against Gibbs quadrature, pass within 3 SE, warn within 5 SE"})
    else:
        results.update({"verdict": "warn", "reason": "no closed-form invariant density to compare against"})
    return results, {"measure.csv": mu.to_csv()}


def _cmd_exit_times(model, p, cfg):
    x = _vec(p["x"], model.n, "x")
    y0 = _vec(p["y0"], model.m, "y0")
    ens = ergodic.exit_time_ensemble(model, x, y0, p["radii"], p["dt"], p["n_paths"], p["censor_horizon"],
                                     cfg.seed, cfg.workers, p["bridge"])
    per = []
    rows = []
    for e in ens:
        rec = e.to_dict()
        rec["laplace"] = [{"delta": d, **ergodic.laplace_exit(e, d)} for d in p["delta"]]
        per.append(rec)
        for i, (tv, c) in enumerate(zip(e.times, e.censored)):
            rows.append([i, e.radius, tv, int(c)])
    return {"per_radius": per}, {"exit_times.csv": _csv(["path", "radius", "time", "censored"], rows)}


def _cmd_cell(model, p, cfg):
    n = model.n
    x = _vec(p["x"], n, "x")
    pv = _vec(p["p"], n, "p")
    Pv = _vec(p["P"], n * n, "P").reshape(n, n)
    if p["field"] == "hamiltonian":
        h = None
    elif p["field"] == "y2":
        def h(y):
            return (np.asarray(y) ** 2).sum(-1)
    else:
        raise UsageError(f"key 'field': expected 'hamiltonian' or 'y2', got {p['field']!r}")
    mc = {"dt": p["dt"], "n_paths": p["n_paths"], "seed": cfg.seed, "horizon_factor": p["horizon_factor"],
          "workers": cfg.workers, "bridge": p["bridge"]}
    res = homogenize.effective_hamiltonian_cell_limit(model, p["t"], x, pv, Pv, p["radii"], p["alpha"], mc, h)
    rows = [(r, d, est, se) for r, d, est, se in zip(res["radii"], res["delta_schedule"], res["estimates"],
                                                      res["SEs"])]
    return res, {"cell.csv": _csv(["radius", "delta", "scaled_estimate", "se"], rows)}


def _cmd_effective_h(model, p, cfg):
    if len(p["p"]) != len(p["P"]):
        raise UsageError("keys 'p' and 'P' must have the same length")
    xg = np.linspace(p["x_lo"], p["x_hi"], p["nx"])
    H = homogenize.EffectiveHamiltonian(model, xg, n_nodes=p["n_nodes"])
    rows = []
    for pv, Pv in zip(p["p"], p["P"]):
        vals = H(p["t"], np.full(len(xg), pv), np.full(len(xg), Pv))
        rows += [(xv, pv, Pv, hv) for xv, hv in zip(xg, vals)]
    results = {"nx": len(xg), "p_bound": H.p_bound, "P_bound": H.P_bound, "n_values": len(rows)}
    return results, {"effective_h.csv": _csv(["x", "p", "P", "H"], rows)}


def _cmd_effective_g(model, p, cfg):
    x = _vec(p["x"], model.n, "x")
    y0 = None if p["y0"] is None else _vec(p["y0"], model.m, "y0")
    res = homogenize.effective_terminal_data(model, x, p["radii"], p["t0"], p["dt"], p["n_paths"], cfg.seed, y0,
                                             None, cfg.workers, p["bridge"])
    rows = [(r["radius"], r["T"], r["estimate"], r["standard_error"], r["non_exit_probability"])
            for r in res["per_radius"]]
    return res, {"effective_g.csv": _csv(["radius", "T", "estimate", "se", "non_exit_probability"], rows)}


def _full_grid(p):
    return hjb.GridSpec(p["x_lo"], p["x_hi"], p["nx"], p["y_lo"], p["y_hi"], p["ny"], None, p["n_saves"])


def _meta(field_):
    return {k: v for k, v in field_.metadata.items() if isinstance(v, (int, float, str, bool, list))}


def _cmd_hjb_full(model, p, cfg):
    V = hjb.solve_full_hjb(model, _full_grid(p), p["epsilon"])
    return {"metadata": _meta(V), "growth_K": V.growth_K}, {"value_full.csv": V.to_csv()}


def _effective_parts(model, grid, n_nodes):
    H = homogenize.EffectiveHamiltonian(model, grid.x, n_nodes=n_nodes)
    return H, H.terminal()


def _cmd_hjb_effective(model, p, cfg):
    grid = hjb.GridSpec(p["x_lo"], p["x_hi"], p["nx"], n_saves=p["n_saves"])
    H, g = _effective_parts(model, grid, p["n_nodes"])
    V = hjb.solve_effective_hjb(H, g, grid, model.horizon, model.lam)
    return {"metadata": _meta(V), "growth_K": V.growth_K}, {"value_effective.csv": V.to_csv()}


def _cmd_converge(model, p, cfg):
    grid = _full_grid(p)
    H, g = _effective_parts(model, grid, p["n_nodes"])
    nodes = H._nodes[:, :, 0]
    y_mean = np.sum(H.weights * nodes, axis=1)

    def y_star(xs):
        return np.interp(xs, grid.x, y_mean)

    coarse = coarse_grid = None
    if p["coarse_nx"] is not None:
        ny = p["coarse_ny"] if p["coarse_ny"] is not None else p["coarse_nx"]
        coarse_grid = hjb.GridSpec(p["x_lo"], p["x_hi"], p["coarse_nx"], p["y_lo"], p["y_hi"], ny, None,
                                   p["n_saves"])
        coarse = _effective_parts(model, coarse_grid, p["n_nodes"])
    probe = hjb.ProbeBox(p["probe_lo"], p["probe_hi"], p["probe_t_hi"])
    res = hjb.convergence_study(model, p["epsilons"], grid, H, g, y_star, probe, coarse, coarse_grid)
    res = dict(res)
    res["verdict"] = _verdict(res["verdict"])
    rows = list(zip(res["epsilons"], res["gaps"], res["spreads"]))
    return res, {"converge.csv": _csv(["epsilon", "gap", "spread"], rows)}


def _cmd_deep_relax(spec, p, cfg):
    n = spec.n
    x0 = _vec(p["x0"], n, "x0")
    y0 = x0 if p["y0"] is None else _vec(p["y0"], n, "y0")
    dt = p["dt"] if p["dt"] is not None else p["epsilon"] / sde.STIFFNESS_RATIO
    ens = relax.run_deep_relaxation(spec, p["epsilon"], x0, y0, p["T"], dt, p["u"], p["n_paths"], cfg.seed,
                                    cfg.workers, p["record_every"])
    mx, sx = ens.mean_x()
    my = ens.y.mean(axis=1)
    cols = ["t"] + [f"mean_x_{i + 1}" for i in range(n)] + [f"se_x_{i + 1}" for i in range(n)]
    cols += [f"mean_y_{i + 1}" for i in range(n)]
    rows = [[t, *a, *b, *c] for t, a, b, c in zip(ens.t, mx, sx, my)]
    results = {"dt": dt, "n_paths": p["n_paths"], "final_mean_x": mx[-1].tolist(), "final_se_x": sx[-1].tolist(),
               "lipschitz": spec.lipschitz, "gamma_ok": spec.gamma_ok}
    return results, {"deep_relax.csv": _csv(cols, rows)}


def _cmd_gap_study(spec, p, cfg):
    n = spec.n
    x0 = _vec(p["x0"], n, "x0")
    y0 = x0 if p["y0"] is None else _vec(p["y0"], n, "y0")
    study = relax.trajectory_gap_study(spec, p["epsilons"], x0, y0, p["T"], p["dt"], p["n_paths"], cfg.seed,
                                       None, cfg.workers)
    descent = relax.run_effective_descent(spec, x0, p["T"], p["dt"], check=False)
    results = study.to_dict()
    results["reason"] = "sup gap strictly decreasing in epsilon and final gap within max(2% |x0|, 3 SE)"
    return results, {"gap_study.csv": study.to_csv(), "descent.csv": descent.to_csv()}


_DISPATCH = {
    "validate": _cmd_validate, "simulate": _cmd_simulate, "invariant": _cmd_invariant,
    "exit-times": _cmd_exit_times, "cell": _cmd_cell, "effective-h": _cmd_effective_h,
    "effective-g": _cmd_effective_g, "hjb-full": _cmd_hjb_full, "hjb-effective": _cmd_hjb_effective,
    "converge": _cmd_converge, "deep-relax": _cmd_deep_relax, "gap-study": _cmd_gap_study,
}


# ---------------------------------------------------------------------------
# runner


@dataclass
class ExperimentReport:
    config: dict
    status: str
    results: dict
    artifacts: dict
    error: dict = None
    wall_clock: float = 0.0

    def manifest(self):
        entries = [{"file": name, "bytes": len(text.encode("utf-8")),
                    "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest()}
                   for name, text in sorted(self.artifacts.items())]
        return entries + [{"file": REPORT_NAME}]

    def document(self):
        """The report as written to disk: a pure function of the config."""
        return {"schema_version": SCHEMA_VERSION, "config": self.config, "status": self.status,
                "results": self.results, "error": self.error, "manifest": self.manifest()}

    def file_text(self):
        return to_json(self.document()) + "\n"

    def stdout_text(self, workers):
        doc = self.document()
        doc["runtime"] = {"wall_clock_seconds": self.wall_clock, "workers": workers}
        return to_json(doc) + "\n"


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run one configured command. Raises :class:`UsageError` on usage problems."""
    start = time.perf_counter()
    if cfg.command in RELAX_COMMANDS:
        subject = _build_relaxation(cfg)
    else:
        subject = _build_model(cfg)
    try:
        results, artifacts = _DISPATCH[cfg.command](subject, cfg.params, cfg)
        status, error = "ok", None
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    except (TwoScaleError, FloatingPointError, np.linalg.LinAlgError) as exc:
        results, artifacts = {}, {}
        status, error = "error", {"type": type(exc).__name__, "message": str(exc)}
        for attr in ("time", "state", "node", "required"):
            if hasattr(exc, attr):
                error[attr] = getattr(exc, attr)
    return ExperimentReport(cfg.echo, status, results, artifacts, error, time.perf_counter() - start)


def write_outputs(report: ExperimentReport, out_dir):
    """Write artifacts and the report; remove files a previous run listed but this one does not."""
    os.makedirs(out_dir, exist_ok=True)
    old_report = os.path.join(out_dir, REPORT_NAME)
    stale = set()
    if os.path.exists(old_report):
        try:
            with open(old_report, encoding="utf-8") as fh:
                stale = {e["file"] for e in json.load(fh).get("manifest", [])}
        except (OSError, ValueError, KeyError, TypeError):
            stale = set()
    for name in stale - set(report.artifacts) - {REPORT_NAME}:
        path = os.path.join(out_dir, os.path.basename(name))
        if os.path.isfile(path):
            os.remove(path)
    for name, text in report.artifacts.items():
        with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    with open(old_report, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.file_text())


def build_parser():
    ap = argparse.ArgumentParser(prog="twoscale", description="Run a configured two-scale experiment.")
    ap.add_argument("config", help="path to a key = value config file")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--workers", type=int, default=None, help="worker threads (does not change results)")
    ap.add_argument("--out", default=None, help="output directory")
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config {args.config!r}: {exc.strerror}", file=sys.stderr)
        return 2
    overrides = {"seed": args.seed, "workers": args.workers, "out": args.out}
    try:
        cfg = parse_config(text, overrides, os.path.dirname(os.path.abspath(args.config)))
        report = run_experiment(cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    write_outputs(report, cfg.out)
    sys.stdout.write(report.stdout_text(cfg.workers))
    return 0 if report.status == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
