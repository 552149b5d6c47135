"""Batch command-line front end.

    mfcx <subcommand> --config FILE --out DIR [--seed S] [--threads K]

Every run validates its JSON config, writes DIR/manifest.json marked
incomplete, then its result files, and finally marks the manifest complete.
Exit status: 0 success, 1 configuration error, 2 solver failure. Failures
also leave DIR/error.json.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import scipy

from . import __version__

SUBCOMMANDS = ("liquidate", "lq", "pontryagin-check", "martingale-check", "transport-ladder", "lift")

CSV_HELP = {
    "liquidate": "trajectory.csv: t,Q,alpha,S (ensemble means); residuals.json: first-order and adjoint residuals, cost",
    "lq": "riccati.csv: t,eta_bar,eta,chi; report.json: Riccati constants, residuals, cost",
    "pontryagin-check": "residual.csv: t,max,mean (per-time residual); report.json: residual summary",
    "martingale-check": "windows.csv: start,end,wald; report.json: verdict",
    "transport-ladder": "ladder.csv: n,value,margin,gap_to_reference; couplings.json: kernel tables; report.json",
    "lift": "lift.csv: t,mean_X,var_X,mean_alpha; report.json: P(n) and the costs of the lifted paths",
}


class ConfigError(ValueError):
    """Schema violation; `pointer` is the JSON pointer of the offending field."""

    def __init__(self, pointer: str, message: str) -> None:
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
        self.message = message


class SolverFailure(RuntimeError):
    def __init__(self, message: str, **details: Any) -> None:
        super().__init__(message)
        self.details = details


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Field:
    kind: str  # "number", "int", "bool", "str", "object", "numbers", "any"
    default: Any = None
    required: bool = False
    choices: Optional[tuple] = None
    schema: Optional[dict] = None
    check: Optional[Callable[[Any], Optional[str]]] = None


def positive(v) -> Optional[str]:
    return None if v > 0 else "must be positive"


def nonnegative(v) -> Optional[str]:
    return None if v >= 0 else "must be nonnegative"


def _validate(data: Any, schema: dict, pointer: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(pointer, "expected an object")
    for key in data:
        if key not in schema:
            raise ConfigError(f"{pointer}/{key}", "unknown key")
    out = {}
    for key, spec in schema.items():
        ptr = f"{pointer}/{key}"
        if key not in data:
            if spec.required:
                raise ConfigError(ptr, "required key is missing")
            if spec.kind == "object" and spec.default is not None:
                out[key] = _validate(copy.deepcopy(spec.default), spec.schema or {}, ptr)
            elif spec.default is not None:
                out[key] = copy.deepcopy(spec.default)
            continue
        out[key] = _coerce(data[key], spec, ptr)
    return out


def _coerce(value: Any, spec: Field, ptr: str) -> Any:
    kind = spec.kind
    if kind == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(ptr, "expected a finite number")
        value = float(value)
    elif kind == "int":
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(ptr, "expected an integer")
        value = int(value)
    elif kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(ptr, "expected true or false")
    elif kind == "str":
        if not isinstance(value, str):
            raise ConfigError(ptr, "expected a string")
    elif kind == "numbers":
        if not isinstance(value, list) or not value:
            raise ConfigError(ptr, "expected a nonempty list of numbers")
        value = [_coerce(v, Field("number"), f"{ptr}/{i}") for i, v in enumerate(value)]
    elif kind == "object":
        value = _validate(value, spec.schema or {}, ptr)
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(ptr, f"must be one of {list(spec.choices)}")
    if spec.check is not None:
        msg = spec.check(value)
        if msg:
            raise ConfigError(ptr, msg)
    return value


COMMON = {
    "subcommand": Field("str", choices=SUBCOMMANDS),
    "seed": Field("int", 42, check=nonnegative),
    "N": Field("int", 10_000, check=positive),
    "dt": Field("number", 1e-3, check=positive),
    "tol": Field("number", 1e-6, check=positive),
    "threads": Field("int", 1, check=positive),
    "record_every": Field("int", 1, check=positive),
}

INVENTORY = {
    "kind": Field("str", "constant", choices=("constant", "two-point", "gaussian")),
    "value": Field("number"),
    "mean": Field("number"),
    "std": Field("number", check=nonnegative),
    "low": Field("number"),
    "high": Field("number"),
    "p_low": Field("number"),
}

LIQUIDATION = {
    "lambda": Field("number", required=True),
    "k": Field("number", required=True),
    "phi": Field("number", required=True),
    "A": Field("number", required=True),
    "sigma": Field("number", 1.0),
    "s0": Field("number", 0.0),
    "T": Field("number", 1.0),
    "Q0": Field("object", {"kind": "constant", "value": 1.0}, schema=INVENTORY),
}

LQ_FIELDS = {name: Field("number") for name in (
    "b1", "b2", "b1bar", "b2bar", "q", "qbar", "r", "rbar", "s", "sbar", "gamma", "gammabar", "rho", "T", "x0")}
LQ_FIELDS["strict"] = Field("bool")

DRIFT = {
    "gamma": Field("number", 1.0),
    "gammabar": Field("number", 0.5),
    "rho": Field("number", 0.5),
    "T": Field("number", 1.0, check=positive),
    "x0": Field("number", 1.0),
}

COST = {
    "type": Field("str", "quadratic", choices=("quadratic", "moment-penalty")),
    "params": Field("object", {}, schema={
        "cf": Field("number", check=nonnegative),
        "cg": Field("number", check=nonnegative),
        "kappa_f": Field("number", check=nonnegative),
        "kappa_g": Field("number", check=nonnegative),
        "center": Field("number"),
    }),
}

LATTICE = {
    "bound": Field("number", check=positive),
    "count": Field("int", check=positive),
    "values": Field("numbers"),
}

SOLVER = {
    "max_iters": Field("int", 500, check=positive),
    "tol": Field("number", check=positive),
    "line_search": Field("bool", False),
}

INSTANCE = {
    "n": Field("int", 3, check=nonnegative),
    "m": Field("int", 5, check=lambda v: None if v >= 2 else "needs at least two points"),
    "quantization": Field("str", None, choices=("gauss-hermite", "binomial", "lattice")),
    "T": Field("number", 1.0, check=positive),
    "x0": Field("number", 1.0),
    "lattice": Field("object", {"bound": 2.5, "count": 21}, schema=LATTICE),
    "cost": Field("object", {"type": "quadratic", "params": {}}, schema=COST),
    "solver": Field("object", {"max_iters": 500}, schema=SOLVER),
    "reference": Field("any"),
}

SCHEMAS = {
    "liquidate": {"params": Field("object", required=True, schema=LIQUIDATION)},
    "lq": {"params": Field("object", {}, schema=LQ_FIELDS), "csv_every": Field("int", 10, check=positive)},
    "pontryagin-check": {
        "model": Field("str", "lq", choices=("lq", "liquidation")),
        "params": Field("any", {}),
        "form": Field("str", "auto", choices=("auto", "equality", "inequality")),
    },
    "martingale-check": {
        "params": Field("object", {}, schema=DRIFT),
        "perturbation": Field("number", 0.0),
        "level": Field("number", 0.01, check=lambda v: None if 0 < v < 1 else "must lie in (0, 1)"),
        "n_windows": Field("int", 8, check=positive),
        "start": Field("number", 0.2, check=lambda v: None if 0 <= v < 1 else "must lie in [0, 1)"),
        "terminal_tol": Field("number", 1e-2, check=positive),
    },
    "transport-ladder": dict(INSTANCE),
    "lift": {**INSTANCE, "n": Field("int", 0, choices=(0, 1))},
}


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    body: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.body["seed"]

    def to_dict(self) -> dict:
        return {"subcommand": self.subcommand, **self.body}

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _check_model_params(subcommand: str, body: dict) -> None:
    """Construct the parameter objects once so their invariants are enforced before any computation."""
    from .liquidation import InitialInventory, LiquidationParams
    from .lq import LQParams

    def build(pointer: str, fn: Callable[[], Any]) -> None:
        try:
            fn()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(pointer, f"violates the parameter invariant: {exc}") from None

    def lq_pointer(exc_text: str, base: str) -> str:
        if exc_text.startswith("need r"):
            return f"{base}/r"
        head = exc_text.split(" ", 1)[0]
        return f"{base}/{head}" if head in LQ_FIELDS else base

    def check_lq(params: dict, base: str) -> None:
        try:
            LQParams.from_dict(params)
        except (ValueError, TypeError) as exc:
            raise ConfigError(lq_pointer(str(exc), base), f"violates the LQParams invariant: {exc}") from None

    def check_liq(params: dict, base: str) -> None:
        build(f"{base}/Q0", lambda: InitialInventory.from_dict(params.get("Q0", {})))
        build(base, lambda: LiquidationParams.from_dict(params))

    if subcommand == "lq":
        check_lq(body["params"], "/params")
    elif subcommand == "liquidate":
        check_liq(body["params"], "/params")
    elif subcommand == "pontryagin-check":
        if body["model"] == "lq":
            body["params"] = _validate(body["params"], LQ_FIELDS, "/params")
            check_lq(body["params"], "/params")
        else:
            body["params"] = _validate(body["params"], LIQUIDATION, "/params")
            check_liq(body["params"], "/params")
    elif subcommand in ("transport-ladder", "lift"):
        lat = body["lattice"]
        if "values" in lat and ("bound" in lat or "count" in lat):
            raise ConfigError("/lattice", "give either values or bound and count")
        if "values" not in lat and not ("bound" in lat and "count" in lat):
            raise ConfigError("/lattice", "give values or both bound and count")
        if "count" in lat and lat["count"] % 2 == 0:
            raise ConfigError("/lattice/count", "must be odd so that 0 is on the lattice")
        ref = body.get("reference")
        if ref is not None and ref != "auto" and (isinstance(ref, bool) or not isinstance(ref, (int, float))):
            raise ConfigError("/reference", "expected a number, \"auto\" or null")
        if subcommand == "transport-ladder" and body["n"] > 6:
            raise ConfigError("/n", "the ladder supports n <= 6")
        from .transport import quantize_wiener

        build("/lattice", lambda: _lattice(lat))
        build("/m", lambda: quantize_wiener(0, body["m"], body["T"], body.get("quantization")))


def validate_config(data: Any, subcommand: Optional[str] = None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("/", "expected a JSON object")
    named = data.get("subcommand")
    sub = subcommand or named
    if sub is None:
        raise ConfigError("/subcommand", "no subcommand given")
    if sub not in SUBCOMMANDS:
        raise ConfigError("/subcommand", f"must be one of {list(SUBCOMMANDS)}")
    if named is not None and subcommand is not None and named != subcommand:
        raise ConfigError("/subcommand", f"config is for {named!r}, not {subcommand!r}")
    body = _validate(data, {**COMMON, **SCHEMAS[sub]}, "")
    body.pop("subcommand", None)
    _check_model_params(sub, body)
    return RunConfig(sub, body)


def load_config(path: str | Path, subcommand: Optional[str] = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("/", f"config file {str(p)!r} does not exist")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON: {exc}") from None
    return validate_config(data, subcommand)


def emit_config(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows: np.ndarray) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


class Run:
    def __init__(self, config: RunConfig, out: Path) -> None:
        self.config = config
        self.out = out
        self.files: list[str] = []

    def manifest(self, status: str, exit_code: Optional[int] = None) -> None:
        doc = {
            "status": status,
            "subcommand": self.config.subcommand,
            "config": self.config.to_dict(),
            "config_sha256": self.config.digest(),
            "seed": self.config.seed,
            "threads": self.config.body["threads"],
            "versions": {"mfcx": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "files": list(self.files),
        }
        if exit_code is not None:
            doc["exit_code"] = exit_code
        write_json(self.out / "manifest.json", doc)

    def json(self, name: str, obj: Any) -> None:
        write_json(self.out / name, obj)
        self.files.append(name)

    def csv(self, name: str, header: list[str], rows: np.ndarray) -> None:
        write_csv(self.out / name, header, rows)
        self.files.append(name)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _liquidation_params(d: dict):
    from .liquidation import LiquidationParams

    return LiquidationParams.from_dict(d)


def run_liquidate(cfg: RunConfig, run: Run) -> None:
    from .liquidation import LiquidationError, LiquidationSolution, adjoint_residuals, execution_cost, simulate_market

    b = cfg.body
    params = _liquidation_params(b["params"])
    try:
        sol = LiquidationSolution(params)
    except LiquidationError as exc:
        raise SolverFailure(str(exc)) from None
    ens = simulate_market(params, sol, b["N"], seed=b["seed"], dt=b["dt"], record_every=b["record_every"])
    t = ens.grid.points
    run.csv("trajectory.csv", ["t", "Q", "alpha", "S"],
            np.column_stack([t, ens["Q"].mean(axis=0), ens["alpha"].mean(axis=0), ens["S"].mean(axis=0)]))
    res = adjoint_residuals(ens, params)
    cost = execution_cost(ens, params)
    run.json("residuals.json", {"residuals": res, "cost": cost.to_dict(), "convex_regime": params.convex_regime,
                                "within_tol": res["foc"]["normalized_max"] <= b["tol"]})


def run_lq(cfg: RunConfig, run: Run) -> None:
    from .lq import LQParams, RiccatiBlowUp, fbsde_residual, simulate_lq, solve_lq, stationarity_residual

    b = cfg.body
    params = LQParams.from_dict(b["params"])
    try:
        sol = solve_lq(params)
    except RiccatiBlowUp as exc:
        raise SolverFailure(str(exc), which=exc.which, crossing_time=exc.time) from None
    run.csv("riccati.csv", ["t", "eta_bar", "eta", "chi"], sol.table(b["csv_every"]))
    ens, cost = simulate_lq(params, sol, b["N"], seed=b["seed"], dt=b["dt"], record_every=b["record_every"])
    run.json("report.json", {
        "constants": sol.constants,
        "coefficients": {"a": sol.coefficients.a, "b": sol.coefficients.b, "c": sol.coefficients.c},
        "stationarity": stationarity_residual(ens, params, sol),
        "fbsde": fbsde_residual(ens, params, sol),
        "cost": cost.to_dict(),
    })


def run_pontryagin(cfg: RunConfig, run: Run) -> None:
    from .pontryagin import liquidation_context, lq_context, necessary_residual

    b = cfg.body
    if b["model"] == "lq":
        from .lq import LQParams, RiccatiBlowUp, pointwise_residual, simulate_lq, solve_lq

        params = LQParams.from_dict(b["params"])
        try:
            sol = solve_lq(params)
        except RiccatiBlowUp as exc:
            raise SolverFailure(str(exc), which=exc.which, crossing_time=exc.time) from None
        ens, _ = simulate_lq(params, sol, b["N"], seed=b["seed"], dt=b["dt"], record_every=b["record_every"])
        ctx = lq_context(ens, sol)
        extra = {"pointwise": pointwise_residual(ens, params, sol)}
    else:
        from .liquidation import LiquidationError, LiquidationSolution, simulate_market

        params = _liquidation_params(b["params"])
        try:
            sol = LiquidationSolution(params)
        except LiquidationError as exc:
            raise SolverFailure(str(exc)) from None
        ens = simulate_market(params, sol, b["N"], seed=b["seed"], dt=b["dt"], record_every=b["record_every"])
        ctx = liquidation_context(ens, params)
        extra = {}
    rep = necessary_residual(ctx, form=b["form"], tol=b["tol"])
    t = ctx.grid.points
    run.csv("residual.csv", ["t", "max", "mean"], np.column_stack([t, rep.per_time_max, rep.per_time_mean]))
    run.json("report.json", {"residual": rep.to_dict(), **extra})


def run_martingale(cfg: RunConfig, run: Run) -> None:
    from .lq import simulate_lq, solve_lq
    from .pontryagin import QuadraticDriftControl, martingale_condition_check

    b = cfg.body
    inst = QuadraticDriftControl(**b["params"])
    lqp = inst.lq_params()
    sol = solve_lq(lqp)
    eps = b["perturbation"]
    ens, cost = simulate_lq(lqp, sol, b["N"], seed=b["seed"], dt=b["dt"], record_every=b["record_every"],
                            control=lambda t, x, xbar: inst.control(t, x) + eps * x)
    verdict = martingale_condition_check(ens, inst.model(), level=b["level"], n_windows=b["n_windows"],
                                         start=b["start"], terminal_tol=b["terminal_tol"])
    run.csv("windows.csv", ["start", "end", "wald"], np.array([[w.start, w.end, w.wald] for w in verdict.windows]))
    run.json("report.json", {"verdict": verdict.to_dict(), "cost": cost.to_dict(), "perturbation": eps})


def _lattice(lat: dict):
    from .transport import ActionLattice

    if "values" in lat:
        return ActionLattice(lat["values"])
    return ActionLattice.uniform(lat["bound"], lat["count"])


def _costs(spec: dict):
    from .transport import moment_penalty_costs, quadratic_costs

    p = spec["params"]
    if spec["type"] == "quadratic":
        extra = set(p) - {"cf", "cg"}
        if extra:
            raise ConfigError(f"/cost/params/{sorted(extra)[0]}", "not a parameter of the quadratic cost")
        return quadratic_costs(p.get("cf", 1.0), p.get("cg", 1.0))
    extra = set(p) - {"kappa_f", "kappa_g", "center"}
    if extra:
        raise ConfigError(f"/cost/params/{sorted(extra)[0]}", "not a parameter of the moment-penalty cost")
    return moment_penalty_costs(p.get("kappa_f", 1.0), p.get("kappa_g", 0.0), p.get("center", 0.0))


def _reference(b: dict) -> Optional[float]:
    from .transport import quadratic_reference_value

    ref = b.get("reference")
    if ref == "auto":
        if b["cost"]["type"] != "quadratic":
            raise ConfigError("/reference", "\"auto\" is available for the quadratic cost only")
        p = b["cost"]["params"]
        return quadratic_reference_value(b["x0"], b["T"], p.get("cf", 1.0), p.get("cg", 1.0))
    return None if ref is None else float(ref)


def _kernel_tables(coupling) -> list:
    """Per step: reached states (x, y before the action) with the action law."""
    sp = coupling.space
    acts = coupling.actions.values
    steps = []
    for i in range(sp.steps):
        mass = coupling.state_mass(i)
        K = coupling.kernel(i)
        y = sp.x0 + sp.xvals[i + 1][:, None] + coupling.actions.h * coupling.dt * sp.s_values(i)[None, :]
        rows = []
        for xi, si in zip(*np.nonzero(mass > 0)):
            nz = np.nonzero(K[xi, si] > 0)[0]
            rows.append({"x": float(sp.xvals[i + 1][xi]), "y": float(y[xi, si]), "mass": float(mass[xi, si]),
                         "actions": acts[nz].tolist(), "probs": K[xi, si, nz].tolist()})
        steps.append(rows)
    return steps


def run_ladder(cfg: RunConfig, run: Run) -> None:
    from .transport import ladder

    b = cfg.body
    costs = _costs(b["cost"])
    ref = _reference(b)
    tol = b["solver"].get("tol", b["tol"])
    q = {"m": b["m"]}
    if b.get("quantization"):
        q["kind"] = b["quantization"]
    res = ladder(costs, b["n"], q, _lattice(b["lattice"]), x0=b["x0"], T=b["T"], reference=ref,
                 max_iters=b["solver"]["max_iters"], tol=tol)
    rows = res.rows()
    run.csv("ladder.csv", ["n", "value", "margin", "gap_to_reference"],
            np.array([[r["n"], r["value"], r["margin"], r["gap_to_reference"]] for r in rows]))
    run.json("couplings.json", {f"level_{n}": _kernel_tables(c) for n, c in zip(res.levels, res.couplings)})
    report = {"values": res.values, "margins": res.margins, "monotone": res.monotone, "reference": res.reference,
              "budget": res.budget, "below_reference": res.below_reference, "solver_gaps": res.solver_gaps,
              "tol": tol}
    run.json("report.json", report)
    bad = [n for n, g in zip(res.levels, res.solver_gaps) if g > tol]
    if bad:
        raise SolverFailure(f"Frank-Wolfe did not reach the gap tolerance on levels {bad}", levels=bad)


def run_lift(cfg: RunConfig, run: Run) -> None:
    from .lift import lift_to_sde
    from .transport import quantize_wiener, solve_Pn

    b = cfg.body
    costs = _costs(b["cost"])
    tol = b["solver"].get("tol", b["tol"])
    w = quantize_wiener(b["n"], b["m"], b["T"], b.get("quantization"))
    res = solve_Pn(costs, b["n"], w, _lattice(b["lattice"]), x0=b["x0"], max_iters=b["solver"]["max_iters"], tol=tol,
                   line_search=b["solver"]["line_search"])
    if not res.converged:
        raise SolverFailure("Frank-Wolfe did not reach the gap tolerance", gap=res.gap)
    try:
        ens = lift_to_sde(res.coupling, b["N"], seed=b["seed"], dt=b["dt"], record_every=b["record_every"], costs=costs)
    except ValueError as exc:
        raise ConfigError("/dt", str(exc)) from None
    X, a = ens["X"], ens["alpha"]
    run.csv("lift.csv", ["t", "mean_X", "var_X", "mean_alpha"],
            np.column_stack([ens.grid.points, X.mean(axis=0), X.var(axis=0), a.mean(axis=0)]))
    run.json("report.json", {"P_n": res.value, "level": b["n"], "gap": res.gap,
                             "discrete_cost": ens.meta["discrete_cost"], "continuous_cost": ens.meta["continuous_cost"],
                             "reference": _reference(b)})


RUNNERS = {
    "liquidate": run_liquidate,
    "lq": run_lq,
    "pontryagin-check": run_pontryagin,
    "martingale-check": run_martingale,
    "transport-ladder": run_ladder,
    "lift": run_lift,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _error_report(out: Optional[Path], kind: str, message: str, **details: Any) -> dict:
    doc = {"status": "error", "kind": kind, "message": message, **details}
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_json(out / "error.json", doc)
        except OSError:
            pass
    print(json.dumps(_jsonable(doc), sort_keys=True), file=sys.stderr)
    return doc


def execute(config: RunConfig, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    stale = out / "error.json"
    if stale.exists():
        stale.unlink()
    run = Run(config, out)
    run.manifest("incomplete")
    try:
        RUNNERS[config.subcommand](config, run)
    except ConfigError as exc:
        _error_report(out, "config", exc.message, pointer=exc.pointer)
        run.manifest("failed", 1)
        return 1
    except SolverFailure as exc:
        _error_report(out, "solver", str(exc), **exc.details)
        run.manifest("failed", 2)
        return 2
    except ValueError as exc:
        # library argument checks that the schema cannot express
        _error_report(out, "config", str(exc), pointer="/")
        run.manifest("failed", 1)
        return 1
    except Exception as exc:  # noqa: BLE001
        _error_report(out, "internal", f"{type(exc).__name__}: {exc}")
        run.manifest("failed", 3)
        return 3
    run.manifest("complete", 0)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfcx", description="Extended mean-field control experiments.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=CSV_HELP[name], description=f"Outputs: {CSV_HELP[name]}")
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="thread count (results do not depend on it)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        config = load_config(args.config, args.subcommand)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        if overrides:
            config = validate_config({**config.to_dict(), **overrides}, args.subcommand)
    except ConfigError as exc:
        _error_report(out, "config", exc.message, pointer=exc.pointer)
        return 1
    return execute(config, out)


if __name__ == "__main__":
    sys.exit(main())
