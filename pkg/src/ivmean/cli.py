"""Command-line entry points and file formats.

Two subcommands:

* ``estimate --data obs.csv --config model.json [--out result.json]``
  fits the configured estimators on one dataset and writes a JSON result
  document plus a human-readable table on stdout.
* ``simulate --profile desk | --config plan.json [--seed S] [--reps R]
  [--out report.csv] [--emit-data DIR]`` runs a Monte Carlo plan and
  writes the metric table as CSV (or JSON when the path ends in .json).

Dataset CSV schema: header ``r,y,z,u1,...,uL``; r is 0/1; y is empty
exactly when r is 0; z and u columns are numeric. Identical inputs always
produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import re
import sys
from dataclasses import dataclass, replace

from .core import Dataset, DesignFormula, ObservedRecord
from .errors import ConfigurationError, DataError, IvmeanError
from .inference import EstimationResult, estimate_cc, estimate_full, estimate_mar, \
    estimate_phi_hat, estimate_phi_tilde
from .models import ModelSpec
from .simulation import (
    ESTIMATORS,
    SCENARIOS,
    AnalogConfig,
    SimulationReport,
    run_analog,
    run_scenario,
)
from .solver import SolverConfig

SCHEMA_VERSION = 1
_DEFAULT_SEED = 20240601


# ---------------------------------------------------------------- datasets

def read_dataset(path: str) -> Dataset:
    """Load a dataset CSV, reporting the line number of any bad row."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("dataset file is empty", line=1) from None
        n_u = len(header) - 3
        expected = ["r", "y", "z"] + [f"u{i + 1}" for i in range(max(n_u, 0))]
        if n_u < 1 or header != expected:
            raise DataError(
                f"header must be r,y,z,u1,...,uL; got {','.join(header)}",
                line=1,
            )
        records = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(
                    f"expected {len(header)} fields, got {len(row)}", line=lineno
                )
            r_txt, y_txt, z_txt = row[0].strip(), row[1].strip(), row[2].strip()
            if r_txt not in ("0", "1"):
                raise DataError(f"r must be 0 or 1, got {r_txt!r}", line=lineno)
            r = int(r_txt)
            if r == 1 and y_txt == "":
                raise DataError("respondent row (r=1) is missing y", line=lineno)
            if r == 0 and y_txt != "":
                raise DataError(
                    "nonrespondent row (r=0) must leave y empty", line=lineno
                )
            try:
                y = float(y_txt) if r == 1 else None
                z = float(z_txt)
                u = tuple(float(v) for v in row[3:])
            except ValueError as exc:
                raise DataError(f"non-numeric field: {exc}", line=lineno) from exc
            records.append(ObservedRecord(r=r, y=y, z=z, u=u))
        if not records:
            raise DataError("dataset has no data rows", line=2)
    return Dataset(records)


def write_dataset(dataset: Dataset, path: str) -> None:
    """Write a dataset CSV that read_dataset loads back identically."""
    n_u = dataset.n_covariates
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["r", "y", "z"] + [f"u{i + 1}" for i in range(n_u)])
        for rec in dataset:
            y_txt = repr(rec.y) if rec.r == 1 else ""
            writer.writerow(
                [rec.r, y_txt, repr(rec.z)] + [repr(v) for v in rec.u]
            )


# ------------------------------------------------------------------ config

def _require_keys(doc: dict, allowed: set, required: set, what: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigurationError(
            f"unknown {what} key(s): {', '.join(sorted(unknown))}"
        )
    missing = required - set(doc)
    if missing:
        raise ConfigurationError(
            f"missing {what} key(s): {', '.join(sorted(missing))}"
        )


def model_spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "eta_formula": spec.eta_formula.to_string(),
        "z_formula": spec.z_formula.to_string(),
        "y_formula": spec.y_formula.to_string(),
        "outcome_kind": spec.outcome_kind,
        "selection_bias": spec.selection_bias_design.to_string(),
        "index_d": spec.index_d.to_string(),
    }


def model_spec_from_dict(doc: dict) -> ModelSpec:
    _require_keys(
        doc,
        {"eta_formula", "z_formula", "y_formula", "outcome_kind",
         "selection_bias", "index_d"},
        {"eta_formula", "z_formula", "y_formula"},
        "model",
    )
    return ModelSpec(
        eta_formula=DesignFormula.parse(doc["eta_formula"]),
        z_formula=DesignFormula.parse(doc["z_formula"]),
        y_formula=DesignFormula.parse(doc["y_formula"]),
        outcome_kind=doc.get("outcome_kind", "binary"),
        selection_bias_design=DesignFormula.parse(doc.get("selection_bias", "1")),
        index_d=DesignFormula.parse(doc.get("index_d", "1")),
    )


def _solver_from_dict(doc: dict) -> SolverConfig:
    _require_keys(
        doc,
        {"tol", "max_iter", "max_halvings", "jacobian_step", "condition_warn"},
        set(),
        "solver",
    )
    base = SolverConfig()
    return SolverConfig(
        tol=float(doc.get("tol", base.tol)),
        max_iter=int(doc.get("max_iter", base.max_iter)),
        max_halvings=int(doc.get("max_halvings", base.max_halvings)),
        jacobian_step=float(doc.get("jacobian_step", base.jacobian_step)),
        condition_warn=float(doc.get("condition_warn", base.condition_warn)),
    )


@dataclass(frozen=True)
class RunConfig:
    """A fully resolved invocation: command, inputs, models, and plan."""

    command: str
    data_path: str | None = None
    out_path: str | None = None
    emit_dir: str | None = None
    model: ModelSpec | None = None
    estimators: tuple = ()
    solver: SolverConfig = SolverConfig()
    analog: bool = False
    scenarios: tuple = ()
    n_values: tuple = ()
    replicates: int = 0
    base_seed: int = _DEFAULT_SEED
    workers: int = 1


def parse_config(text: str, command: str = "estimate") -> RunConfig:
    """Parse a JSON config document for the given subcommand."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(
            f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})"
        )

    if command == "estimate":
        _require_keys(
            doc, {"schema_version", "model", "estimators", "solver"},
            {"model"}, "config",
        )
        estimators = tuple(doc.get("estimators", ("phi_tilde",)))
        _check_estimators(estimators)
        return RunConfig(
            command="estimate",
            model=model_spec_from_dict(doc["model"]),
            estimators=estimators,
            solver=_solver_from_dict(doc.get("solver", {})),
        )
    if command == "simulate":
        _require_keys(
            doc,
            {"schema_version", "scenarios", "analog", "n", "replicates",
             "estimators", "base_seed", "solver", "workers"},
            {"replicates", "estimators"},
            "config",
        )
        analog = bool(doc.get("analog", False))
        scenarios = tuple(doc.get("scenarios", ()))
        if analog == bool(scenarios):
            raise ConfigurationError(
                "simulate config needs either 'scenarios' or 'analog': true"
            )
        for s in scenarios:
            if s not in SCENARIOS:
                raise ConfigurationError(
                    f"unknown scenario {s!r}; expected one of {SCENARIOS}"
                )
        n_raw = doc.get("n")
        if n_raw is None:
            n_values = ()
        else:
            n_values = tuple(int(v) for v in
                             (n_raw if isinstance(n_raw, list) else [n_raw]))
        if not analog and not n_values:
            raise ConfigurationError("simulate config needs 'n'")
        estimators = tuple(doc["estimators"])
        _check_estimators(estimators)
        return RunConfig(
            command="simulate",
            analog=analog,
            scenarios=scenarios,
            n_values=n_values,
            replicates=int(doc["replicates"]),
            estimators=estimators,
            base_seed=int(doc.get("base_seed", _DEFAULT_SEED)),
            solver=_solver_from_dict(doc.get("solver", {})),
            workers=int(doc.get("workers", 1)),
        )
    raise ConfigurationError(f"unknown command {command!r}")


def _check_estimators(estimators) -> None:
    if not estimators:
        raise ConfigurationError("at least one estimator is required")
    for e in estimators:
        if e not in ESTIMATORS:
            raise ConfigurationError(
                f"unknown estimator {e!r}; expected one of {ESTIMATORS}"
            )


_CELL_PROFILE = re.compile(r"^table1-(c[1-5])-n(\d+)-reps(\d+)$")


def profile_config(name: str) -> RunConfig:
    """Built-in simulate plans addressable by name."""
    if name == "desk":
        return RunConfig(
            command="simulate", scenarios=("C1",), n_values=(1000,),
            replicates=500, estimators=("phi_tilde", "cc", "full"),
        )
    if name == "table1":
        return RunConfig(
            command="simulate", scenarios=SCENARIOS,
            n_values=(500, 1000, 5000), replicates=1000,
            estimators=("phi_tilde", "cc", "full"),
        )
    if name == "analog-survey":
        return RunConfig(
            command="simulate", analog=True, replicates=1,
            estimators=("phi_tilde", "phi_hat", "cc", "mar"),
        )
    m = _CELL_PROFILE.match(name)
    if m:
        return RunConfig(
            command="simulate", scenarios=(m.group(1).upper(),),
            n_values=(int(m.group(2)),), replicates=int(m.group(3)),
            estimators=("phi_tilde", "cc", "full"),
        )
    raise ConfigurationError(
        f"unknown profile {name!r}; expected desk, table1, analog-survey, "
        "or table1-<scenario>-n<size>-reps<count>"
    )


# ----------------------------------------------------------------- results

def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def result_to_dict(result: EstimationResult) -> dict:
    """JSON-ready document for one fitted estimator."""
    estimates: dict = {"mu": result.mu}
    se: dict = {"mu": result.se_mu}
    ci: dict = {"mu": list(result.ci95_mu)}
    for block in ("gamma", "xi", "beta", "psi"):
        vals, ses, cis = result.block(block)
        if vals:
            estimates[block] = list(vals)
            se[block] = list(ses)
            ci[block] = [list(c) for c in cis]
    return {
        "estimator_id": result.estimator_id,
        "estimates": estimates,
        "se": se,
        "ci95": ci,
        "diagnostics": _jsonable(
            {"converged": result.converged, **result.diagnostics}
        ),
    }


def _format_table(results) -> str:
    lines = [f"{'estimator':<10} {'mu':>10} {'se':>10} {'95% CI':>24}"]
    for res in results:
        lo, hi = res.ci95_mu
        lines.append(
            f"{res.estimator_id:<10} {res.mu:>10.4f} {res.se_mu:>10.4f} "
            f"{'(' + format(lo, '.4f') + ', ' + format(hi, '.4f') + ')':>24}"
        )
        gvals, gses, gcis = res.block("gamma")
        for i, (gv, gs, gc) in enumerate(zip(gvals, gses, gcis)):
            label = "  tilt" if len(gvals) == 1 else f"  tilt[{i + 1}]"
            lines.append(
                f"{label:<10} {gv:>10.4f} {gs:>10.4f} "
                f"{'(' + format(gc[0], '.4f') + ', ' + format(gc[1], '.4f') + ')':>24}"
            )
    return "\n".join(lines)


# ---------------------------------------------------------------- commands

def cmd_estimate(cfg: RunConfig) -> int:
    dataset = read_dataset(cfg.data_path)
    results = []
    for est_id in cfg.estimators:
        if est_id == "phi_tilde":
            results.append(estimate_phi_tilde(dataset, cfg.model, cfg.solver))
        elif est_id == "phi_hat":
            results.append(estimate_phi_hat(dataset, cfg.model, cfg.solver))
        elif est_id == "cc":
            results.append(estimate_cc(dataset))
        elif est_id == "mar":
            results.append(estimate_mar(dataset, cfg.model, cfg.solver))
        elif est_id == "full":
            results.append(estimate_full(dataset))
    doc = {
        "schema_version": SCHEMA_VERSION,
        "results": [result_to_dict(r) for r in results],
    }
    if cfg.out_path:
        with open(cfg.out_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, allow_nan=True)
            fh.write("\n")
    print(_format_table(results))
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.emit_dir:
        os.makedirs(cfg.emit_dir, exist_ok=True)
    all_rows = []
    if cfg.analog:
        report = run_analog(
            cfg.replicates, cfg.estimators, cfg.base_seed,
            config=cfg.solver, workers=cfg.workers, emit_dir=cfg.emit_dir,
        )
        all_rows.extend(report.rows)
    else:
        for scenario in cfg.scenarios:
            for n in cfg.n_values:
                report = run_scenario(
                    scenario, n, cfg.replicates, cfg.estimators,
                    cfg.base_seed, config=cfg.solver, workers=cfg.workers,
                    emit_dir=cfg.emit_dir,
                )
                all_rows.extend(report.rows)
    merged = SimulationReport(rows=tuple(all_rows), base_seed=cfg.base_seed)
    text = merged.to_csv_text()
    if cfg.out_path:
        if cfg.out_path.endswith(".json"):
            with open(cfg.out_path, "w", encoding="utf-8") as fh:
                json.dump(merged.to_json_dict(), fh, indent=2, allow_nan=True)
                fh.write("\n")
        else:
            with open(cfg.out_path, "w", encoding="utf-8") as fh:
                fh.write(text)
    print(text, end="")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivmean",
        description="Estimate an outcome mean under outcome-dependent "
        "nonresponse using an instrument for the missingness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit estimators on one dataset")
    est.add_argument("--data", required=True, help="dataset CSV path")
    est.add_argument("--config", required=True, help="model config JSON path")
    est.add_argument("--out", help="result JSON path")

    sim = sub.add_parser("simulate", help="run a Monte Carlo plan")
    group = sim.add_mutually_exclusive_group(required=True)
    group.add_argument("--profile", help="built-in plan name")
    group.add_argument("--config", help="plan config JSON path")
    sim.add_argument("--seed", type=int, help="override the base seed")
    sim.add_argument("--reps", type=int, help="override the replicate count")
    sim.add_argument("--workers", type=int, help="parallel worker processes")
    sim.add_argument("--out", help="report path (.json for JSON, else CSV)")
    sim.add_argument("--emit-data", dest="emit_dir",
                     help="directory for drawn replicate datasets")
    return parser


def _load_config_file(path: str, command: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot open config: {exc}") from exc
    return parse_config(text, command)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "estimate":
            cfg = _load_config_file(args.config, "estimate")
            cfg = replace(cfg, data_path=args.data, out_path=args.out)
            return cmd_estimate(cfg)
        cfg = (profile_config(args.profile) if args.profile
               else _load_config_file(args.config, "simulate"))
        overrides = {"out_path": args.out, "emit_dir": args.emit_dir}
        if args.seed is not None:
            overrides["base_seed"] = args.seed
        if args.reps is not None:
            overrides["replicates"] = args.reps
        if args.workers is not None:
            overrides["workers"] = args.workers
        cfg = replace(cfg, **overrides)
        return cmd_simulate(cfg)
    except (ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except IvmeanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
