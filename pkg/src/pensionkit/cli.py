"""Command-line entry point: ``pensionkit COMMAND --config FILE [options]``.

Every artifact starts with a provenance record (package version, command,
seed and config digest): a ``#`` comment line in CSV files and a
``manifest`` object in JSON files.  Outputs carry no timestamps, so a fixed
(config, seed) gives byte-identical files.  Errors exit non-zero and print a
JSON error record on stderr (also written to ``error.json`` in the output
directory when possible).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import textwrap
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import KEYS, REQUIRED, ConfigError, ScenarioConfig, load_config, parse_list, validate_config
from .core import Reform, Variant
from .econometrics import designs
from .econometrics.kernels import EstimateTable, EstimationError, EventStudyResult
from .econometrics.mortality import (death_records_from_population, life_expectancy,
                                     mortality_life_expectancy, survival_curve)
from .optimizer import (Box, DesignModel, SolverError, comparative_statics, foc_jacobian,
                        linear_template, optimum_pipeline, pairs_bootstrap, progressivity_share,
                        solve_optimum)
from .popgen import GenerationError, generate_population, panel_to_csv, read_panel_csv
from .welfare import WelfareError, below_median_mask, compute_moments

OUT_DIR_ENV = "PENSIONKIT_OUT_DIR"
COMMANDS = ("gen", "panel", "estimate", "moments", "gradient", "optimize", "bootstrap", "sweep",
            "lifeexp", "report")
DESIGNS = ("benefit", "mpc", "link", "tax", "consumption", "mortality")
SWEEP_PARAMS = ("gamma", "theta", "beta")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    seed: int | None = None
    out_dir: str = "out"
    format: str | None = None
    design: str | None = None
    param: str | None = None
    panel: str | None = None
    threads: int = 1

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise UsageError(f"unknown command {self.command!r}")
        if (self.design is not None) != (self.command == "estimate"):
            raise UsageError("--design is required for estimate and only allowed there")
        if self.design is not None and self.design not in DESIGNS:
            raise UsageError(f"unknown design {self.design!r}")
        if (self.param is not None) != (self.command == "sweep"):
            raise UsageError("--param is required for sweep and only allowed there")
        if self.panel is not None and self.design != "tax":
            raise UsageError("--panel only applies to estimate --design tax")
        if self.format not in (None, "csv", "json"):
            raise UsageError(f"unknown format {self.format!r}")
        if self.threads < 1:
            raise UsageError("--threads must be >= 1")


# ------------------------------------------------------------------ output


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, Reform):
        return obj.value
    return obj


def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    if isinstance(obj, dict):
        rows = []
        for k, v in obj.items():
            rows += _flatten(v, f"{prefix}.{k}" if prefix else str(k))
        return rows
    if isinstance(obj, list):
        rows = []
        for i, v in enumerate(obj):
            rows += _flatten(v, f"{prefix}[{i}]")
        return rows
    return [(prefix, obj)]


class Writer:
    def __init__(self, manifest: RunManifest, cfg: ScenarioConfig, seed: int):
        self.out = Path(manifest.out_dir)
        self.header = {"tool": "pensionkit", "version": __version__, "command": manifest.command,
                       "seed": seed, "config_sha256": cfg.digest}
        if manifest.design:
            self.header["design"] = manifest.design
        if manifest.param:
            self.header["param"] = manifest.param
        self.format = manifest.format
        self.written: list[str] = []

    def _comment(self) -> str:
        return "# " + " ".join(f"{k}={v}" for k, v in self.header.items()) + "\n"

    def _path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        self.written.append(str(path))
        return path

    def table(self, stem: str, frame: pd.DataFrame, default: str = "csv") -> None:
        fmt = self.format or default
        if fmt == "csv":
            body = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
            self._path(f"{stem}.csv").write_text(self._comment() + body)
        else:
            self.record(stem, {"rows": frame.to_dict(orient="records")}, default="json")

    def record(self, stem: str, payload: dict, default: str = "json") -> None:
        fmt = self.format or default
        if fmt == "json":
            doc = {"manifest": self.header, **_clean(payload)}
            text = json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"
            self._path(f"{stem}.json").write_text(text)
        else:
            rows = _flatten(_clean(payload))
            self.table(stem, pd.DataFrame(rows, columns=["key", "value"]), default="csv")

    def panel(self, stem: str, frame: pd.DataFrame) -> None:
        self._path(f"{stem}.csv").write_text(self._comment() + panel_to_csv(frame))


# --------------------------------------------------------------- pipelines


def _box(cfg: ScenarioConfig) -> Box:
    return Box(kappa=tuple(parse_list(cfg["optimizer.box.kappa"])),
               phi=tuple(parse_list(cfg["optimizer.box.phi"])))


def _life_table(cfg: ScenarioConfig) -> dict:
    return {g: life_expectancy(cfg[f"mortality.{g}.constant"], cfg[f"mortality.{g}.slope"])
            for g in ("below", "above")}


def _survival(cfg: ScenarioConfig, pop):
    if cfg["welfare.survival_weighting"] != "on":
        return None
    le = _life_table(cfg)
    return np.where(below_median_mask(pop.z, pop.id), le["below"], le["above"])


def _status_quo_model(cfg: ScenarioConfig, pop) -> DesignModel:
    return DesignModel.from_population(pop, cfg.policy, cfg.behavioral, survival=_survival(cfg, pop))


def _design_model(cfg: ScenarioConfig, pop) -> DesignModel:
    """Model over the linear design space anchored at the status quo."""
    return DesignModel.from_population(pop, linear_template(cfg.policy), cfg.behavioral,
                                       survival=_survival(cfg, pop))


def moments_payload(cfg, pop) -> dict:
    m = compute_moments(pop, cfg.behavioral, cfg.policy.R, variant=cfg.policy.variant,
                        survival=_survival(cfg, pop))
    return {"variant": cfg.policy.variant.value, "moments": asdict(m)}


def gradient_payload(cfg, pop) -> dict:
    model = _status_quo_model(cfg, pop)
    gains = model.gains(numeraire=cfg["welfare.numeraire"])
    out = {"numeraire": cfg["welfare.numeraire"],
           "survival_weighting": cfg["welfare.survival_weighting"], "reforms": {}}
    for reform, g in gains.items():
        d = g.as_dict()
        cost = g.bias_correction + g.fiscal_externality
        d["bias_share_of_distortion"] = g.bias_correction / cost if cost != 0 else None
        out["reforms"][reform.value] = d
    out["status_quo_progressivity"] = progressivity_share(cfg.policy, pop)
    return out


def optimize_payload(cfg, pop) -> dict:
    model = _design_model(cfg, pop)
    res = solve_optimum(model, box=_box(cfg), tol=cfg["optimizer.tol"],
                        n_starts=cfg["optimizer.starts"])
    return {"status_quo": {"kappa": cfg.policy.kappa, "phi": cfg.policy.phi,
                           "variant": cfg.policy.variant.value,
                           "progressivity_share": progressivity_share(cfg.policy, pop)},
            "optimum": res.as_dict()}


def bootstrap_payload(cfg, pop, seed: int, threads: int) -> dict:
    model = _design_model(cfg, pop)
    box, tol = _box(cfg), cfg["optimizer.tol"]
    point = solve_optimum(model, box=box, tol=tol, n_starts=cfg["optimizer.starts"])
    x = (point.kappa_star, point.phi_star)
    pipeline = optimum_pipeline(model.status_quo, cfg.behavioral, x, box=box, tol=tol,
                                jacobian=foc_jacobian(model, x))
    res = pairs_bootstrap(pop, pipeline, cfg["bootstrap.replicates"], seed, n_jobs=threads)
    return {"estimate": {"kappa": x[0], "phi": x[1]}, "replicates": len(res.replicates),
            "failures": res.failures, "percentile_95": res.percentile,
            "hull_95": res.hull.tolist()}


def sweep_frame(cfg, pop, param: str) -> pd.DataFrame:
    grid = parse_list(cfg[f"sweep.{param}"])
    rows = comparative_statics(_status_quo_model(cfg, pop), param, grid,
                               numeraire=cfg["welfare.numeraire"])
    cols = ["param", "value", "gain_kappa", "gain_phi", "bias_kappa", "bias_phi"]
    if param == "theta":
        cols.append("rational_drop")
    return pd.DataFrame(rows, columns=cols)


def lifeexp_payload(cfg) -> dict:
    le = _life_table(cfg)
    curves = {g: survival_curve(cfg[f"mortality.{g}.constant"], cfg[f"mortality.{g}.slope"])
              for g in ("below", "above")}
    horizon = 60
    return {"start_age": 65,
            "coefficients": {g: {"constant": cfg[f"mortality.{g}.constant"],
                                 "slope": cfg[f"mortality.{g}.slope"]} for g in le},
            "life_expectancy": le, "retirement_gap": le["above"] / le["below"] - 1.0,
            "survival": {"age": list(range(65, 65 + horizon)),
                         **{g: np.pad(c[:horizon], (0, max(0, horizon - len(c)))).tolist()
                            for g, c in curves.items()}}}


def _table_rows(label: str, table: EstimateTable) -> list[dict]:
    return [{"table": label, "name": c.name, "estimate": c.estimate, "se": c.se, "t": c.t,
             "ci_lo": c.ci95[0], "ci_hi": c.ci95[1]} for c in table.coefficients.values()]


def _scalar_row(label: str, name: str, estimate: float, se: float | None = None) -> dict:
    return {"table": label, "name": name, "estimate": estimate, "se": se, "t": None,
            "ci_lo": None, "ci_hi": None}


def _event_rows(label: str, res: EventStudyResult) -> list[dict]:
    return [{"table": label, "name": f"event[{int(r.event_time)}]", "estimate": r.estimate,
             "se": r.se, "t": r.estimate / r.se if r.se > 0 else 0.0, "ci_lo": r.ci_lo,
             "ci_hi": r.ci_hi} for r in res.path.itertuples()]


def estimate(cfg, seed: int, design: str, panel_path: str | None = None) -> tuple[list[dict], dict]:
    """Rows for the long estimate table and a structured record."""
    n = cfg["estimation.n_workers"]
    rows, record = [], {}
    if design == "tax":
        if panel_path is not None:
            pop, panel = None, read_panel_csv(panel_path)
        else:
            pop, panel = designs.simulate_fee_panel(cfg, seed, n)
        res = designs.design_net_of_tax(panel, cfg, pop)
        rows += _table_rows("did", res["did"]) + _event_rows("event_study", res["dynamics"])
        rows.append(_scalar_row("event_study", "pre_wald_p", res["dynamics"].pre_p))
        record = {"did": res["did"].as_dict(), "event_study": res["dynamics"].as_dict()}
    elif design == "benefit":
        pop, panel = designs.simulate_gfc(cfg, seed, n, cfg["estimation.sample"])
        res = designs.design_benefit_elasticity(pop, panel, cfg)
        ppop, ppanel = designs.simulate_gfc(cfg, seed, n, "placebo")
        placebo = designs.design_crisis_placebo(ppop, ppanel, cfg)
        for k in ("first_stage", "second_stage"):
            rows += _table_rows(k, res[k])
        rows += _table_rows("placebo", placebo)
        record = {k: v.as_dict() for k, v in res.items()} | {"placebo": placebo.as_dict()}
    elif design == "mpc":
        pop, panel = designs.simulate_mpc(cfg, seed, n)
        res = designs.design_mpc(pop, panel, cfg)
        for k in ("first_stage", "second_stage"):
            rows += _table_rows(k, res[k])
        record = {k: v.as_dict() for k, v in res.items()}
    elif design == "link":
        pop, panel = designs.simulate_link(cfg, seed, n)
        res = designs.design_link_elasticity(pop, panel, cfg)
        for k in ("first_stage", "second_stage", "disentangled"):
            if k in res:
                rows += _table_rows(k, res[k])
                record[k] = res[k].as_dict()
        for k in ("eps_link", "eps_benefit"):
            if k in res:
                rows.append(_scalar_row("derived", k, res[k]["estimate"], res[k]["se"]))
                record[k] = res[k]
        for scale in (0.8, 1.2):
            label = f"placebo_pmas_{scale:g}"
            fs = designs.design_link_elasticity(pop, panel, cfg, pmas_scale=scale)["first_stage"]
            rows += _table_rows(label, fs)
            record[label] = fs.as_dict()
    elif design == "consumption":
        survey = designs.simulate_consumption_survey(cfg, seed)
        raw = designs.consumption_event_study(survey)
        ctrl = designs.consumption_event_study(survey, control_income=True)
        for label, res in (("raw", raw), ("income_control", ctrl)):
            for g, path in res.paths.items():
                rows += _event_rows(f"{label}_{g}", path)
            rows += [_scalar_row(f"{label}_gap", f"gap[{int(r.event_time)}]", r.gap, r.se)
                     for r in res.gap.itertuples()]
            rows.append(_scalar_row(f"{label}_gap", "wald_p", res.gap_p))
            rows += [_scalar_row(f"{label}_drop_curve", f"q{i}", q) for i, q in enumerate(res.quadratic)]
        record = {"raw": raw.as_dict(), "income_control": ctrl.as_dict()}
    elif design == "mortality":
        pop = generate_population(cfg, seed)
        res = mortality_life_expectancy(death_records_from_population(pop, cfg),
                                        follow_up_years=cfg["mortality.follow_up_years"])
        for g, f in res.fits.items():
            rows.append(_scalar_row(g, "constant", f.constant))
            rows.append(_scalar_row(g, "slope", f.slope))
            rows.append(_scalar_row(g, "life_expectancy", res.life_expectancy[g]))
        rows.append(_scalar_row("groups", "retirement_gap", res.retirement_gap))
        record = res.as_dict()
    else:
        raise UsageError(f"unknown design {design!r}")
    return rows, record


def run(manifest: RunManifest) -> list[str]:
    """Execute one command; returns the written paths."""
    manifest.validate()
    cfg = load_config(manifest.config_path)
    seed = manifest.seed if manifest.seed is not None else cfg.seed
    if seed is None:
        raise ConfigError([{"key": "seed", "message": "no seed: pass --seed or set seed in the config",
                            "severity": "error"}])
    out = Writer(manifest, cfg, seed)
    cmd = manifest.command
    if cmd == "lifeexp":
        out.record("life_expectancy", lifeexp_payload(cfg))
        return out.written
    if cmd == "estimate":
        rows, record = estimate(cfg, seed, manifest.design, manifest.panel)
        if (manifest.format or "csv") == "csv":
            out.table(f"estimate_{manifest.design}",
                      pd.DataFrame(rows, columns=["table", "name", "estimate", "se", "t", "ci_lo", "ci_hi"]))
        else:
            out.record(f"estimate_{manifest.design}", record)
        return out.written
    if cmd == "panel":
        _, panel = designs.simulate_fee_panel(cfg, seed, cfg.n_workers)
        out.panel("panel", panel)
        return out.written
    pop = generate_population(cfg, seed)
    if cmd == "gen":
        out.table("population", pop.to_frame())
    elif cmd == "moments":
        out.record("moments", moments_payload(cfg, pop))
    elif cmd == "gradient":
        out.record("gradient", gradient_payload(cfg, pop))
    elif cmd == "optimize":
        out.record("optimal_design", optimize_payload(cfg, pop))
    elif cmd == "bootstrap":
        out.record("bootstrap", bootstrap_payload(cfg, pop, seed, manifest.threads))
    elif cmd == "sweep":
        if manifest.param not in SWEEP_PARAMS:
            raise UsageError(f"unknown sweep parameter {manifest.param!r}")
        out.table(f"sweep_{manifest.param}", sweep_frame(cfg, pop, manifest.param))
    elif cmd == "report":
        out.record("report", {
            "moments": moments_payload(cfg, pop)["moments"],
            "gradient": gradient_payload(cfg, pop),
            "optimize": optimize_payload(cfg, pop),
            "life_expectancy": {k: v for k, v in lifeexp_payload(cfg).items() if k != "survival"},
        })
    return out.written


# -------------------------------------------------------------------- argv


def _config_help() -> str:
    lines = ["config keys (file format: one 'dotted.key = value' per line, '#' starts a comment):"]
    for key, spec in KEYS.items():
        default = "required" if spec.default is REQUIRED else ("none" if spec.default is None
                                                                else spec.default)
        lines.append(f"  {key} ({spec.kind}, default {default})")
        lines += textwrap.wrap(spec.doc, 72, initial_indent="      ", subsequent_indent="      ")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    epilog = (f"output directory: --out, else ${OUT_DIR_ENV}, else ./out\n"
              "exit status: 0 ok, 1 module error, 2 usage or config error, 3 I/O error\n\n"
              + _config_help())
    parser = argparse.ArgumentParser(
        prog="pensionkit", description="Pension design welfare engine and estimator harness.",
        epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"pensionkit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="scenario config file")
    common.add_argument("--seed", type=int, help="RNG seed; overrides the config seed")
    common.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./out)")
    common.add_argument("--format", choices=("csv", "json"),
                        help="output format (default: csv for tables, json for reports)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for bootstrap replicates (results do not depend on it)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen": "write a synthetic population (population.csv)",
        "panel": "write the fee-change earnings panel (panel.csv)",
        "estimate": "run one quasi-experimental design (estimate_<design>.csv)",
        "moments": "population moments of the welfare formulas (moments.json)",
        "gradient": "welfare gradients and money-metric gains at the status quo (gradient.json)",
        "optimize": "solve the first-order conditions (optimal_design.json)",
        "bootstrap": "pairs bootstrap of the optimum (bootstrap.json)",
        "sweep": "comparative statics over a preference grid (sweep_<param>.csv)",
        "lifeexp": "life expectancy from the mortality coefficients (life_expectancy.json)",
        "report": "moments, gradients, optimum and life expectancy (report.json)",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "estimate":
            p.add_argument("--design", required=True, choices=DESIGNS)
            p.add_argument("--panel", help="panel CSV for the tax design (default: simulate one)")
        if name == "sweep":
            p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    v = sub.add_parser("validate-config", help="check a config file and list diagnostics as JSON")
    v.add_argument("path")
    return parser


def _error_record(exc: BaseException) -> tuple[int, dict]:
    if isinstance(exc, ConfigError):
        return 2, {"error": "ConfigError", "message": str(exc), "diagnostics": exc.diagnostics}
    if isinstance(exc, UsageError):
        return 2, {"error": "UsageError", "message": str(exc)}
    if isinstance(exc, OSError):
        return 3, {"error": type(exc).__name__, "message": str(exc)}
    return 1, {"error": type(exc).__name__, "message": str(exc)}


MODULE_ERRORS = (SolverError, WelfareError, EstimationError, GenerationError, ValueError)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate-config":
        try:
            diags = validate_config(args.path)
        except OSError as exc:
            code, rec = _error_record(exc)
            print(json.dumps(rec), file=sys.stderr)
            return code
        print(json.dumps(diags, indent=2))
        return 2 if any(d["severity"] == "error" for d in diags) else 0
    manifest = RunManifest(
        command=args.command, config_path=args.config, seed=args.seed,
        out_dir=args.out or os.environ.get(OUT_DIR_ENV) or "out", format=args.format,
        design=getattr(args, "design", None), param=getattr(args, "param", None),
        panel=getattr(args, "panel", None), threads=args.threads)
    try:
        written = run(manifest)
    except (ConfigError, UsageError, OSError, *MODULE_ERRORS) as exc:
        code, rec = _error_record(exc)
        rec["command"] = manifest.command
        text = json.dumps(_clean(rec), indent=2)
        print(text, file=sys.stderr)
        try:
            Path(manifest.out_dir).mkdir(parents=True, exist_ok=True)
            (Path(manifest.out_dir) / "error.json").write_text(text + "\n")
        except OSError:
            pass
        return code
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
