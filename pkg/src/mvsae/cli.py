"""``sae`` command line: direct, fit, loo, simulate, aggregate.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .direct import LONELY_PSU_POLICIES, direct_estimates, read_direct_estimates_csv, write_direct_estimates_csv
from .evaluation import (loo_logscore_area, loo_logscore_unit, posterior_summary, write_logscore_csv,
                         write_logscore_summary_csv)
from .mcmc import FitConfig, NumericalError, fit, read_samples_csv, write_samples_csv
from .models import ModelError, aggregate_means, combine_shared, load_spec, model_spec
from .simulation import ScenarioConfig, ScenarioError, load_scenario_config, run_simulation_study
from .spatial import scaled_icar
from .survey import (GraphError, SurveyError, default_geography, load_adjacency, load_rural_fractions,
                     load_survey_csv, validate_dataset)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_USAGE = 0, 2, 3, 4
SUMMARY_KEYS = ("median", "q2.5", "q10", "q90", "q97.5")

log = logging.getLogger("mvsae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_manifest(command: str, inputs: dict, seed: int, extra: dict | None = None) -> dict:
    """Manifest of a run. The timestamp honours ``SOURCE_DATE_EPOCH`` so that
    reruns can be byte-compared."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    stamp = int(epoch) if epoch is not None else int(time.time())
    return {
        "command": command,
        "inputs": {name: {"path": str(p), "sha256": file_digest(p)} for name, p in sorted(inputs.items())
                   if p is not None},
        "seed": seed,
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(stamp)),
        **(extra or {}),
    }


def write_manifest(out_dir: Path, manifest: dict, name: str = "manifest.json") -> None:
    (out_dir / name).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# input helpers
# ---------------------------------------------------------------------------

def _graph(args):
    return load_adjacency(args.graph) if args.graph else default_geography()


def _spec(text: str, level: str | None = None):
    """A model spec from a JSON file path or a family name."""
    try:
        spec = load_spec(text) if Path(text).is_file() else model_spec(text)
    except ModelError as exc:
        raise UsageError(f"{exc} (pass a family name or a spec JSON file)") from exc
    if level is not None and spec.level != level:
        raise UsageError(f"model {spec.family!r} is {spec.level}-level but the inputs are {level}-level")
    return spec


def _fit_config(args, **kw) -> FitConfig:
    base = {"chains": args.chains, "warmup": args.warmup, "draws": args.draws, "seed": args.seed}
    base.update({k: v for k, v in kw.items() if v is not None})
    return FitConfig(**base)


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _level_inputs(args, graph):
    """(level, data, q) from --estimates (area) or --data (unit)."""
    if bool(args.estimates) == bool(args.data):
        raise UsageError("give exactly one of --estimates (area level) or --data (unit level)")
    if args.estimates:
        return "area", read_direct_estimates_csv(args.estimates, graph), None
    data = load_survey_csv(args.data, args.outcomes, graph)
    if not args.q:
        raise UsageError("unit-level models need --q (rural fractions JSON)")
    q = load_rural_fractions(args.q)
    report = validate_dataset(data, graph, q)
    if report.problems:
        raise SurveyError("\n".join(report.problems))
    return "unit", data, q


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_direct(args) -> int:
    graph = _graph(args)
    data = load_survey_csv(args.data, args.outcomes, graph)
    report = validate_dataset(data, graph)
    if report.problems:
        raise SurveyError(str(report))
    for line in report.lines():
        log.warning(line)
    est = direct_estimates(data, args.lonely_psu)
    out = Path(args.out) if args.out else _out_dir(args) / "direct_estimates.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_direct_estimates_csv(est, out)
    write_manifest(out.parent, run_manifest("direct", {"data": args.data, "graph": args.graph}, args.seed,
                                            {"lonely_psu": args.lonely_psu, "notes": est.notes}),
                   name=out.stem + ".manifest.json")
    return EXIT_OK


def write_summary_csv(fit_obj, path, healthy: bool) -> None:
    summ = posterior_summary(fit_obj)
    status = "HEALTHY" if healthy else "UNHEALTHY"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "outcome", *SUMMARY_KEYS, "status"])
        for c in range(summ["median"].shape[0]):
            for r, lab in enumerate(fit_obj.region_labels):
                vals = [summ[k][c, r] for k in SUMMARY_KEYS]
                w.writerow([lab, c + 1, *["" if not np.isfinite(v) else repr(float(v)) for v in vals], status])


def cmd_fit(args) -> int:
    graph = _graph(args)
    level, data, q = _level_inputs(args, graph)
    spec = _spec(args.model, level)
    out = _out_dir(args)
    config = _fit_config(args)
    res = fit(spec, data, graph, q, config)
    healthy = True if spec.is_direct else res.healthy
    write_samples_csv(res, out / "samples.csv")
    write_summary_csv(res, out / "summary.csv", healthy)
    diag = {} if spec.is_direct else res.diagnostics.to_dict()
    diag["acceptance"] = {k: round(v, 6) for k, v in sorted(res.acceptance.items())}
    diag["notes"] = res.notes
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    inputs = {"estimates": args.estimates, "data": args.data, "graph": args.graph, "q": args.q}
    if Path(args.model).is_file():
        inputs["model"] = args.model
    write_manifest(out, run_manifest("fit", inputs, args.seed, {"model": spec.family,
                                                                "chains": config.chains,
                                                                "warmup": config.warmup,
                                                                "draws": config.draws}))
    if not healthy:
        log.warning("UNHEALTHY fit: R-hat above threshold for %s", ", ".join(res.diagnostics.unhealthy_parameters()))
    return EXIT_OK


def cmd_loo(args) -> int:
    graph = _graph(args)
    level, data, q = _level_inputs(args, graph)
    out = _out_dir(args)
    specs = [_spec(m, level) for m in args.models]
    config = FitConfig.loo(seed=args.seed, warmup=args.warmup or 500, draws=args.draws or 1000)
    reports = []
    for spec in specs:
        if level == "area":
            rep = loo_logscore_area(spec, data, graph, config, workers=args.threads)
        else:
            rep = loo_logscore_unit(spec, data, graph, q, config, args.lonely_psu, workers=args.threads)
        reports.append(rep)
    write_logscore_csv(reports, out / "logscore_regions.csv")
    write_logscore_summary_csv(reports, out / "logscore_summary.csv")
    notes = {rep.model_id: rep.notes for rep in reports if rep.notes}
    inputs = {"estimates": args.estimates, "data": args.data, "graph": args.graph, "q": args.q}
    write_manifest(out, run_manifest("loo", inputs, args.seed, {"models": [s.family for s in specs],
                                                                "notes": notes}))
    poor = [rep.model_id for rep in reports if rep.scored_fraction < 0.9]
    if poor:
        log.error("fewer than 90%% of regions scored for: %s", ", ".join(poor))
        return EXIT_NUMERICAL
    return EXIT_OK


def _parse_scenario(text: str) -> tuple[str, int]:
    try:
        level, sid = text.split(":")
        return level.strip(), int(sid)
    except ValueError:
        raise UsageError(f"--scenario must look like area:6 or unit:7, got {text!r}") from None


def cmd_simulate(args) -> int:
    graph = load_adjacency(args.graph) if args.graph else None
    q = load_rural_fractions(args.q) if args.q else None
    if args.config:
        config = load_scenario_config(args.config, graph, q)
        if args.scenario:
            level, sid = _parse_scenario(args.scenario)
            config = replace(config, level=level, scenario_id=sid)
    elif args.scenario:
        level, sid = _parse_scenario(args.scenario)
        config = ScenarioConfig(level, sid, graph=graph, q=q, seed=args.seed)
    else:
        raise UsageError("give --scenario or --config")
    if args.replicates is not None:
        config = replace(config, replicate_count=args.replicates)
    models = [m.strip() for m in args.models.split(",")] if args.models else None
    fit_cfg = FitConfig.simulation(seed=config.seed)
    fit_cfg = replace(fit_cfg, **{k: v for k, v in (("chains", args.chains), ("warmup", args.warmup),
                                                     ("draws", args.draws)) if v is not None})
    out = _out_dir(args)
    res = run_simulation_study(config, models, fit_cfg, archive_dir=out / "archive", workers=args.threads)
    res.metrics.write_csv(out / "metrics.csv")
    extra = {"scenario": config.to_dict(), "failures": res.failures, "unhealthy": res.unhealthy,
             "notes": res.metrics.notes}
    write_manifest(out, run_manifest("simulate", {"config": args.config, "graph": args.graph, "q": args.q},
                                     config.seed, extra))
    return EXIT_OK


def cmd_aggregate(args) -> int:
    """Area means ``beta + q gamma + g`` per draw of a unit-level samples file."""
    graph = _graph(args)
    spec = _spec(args.model, "unit")
    q = load_rural_fractions(args.q).q
    if len(q) != graph.n_nodes:
        raise SurveyError(f"rural fractions have length {len(q)}, expected {graph.n_nodes}")
    smp = read_samples_csv(args.samples)
    for need in ("beta", "gamma", "sigma", "v_star"):
        if need not in smp:
            raise SurveyError(f"samples file lacks {need!r} columns")
    sigma = smp["sigma"][..., None]
    v = smp["v_star"]
    if spec.is_spatial and "u_star" in smp:
        icar = scaled_icar(graph)
        island = icar.singleton if icar is not None else np.ones(graph.n_nodes, bool)
        rho = smp["rho"][..., None]
        s = sigma * np.where(island, v, np.sqrt(1 - rho) * v + np.sqrt(rho) * smp["u_star"])
    else:
        s = sigma * v
    g = combine_shared(s, smp["lambda"], spec.source) if spec.is_shared else s
    mu = aggregate_means(smp["beta"], smp["gamma"], g, q)  # (chains, draws, 2, R)
    flat = mu.reshape((-1,) + mu.shape[2:])
    qs = np.quantile(flat, [0.5, 0.025, 0.1, 0.9, 0.975], axis=0)
    out = Path(args.out) if args.out else _out_dir(args) / "aggregate.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "outcome", *SUMMARY_KEYS])
        for c in range(2):
            for r, lab in enumerate(graph.labels):
                w.writerow([lab, c + 1, *[repr(float(qs[k, c, r])) for k in range(5)]])
    write_manifest(out.parent, run_manifest("aggregate", {"samples": args.samples, "q": args.q,
                                                          "graph": args.graph}, args.seed),
                   name=out.stem + ".manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replicates and refits")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--graph", help="adjacency JSON or text file (default: built-in 47-node lattice)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sae", description="Multivariate shared-component small area estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    d = sub.add_parser("direct", parents=[common], help="Stage-1 direct estimates from survey data")
    d.add_argument("--data", required=True)
    d.add_argument("--out")
    d.add_argument("--outcomes", type=int, default=2)
    d.add_argument("--lonely-psu", choices=LONELY_PSU_POLICIES, default="error")
    d.set_defaults(func=cmd_direct)

    def inputs(sp):
        sp.add_argument("--estimates", help="direct estimates CSV (area level)")
        sp.add_argument("--data", help="survey CSV (unit level)")
        sp.add_argument("--q", help="rural fractions JSON (unit level)")
        sp.add_argument("--outcomes", type=int, default=2)

    f = sub.add_parser("fit", parents=[common], help="fit one model")
    inputs(f)
    f.add_argument("--model", required=True, help="family name or spec JSON")
    f.add_argument("--chains", type=int, default=4)
    f.add_argument("--warmup", type=int, default=2000)
    f.add_argument("--draws", type=int, default=2000)
    f.set_defaults(func=cmd_fit)

    lo = sub.add_parser("loo", parents=[common], help="leave-one-out LogScore for a list of models")
    inputs(lo)
    lo.add_argument("--models", nargs="+", required=True)
    lo.add_argument("--warmup", type=int)
    lo.add_argument("--draws", type=int)
    lo.add_argument("--lonely-psu", choices=LONELY_PSU_POLICIES, default="error")
    lo.set_defaults(func=cmd_loo)

    s = sub.add_parser("simulate", parents=[common], help="run a simulation study")
    s.add_argument("--scenario", help="level:id, e.g. area:6 or unit:7")
    s.add_argument("--config", help="scenario config JSON")
    s.add_argument("--replicates", type=int)
    s.add_argument("--models", help="comma-separated families (default: all for the level)")
    s.add_argument("--q", help="rural fractions JSON (unit level)")
    s.add_argument("--chains", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--draws", type=int)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("aggregate", parents=[common], help="aggregate unit-level samples with new q")
    a.add_argument("--samples", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--q", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_aggregate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except (SurveyError, GraphError, ScenarioError) as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return EXIT_VALIDATION
    except NumericalError as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    except ModelError as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
