"""Command-line interface: simulate | fit | report | diagnose.

Each subcommand exits 0 on success. Failures print a single JSON object with
the error type and message to stderr and exit nonzero, so callers can parse
outcomes mechanically.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from contactgp import config as config_mod
from contactgp.config import ConfigError, OUTPUT_ENV_VAR, RunConfig
from contactgp.grids import AgeGrid, CoarseBracketing
from contactgp.inference import (
    SamplerConfig,
    compute_diagnostics,
    frame_to_unconstrained,
    PosteriorDraws,
    sample,
    save_draws,
)
from contactgp.model import ContactModel, ModelConfig
from contactgp.postprocess import (
    conditional_intensity,
    crude_estimator,
    intensity_summary,
    mae,
    marginal_intensity,
    relative_change,
)
from contactgp.simulate import replicate_suite, truth_frame_to_array
from contactgp.tables import (
    PopulationTable,
    bundled_population,
    read_dataset,
    uniform_population,
    write_dataset,
)

logger = logging.getLogger("contactgp")


def _resolve_population(spec: str | None, grid: AgeGrid) -> PopulationTable | None:
    if spec is None or spec == "bundled":
        return None
    if spec == "uniform":
        return uniform_population(grid)
    return PopulationTable.from_frame(pd.read_csv(spec), grid)


# -- simulate ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    out = Path(args.out) if args.out else Path("datasets")
    grid = AgeGrid(6, 49)
    population = _resolve_population(args.population, grid)
    suite = replicate_suite(args.scenario, args.n, args.replicates, args.seed, population=population)
    for ds in suite:
        name = f"{ds.scenario}_n{ds.n_total}_r{ds.replicate:02d}"
        write_dataset(
            out / name,
            ds.observation_table(),
            ds.population,
            ds.manifest(),
            truth=ds.truth_frame(),
            fine_counts=ds.fine_count_frame(),
        )
        logger.info("wrote %s", out / name)
    print(json.dumps({"datasets": len(suite), "directory": str(out)}))
    return 0


# -- fit ----------------------------------------------------------------------


def _load_run_config(args) -> RunConfig:
    cfg = config_mod.load(args.config) if args.config else RunConfig()

    model_kw = dataclasses.asdict(cfg.model)
    for key in (
        "parameterization",
        "kernel",
        "m1",
        "m2",
        "boundary_factor",
        "wave_effects",
    ):
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            model_kw[key] = value
    if args.no_fatigue_adjustment:
        model_kw["fatigue_adjustment"] = False
    if args.no_detail_adjustment:
        model_kw["detail_adjustment"] = False

    sampler_kw = dataclasses.asdict(cfg.sampler)
    if args.paper_scale and args.desk_scale:
        raise ConfigError("choose at most one of --paper-scale / --desk-scale")
    if args.paper_scale:
        sampler_kw.update(chains=8, warmup_iters=500, sampling_iters=1000)
    if args.desk_scale:
        sampler_kw.update(chains=2, warmup_iters=200, sampling_iters=200)
    for key in ("chains", "warmup_iters", "sampling_iters", "target_accept", "max_tree_depth", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            sampler_kw[key] = value

    data_kw = dataclasses.asdict(cfg.data)
    if args.data:
        data_kw["dataset"] = args.data
    if args.population:
        data_kw["population"] = args.population

    output_kw = dataclasses.asdict(cfg.output)
    if args.out:
        output_kw["directory"] = args.out

    return RunConfig(
        model=ModelConfig(**model_kw),
        sampler=SamplerConfig(**sampler_kw),
        data=config_mod.DataBlock(**data_kw),
        output=config_mod.OutputBlock(**output_kw),
        cross_sectional=bool(args.cross_sectional or cfg.cross_sectional),
        init=args.init or cfg.init,
    )


def _load_fit_inputs(cfg: RunConfig):
    if not cfg.data.dataset:
        raise ConfigError("no dataset given; pass --data or set data.dataset")
    grid = AgeGrid(*cfg.data.age_range) if cfg.data.age_range else None
    brackets = None
    if cfg.data.brackets:
        if grid is None:
            raise ConfigError("data.brackets requires data.age_range")
        brackets = CoarseBracketing.from_strings(grid, cfg.data.brackets)
    dataset = read_dataset(cfg.data.dataset, grid=grid, brackets=brackets)
    table = dataset.table
    population = dataset.population
    override = _resolve_population(cfg.data.population, table.grid)
    if override is not None:
        population = override
    return dataset, table, population


def cmd_fit(args) -> int:
    cfg = _load_run_config(args)
    dataset, table, population = _load_fit_inputs(cfg)
    if table.counts.sum() == 0:
        raise ConfigError("dataset contains no contacts to fit")

    model = ContactModel(table, population, cfg.effective_model())
    logger.info(
        "fitting %d parameters to %d cells (%s, %s kernel)",
        model.n_params, table.n_cells, cfg.model.parameterization, cfg.model.kernel,
    )
    draws, diagnostics = sample(model, cfg.sampler, jobs=args.jobs or 1, init=cfg.init)

    out = cfg.output.resolve()
    out.mkdir(parents=True, exist_ok=True)
    save_draws(draws, out / "draws.csv")
    diagnostics.save(out / "diagnostics.json")
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "dataset": str(cfg.data.dataset),
        "dataset_manifest": dataset.manifest,
        "n_parameters": model.n_params,
        "age_range": [table.grid.min_age, table.grid.max_age],
        "brackets": list(table.brackets.labels),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(
        json.dumps(
            {
                "output": str(out),
                "max_r_hat": diagnostics.max_r_hat,
                "min_ess": diagnostics.min_ess,
                "divergences": diagnostics.n_divergent,
                "elpd": diagnostics.elpd,
                "ppc_coverage": diagnostics.ppc_coverage,
            }
        )
    )
    return 0


# -- report -------------------------------------------------------------------


def _rebuild_model(fit_dir: Path):
    manifest = json.loads((fit_dir / "manifest.json").read_text())
    cfg = config_mod.from_mapping(manifest["config"])
    dataset, table, population = _load_fit_inputs(cfg)
    model = ContactModel(table, population, cfg.effective_model())
    return manifest, cfg, dataset, model


def cmd_report(args) -> int:
    fit_dir = Path(args.fit)
    manifest, cfg, dataset, model = _rebuild_model(fit_dir)
    frame = pd.read_csv(fit_dir / "draws.csv")
    unconstrained = frame_to_unconstrained(frame, model)
    flat = unconstrained.reshape(-1, unconstrained.shape[-1])
    intensity = np.stack([np.asarray(model.intensity(u)) for u in flat])

    out = Path(args.out) if args.out else fit_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    table = model.table
    grid = table.grid

    intensity_summary(intensity, table.waves, grid).to_csv(
        out / "intensity.csv", index=False, float_format="%.17g"
    )
    marginal_intensity(intensity, table.waves, grid).to_csv(
        out / "marginal.csv", index=False, float_format="%.17g"
    )
    crude_estimator(table).to_csv(out / "crude.csv", index=False, float_format="%.17g")

    report: dict = {"fit": str(fit_dir), "config_hash": manifest.get("config_hash")}
    if len(table.waves) > 1:
        reference = args.reference_wave if args.reference_wave is not None else table.waves[0]
        relative_change(intensity, table.waves, grid, reference).to_csv(
            out / "relative_change.csv", index=False, float_format="%.17g"
        )
        report["reference_wave"] = reference
    for age in args.conditional_age or []:
        conditional_intensity(intensity, model.population, age, table.waves).to_csv(
            out / f"conditional_age{age}.csv", index=False, float_format="%.17g"
        )
    if dataset.truth is not None:
        truth = truth_frame_to_array(dataset.truth, grid)
        median = np.percentile(intensity, 50.0, axis=0)
        report["mae"] = {
            "overall": mae(np.broadcast_to(truth, median.shape), median),
            "by_wave": {
                str(table.waves[t]): mae(truth, median[t]) for t in range(len(table.waves))
            },
        }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps({"output": str(out), **{k: v for k, v in report.items() if k == "mae"}}))
    return 0


# -- diagnose -------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    fit_dir = Path(args.fit)
    diag = json.loads((fit_dir / "diagnostics.json").read_text())
    frame = pd.read_csv(fit_dir / "draws.csv")
    n_div = int(frame["divergent"].sum())
    print(f"draws: {len(frame)} ({frame['chain'].nunique()} chains)")
    print(f"divergent transitions: {n_div} ({100.0 * n_div / len(frame):.3f}%)")
    print(f"max R-hat: {diag['max_r_hat']:.4f}   min ESS: {diag['min_ess']:.0f}")
    if diag.get("elpd") is not None:
        print(f"elpd: {diag['elpd']:.1f}   ppc coverage: {100 * diag['ppc_coverage']:.1f}%")
    header = f"{'parameter':<24}{'R-hat':>10}{'ESS':>12}"
    print(header)
    print("-" * len(header))
    names = list(diag["r_hat"].keys())
    scalars = [n for n in names if not n.startswith("z[")]
    worst_z = sorted(
        (n for n in names if n.startswith("z[")), key=lambda n: -diag["r_hat"][n]
    )[:5]
    for name in scalars + worst_z:
        print(f"{name:<24}{diag['r_hat'][name]:>10.4f}{diag['ess'][name]:>12.1f}")
    for warning in diag.get("warnings", []):
        print(f"WARNING: {warning}")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contactgp",
        description="Fine age- and gender-structured contact intensity estimation",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate synthetic survey datasets")
    p_sim.add_argument("--scenario", required=True, choices=["pre", "in"], help="contact scenario")
    p_sim.add_argument("--n", type=int, required=True, help="total participants")
    p_sim.add_argument("--replicates", type=int, default=1)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", help="output directory (default ./datasets)")
    p_sim.add_argument("--population", help="population CSV path, 'bundled' or 'uniform'")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="sample the posterior for a dataset")
    p_fit.add_argument("--data", help="dataset directory")
    p_fit.add_argument("--config", help="YAML run configuration")
    p_fit.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV_VAR} or ./out)")
    p_fit.add_argument("--param", dest="parameterization", choices=["diff-in-age", "age-age"])
    p_fit.add_argument("--kernel", choices=["se", "matern32", "matern52"])
    p_fit.add_argument("--m1", type=int, help="basis count, dimension 1")
    p_fit.add_argument("--m2", type=int, help="basis count, dimension 2")
    p_fit.add_argument("--boundary-factor", dest="boundary_factor", type=float)
    p_fit.add_argument("--wave-effects", dest="wave_effects", choices=["anchored", "free"])
    p_fit.add_argument("--no-fatigue-adjustment", action="store_true")
    p_fit.add_argument("--no-detail-adjustment", action="store_true")
    p_fit.add_argument("--cross-sectional", action="store_true", dest="cross_sectional")
    p_fit.add_argument("--chains", type=int)
    p_fit.add_argument("--warmup", dest="warmup_iters", type=int)
    p_fit.add_argument("--samples", dest="sampling_iters", type=int)
    p_fit.add_argument("--target-accept", dest="target_accept", type=float)
    p_fit.add_argument("--max-tree-depth", dest="max_tree_depth", type=int)
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument(
        "--init",
        choices=["uniform", "map"],
        help="chain initialization; 'map' ascends to the mode first (helps short warmups)",
    )
    p_fit.add_argument("--jobs", type=int, help="chains run concurrently")
    p_fit.add_argument("--population", help="override population: path, 'bundled' or 'uniform'")
    p_fit.add_argument(
        "--paper-scale",
        action="store_true",
        help="8 chains x (500 warmup + 1000 draws); hours of runtime",
    )
    p_fit.add_argument(
        "--desk-scale", action="store_true", help="2 chains x (200 warmup + 200 draws)"
    )
    p_fit.set_defaults(func=cmd_fit)

    p_rep = sub.add_parser("report", help="summarize stored posterior draws")
    p_rep.add_argument("--fit", required=True, help="fit output directory")
    p_rep.add_argument("--out", help="report directory (default <fit>/report)")
    p_rep.add_argument("--conditional-age", type=int, action="append", help="slice age (repeatable)")
    p_rep.add_argument("--reference-wave", type=int, help="wave for relative changes")
    p_rep.set_defaults(func=cmd_report)

    p_diag = sub.add_parser("diagnose", help="print convergence diagnostics")
    p_diag.add_argument("--fit", required=True, help="fit output directory")
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # surface a machine-readable failure
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
