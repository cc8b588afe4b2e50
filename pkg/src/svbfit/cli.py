"""Command-line interface.

Subcommands: simulate, fit, asl-fit, sweep, init-study, plot.
Exit codes: 0 success, 1 usage error, 2 data or model error.

Output files are deterministic byte streams for a fixed seed and config.
Wall-clock columns are therefore left empty unless --timing is passed
(timings are inherently non-reproducible and live outside the data contract).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .dataio import SeriesDataset, asl_differenced, load_dataset, save_dataset
from .errors import SvbError
from .gaussian import GaussianSpec, Structure
from .harness import (
    PosteriorScenario,
    PriorScenario,
    SimulationSpec,
    SweepSpec,
    make_init,
    make_prior,
    run_init_study,
    run_sweep,
    simulate,
    write_rows_csv,
)
from .models import get_model
from .optimizer import Custom, DataDriven, OptimizerConfig, PriorMatched, Problem, _fit_stack
from .svgplot import polyline_plot


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v != ""]


def _add_optimizer_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--learning_rate", type=float, default=0.05)
    parser.add_argument("--sample_count", type=int, default=20)
    parser.add_argument("--batch_size", type=int, default=None)
    parser.add_argument("--max_epochs", type=int, default=500)
    parser.add_argument("--adam_beta1", type=float, default=0.9)
    parser.add_argument("--adam_beta2", type=float, default=0.999)
    parser.add_argument("--adam_epsilon", type=float, default=1e-8)
    parser.add_argument("--seed", type=int, required=True)
    parser.add_argument("--convergence_tolerance_fraction", type=float, default=0.01)
    parser.add_argument("--structure", choices=["full", "diagonal"], default="full")


def _config_from_args(args) -> OptimizerConfig:
    return OptimizerConfig(
        learning_rate=args.learning_rate,
        sample_count=args.sample_count,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        adam_beta1=args.adam_beta1,
        adam_beta2=args.adam_beta2,
        adam_epsilon=args.adam_epsilon,
        seed=args.seed,
        convergence_tolerance_fraction=args.convergence_tolerance_fraction,
        structure=Structure(args.structure),
    )


def _prior_from_args(args, model) -> GaussianSpec:
    k = model.param_count
    means = _floats(args.prior_mean)
    sds = _floats(args.prior_sd)
    if len(means) == k:
        means.append(0.0)  # noninformative default for the noise coordinate
    if len(sds) == k:
        sds.append(1e3)
    if len(means) != k + 1 or len(sds) != k + 1:
        raise SvbError(
            f"prior needs {k} model parameters plus optionally the noise coordinate"
        )
    return GaussianSpec.from_mean_sd(np.asarray(means), np.asarray(sds))


def _init_from_args(args, prior):
    if args.init == "prior":
        return PriorMatched()
    if args.init == "data":
        return DataDriven(base_mean=prior.mean, noise_from_data=True)
    if args.init_mean is None or args.init_sd is None:
        raise SvbError("custom init requires --init_mean and --init_sd")
    return Custom(mean=np.asarray(_floats(args.init_mean)), sd=np.asarray(_floats(args.init_sd)))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_fit_outputs(results, series_ids, param_names, out_csv, out_json, timing):
    header = ["series_id"]
    for name in list(param_names) + ["noise_lambda"]:
        header += [f"{name}_mean", f"{name}_sd"]
    header += ["best_F", "conv_epoch", "conv_time_s"]
    with open(out_csv, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for sid, res in zip(series_ids, results):
            sds = res.posterior.marginal_sds()
            row = [str(sid)]
            for mean, sd in zip(res.posterior.mean, sds):
                row += [_fmt(float(mean)), _fmt(float(sd))]
            row += [
                _fmt(res.best_free_energy),
                _fmt(res.convergence_epoch),
                _fmt(res.wall_time_to_convergence) if timing else "",
            ]
            writer.writerow(row)
    if out_json:
        payload = [
            {
                "series_id": int(sid),
                "posterior": res.posterior.to_json_dict(),
                "best_F": None if res.best_free_energy is None else float(res.best_free_energy),
                "convergence_epoch": None if res.convergence_epoch is None else int(res.convergence_epoch),
                "failed": bool(res.failed),
            }
            for sid, res in zip(series_ids, results)
        ]
        Path(out_json).write_text(json.dumps(payload, indent=2) + "\n")


def _cmd_simulate(args) -> int:
    spec = SimulationSpec(
        model_name=args.model,
        truth=np.asarray(_floats(args.truth)),
        n_points=args.n_points,
        noise_sd=args.noise_sd,
        n_realizations=args.n_realizations,
        seed=args.seed,
        t_min=args.t_min,
        t_max=args.t_max,
    )
    problems = simulate(spec)
    dataset = SeriesDataset(
        model_name=spec.model_name,
        design=problems.design,
        values=problems.stacked_y(),
        units="arb",
    )
    save_dataset(dataset, args.out)
    return 0


def _sim_spec_from_args(args) -> SimulationSpec:
    return SimulationSpec(
        model_name=args.model,
        truth=np.asarray(_floats(args.truth)),
        n_points=args.n_points,
        noise_sd=args.noise_sd,
        n_realizations=args.n_realizations,
        seed=args.seed,
        t_min=args.t_min,
        t_max=args.t_max,
    )


def _cmd_fit(args) -> int:
    dataset = load_dataset(args.data)
    model = get_model(dataset.model_name)
    prior = _prior_from_args(args, model)
    init = _init_from_args(args, prior)
    config = _config_from_args(args)
    problems = [
        Problem(y=row, model=model, design=dataset.design) for row in dataset.values
    ]
    results = _fit_stack(
        problems, prior, init, config,
        list(range(len(problems))), loss_scale=1.0 / len(problems), isolate=True,
    )
    _write_fit_outputs(
        results, range(len(problems)), model.param_names,
        args.out_csv, args.out_json, args.timing,
    )
    return 0


def _cmd_asl_fit(args) -> int:
    dataset = load_dataset(args.data)
    if dataset.column_tags is not None:
        dataset = asl_differenced(dataset)
    model = get_model("asl-pcasl")
    prior = _prior_from_args(args, model)
    init = _init_from_args(args, prior)
    config = _config_from_args(args)

    slice_idx = dataset.slice_index_per_voxel
    if slice_idx is None:
        slice_idx = np.zeros(dataset.n_series, dtype=int)
    mask = dataset.mask if dataset.mask is not None else np.ones(dataset.n_series, dtype=bool)
    voxel_ids = [i for i in range(dataset.n_series) if mask[i]]

    results_by_id = {}
    for s in sorted({int(slice_idx[i]) for i in voxel_ids}):
        ids = [i for i in voxel_ids if int(slice_idx[i]) == s]
        design = dataset.design.with_slice_index(s)
        problems = [Problem(y=dataset.values[i], model=model, design=design) for i in ids]
        fitted = _fit_stack(
            problems, prior, init, config, ids, loss_scale=1.0 / len(problems),
            isolate=True,
        )
        results_by_id.update(zip(ids, fitted))
    ordered = sorted(results_by_id)
    _write_fit_outputs(
        [results_by_id[i] for i in ordered], ordered, model.param_names,
        args.out_csv, args.out_json, args.timing,
    )
    return 0


def _cmd_sweep(args) -> int:
    sim = _sim_spec_from_args(args)
    sweep = SweepSpec(
        learning_rates=tuple(_floats(args.learning_rates)),
        sample_counts=tuple(int(v) for v in args.sample_counts.split(",")),
        batch_sizes=tuple(
            None if v in ("N", "n") else int(v) for v in args.batch_sizes.split(",")
        ),
        structures=tuple(Structure(s) for s in args.structures.split(",")),
        max_epochs=args.max_epochs,
        convergence_tolerance_fraction=args.convergence_tolerance_fraction,
        seed=args.seed,
    )
    prior = make_prior(PriorScenario(args.prior), sim)
    init = make_init(PosteriorScenario(args.init), prior, sim)
    result = run_sweep(sim, sweep, prior, init, include_timing=args.timing)
    result.to_csv(args.out)
    return 0


def _cmd_init_study(args) -> int:
    sim = _sim_spec_from_args(args)
    sweep = SweepSpec(
        learning_rates=(args.learning_rate,),
        sample_counts=(args.sample_count,),
        batch_sizes=(args.batch_size,),
        structures=(Structure(args.structure),),
        max_epochs=args.max_epochs,
        convergence_tolerance_fraction=args.convergence_tolerance_fraction,
        seed=args.seed,
    )
    result = run_init_study(
        sim,
        sweep,
        prior_scenarios=tuple(PriorScenario(p) for p in args.priors.split(",")),
        posterior_scenarios=tuple(PosteriorScenario(p) for p in args.inits.split(",")),
        include_timing=args.timing,
    )
    result.to_csv(args.out)
    return 0


def _cmd_plot(args) -> int:
    traces = []
    with open(args.traces) as handle:
        for line in handle:
            line = line.strip()
            if line:
                traces.append([float(v) for v in line.split(",")])
    svg = polyline_plot(traces, x_label=args.x_label, y_label=args.y_label)
    Path(args.out).write_text(svg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svbfit",
        description="Stochastic variational Bayes fitting for nonlinear forward models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a simulated dataset")
    sim.add_argument("--model", default="biexp")
    sim.add_argument("--truth", default="10,1,10,10")
    sim.add_argument("--n_points", type=int, default=100)
    sim.add_argument("--noise_sd", type=float, default=1.0)
    sim.add_argument("--n_realizations", type=int, default=100)
    sim.add_argument("--t_min", type=float, default=0.0)
    sim.add_argument("--t_max", type=float, default=5.0)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=_cmd_simulate)

    for name, func in (("fit", _cmd_fit), ("asl-fit", _cmd_asl_fit)):
        p = sub.add_parser(name, help=f"{name} a dataset, one result row per series")
        p.add_argument("--data", required=True)
        p.add_argument("--prior_mean", required=True)
        p.add_argument("--prior_sd", required=True)
        p.add_argument("--init", choices=["prior", "data", "custom"], default="prior")
        p.add_argument("--init_mean")
        p.add_argument("--init_sd")
        p.add_argument("--out_csv", required=True)
        p.add_argument("--out_json")
        p.add_argument("--timing", action="store_true")
        _add_optimizer_flags(p)
        p.set_defaults(func=func)

    sw = sub.add_parser("sweep", help="convergence-parameter sweep on simulated data")
    sw.add_argument("--model", default="biexp")
    sw.add_argument("--truth", default="10,1,10,10")
    sw.add_argument("--n_points", type=int, default=100)
    sw.add_argument("--noise_sd", type=float, default=1.0)
    sw.add_argument("--n_realizations", type=int, default=100)
    sw.add_argument("--t_min", type=float, default=0.0)
    sw.add_argument("--t_max", type=float, default=5.0)
    sw.add_argument("--learning_rates", default="0.05")
    sw.add_argument("--sample_counts", default="20")
    sw.add_argument("--batch_sizes", default="N")
    sw.add_argument("--structures", default="full")
    sw.add_argument("--max_epochs", type=int, default=500)
    sw.add_argument("--convergence_tolerance_fraction", type=float, default=0.01)
    sw.add_argument("--prior", choices=["informative", "noninformative"], default="informative")
    sw.add_argument("--init", choices=["true", "data", "wrong", "uninformed"], default="true")
    sw.add_argument("--seed", type=int, required=True)
    sw.add_argument("--timing", action="store_true")
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=_cmd_sweep)

    st = sub.add_parser("init-study", help="prior x initial-posterior study")
    st.add_argument("--model", default="biexp")
    st.add_argument("--truth", default="10,1,10,10")
    st.add_argument("--n_points", type=int, default=100)
    st.add_argument("--noise_sd", type=float, default=1.0)
    st.add_argument("--n_realizations", type=int, default=100)
    st.add_argument("--t_min", type=float, default=0.0)
    st.add_argument("--t_max", type=float, default=5.0)
    st.add_argument("--priors", default="informative,noninformative")
    st.add_argument("--inits", default="true,data,wrong,uninformed")
    st.add_argument("--timing", action="store_true")
    st.add_argument("--out", required=True)
    _add_optimizer_flags(st)
    st.set_defaults(func=_cmd_init_study)

    pl = sub.add_parser("plot", help="free-energy trace CSV to SVG (one polyline per row)")
    pl.add_argument("--traces", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--x_label", default="epoch")
    pl.add_argument("--y_label", default="free energy")
    pl.set_defaults(func=_cmd_plot)

    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except SvbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())
