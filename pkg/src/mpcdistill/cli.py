"""Command-line front end: ``generate``, ``train``, ``evaluate``, ``report``.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import io
from .cloop import (
    ForestPolicy,
    IdealReplayPolicy,
    draw_eval_scenarios,
    evaluate,
    train_nominal_policy,
    unconfirmed_violations,
)
from .datagen import build_dataset
from .errors import ConfigError, DomainError, FormatError, GenerationError, SolverError
from .learner import confusion, load_model, save_model, train_forest, train_test_split

logger = logging.getLogger("mpcdistill")

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _load_config(args, seed_key: str | None) -> config_mod.RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None and seed_key:
        overrides[seed_key] = str(args.seed)
    if args.out is not None:
        overrides["output.dir"] = args.out
    if args.config:
        return config_mod.load(args.config, overrides)
    return config_mod.loads("", overrides)


def _out_dir(cfg) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _quartiles(values) -> str:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return f"median {med:.3f} s (quartiles {q1:.3f} / {q3:.3f} s)"


def cmd_generate(args) -> int:
    cfg = _load_config(args, "generation.seed")
    g, out = cfg.generation, _out_dir(cfg)
    scheme = cfg.learner.scheme(cfg.model)
    if args.nominal:
        scenarios = draw_eval_scenarios(cfg.evaluation.n_eval, g.scenario_spec(cfg.evaluation.seed), cfg.model)
        ds = build_dataset(g.scenario_spec(), g.N, g.M, g.m, len(scenarios), cfg.solver, cfg.model, scheme,
                           initial_states=[s.x0 for s in scenarios], w_fixed=cfg.model.w_nominal)
        stem = "nominal_dataset"
    else:
        ds = build_dataset(g.scenario_spec(), g.N, g.M, g.m, g.n_q, cfg.solver, cfg.model, scheme)
        stem = "dataset"
    io.write_dataset(ds, out / f"{stem}.csv", out / f"{stem}.json", out / f"{stem}.timing.json")
    config_mod.dump(cfg, out / "config.ini")

    ok = [s for s in ds.scenarios if s["ok"]]
    print(f"scenarios solved: {len(ok)}/{len(ds.scenarios)} "
          f"({sum(s['converged'] for s in ok)} converged); samples: {len(ds)}")
    times = [s["wall_time"] for s in ok]
    if times:
        print(f"solve time: {_quartiles(times)}")
        spent = sum(times) + ds.config["extraction_time"]
        one_per_solve = len(ds) * float(np.median(times))
        print(f"data economy: {spent:.1f} s spent vs ~{one_per_solve:.1f} s for one sample per solve "
              f"(x{one_per_solve / spent:.1f})")
    print(f"wrote {out / (stem + '.csv')}")
    return 0


def _variants(cfg, ds, requested) -> list[int]:
    m_avail = int(ds.config.get("m", cfg.generation.m))
    if requested:
        bad = [m for m in requested if not 1 <= m <= m_avail]
        if bad:
            raise ConfigError(f"--m {bad} not available in a dataset generated with m={m_avail}")
        return sorted(set(requested))
    return [m for m in cfg.learner.m_variants if m <= m_avail] or [m_avail]


def cmd_train(args) -> int:
    cfg = _load_config(args, "learner.seed")
    out = _out_dir(cfg)
    scheme = cfg.learner.scheme(cfg.model)
    stem = "nominal_dataset" if args.nominal else "dataset"
    csv_path = Path(args.dataset) if args.dataset else out / f"{stem}.csv"
    meta_path = csv_path.with_suffix(".json")
    ds = io.read_dataset(csv_path, meta_path if meta_path.exists() else None, scheme)
    if ds.M != cfg.generation.M:
        raise FormatError(f"{csv_path}: window length {ds.M + 1} does not match generation.M={cfg.generation.M}")
    if args.nominal:
        variants = [int(ds.config.get("m", cfg.generation.m))]
    else:
        variants = _variants(cfg, ds, args.m)

    report = {"variants": {}, "config": config_mod.to_dict(cfg)["learner"]}
    for m in variants:
        part = ds.prefix(m)
        train, test = train_test_split(part, cfg.learner.test_ratio, cfg.learner.seed)
        model = train_forest(train, cfg.learner.forest())
        name = "nominal_model" if args.nominal else f"model_m{m}"
        save_model(model, out / f"{name}.json")
        c_train = confusion(model, train.windows, train.labels)
        c_test = confusion(model, test.windows, test.labels)
        report["variants"][str(m)] = {"model": f"{name}.json", "n_samples": len(part),
                                      "train": c_train.to_dict(), "test": c_test.to_dict()}
        print(f"m={m}: {len(part)} samples, train accuracy {c_train.accuracy:.4f}, "
              f"test accuracy {c_test.accuracy:.4f} -> {out / (name + '.json')}")
    io.write_json(report, out / ("nominal_train_report.json" if args.nominal else "train_report.json"),
                  io.TRAIN_REPORT)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args, "evaluation.seed")
    out = _out_dir(cfg)
    g = cfg.generation
    scheme = cfg.learner.scheme(cfg.model)
    scenarios = draw_eval_scenarios(cfg.evaluation.n_eval, g.scenario_spec(cfg.evaluation.seed), cfg.model)

    model_paths = [Path(p) for p in args.model] if args.model else sorted(out.glob("model_m*.json"))
    policies = {}
    for p in model_paths:
        if not p.exists():
            raise UsageError(f"model file {p} not found")
        policies[p.stem] = ForestPolicy(load_model(p), scheme)
    if args.sanity:
        policies["ideal_replay"] = IdealReplayPolicy()
    if not policies:
        raise UsageError("no learned models given (use --model or run `train` first)")

    nominal_path = Path(args.nominal_model) if args.nominal_model else out / "nominal_model.json"
    if nominal_path.exists():
        nominal = ForestPolicy(load_model(nominal_path), scheme)
    elif args.nominal:
        nominal, _ = train_nominal_policy([s.x0 for s in scenarios], g.N, g.M, g.m, cfg.learner.forest(),
                                          cfg.model, cfg.solver, scheme)
        save_model(nominal.model, out / "nominal_model.json")
    else:
        raise UsageError(f"nominal model {nominal_path} not found (pass --nominal to train it)")
    policies["nominal"] = nominal

    report = evaluate(policies, scenarios, g.N, g.M, cfg.model, cfg.solver, nominal="nominal")
    io.write_eval_report(report, out / "eval_report.csv", out / "eval_report.json")
    agg = report.aggregates
    print(f"completed {agg['completed']}/{len(scenarios)} scenarios")
    if agg["completed"]:
        print(f"mean J ideal {agg['mean_J_ideal']:.6f}, nominal {agg['mean_J_nominal']:.6f}, "
              f"gap {100 * (agg['nominal_gap'] or 0):.1f}%")
        for name, ra in agg["recovered_advantage"].items():
            ra_txt = "undefined" if ra is None else f"{ra:.3f}"
            print(f"  {name}: mean J {agg['mean_J_' + name]:.6f}, recovered advantage {ra_txt}, "
                  f"ordering ideal <= learned <= nominal: {agg['ordering'][name]}")
    n_bad = len(unconfirmed_violations(report))
    if n_bad:
        print(f"warning: {n_bad} unconfirmed candidacy violations", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    if not args.files:
        raise UsageError("report needs at least one input file")
    cfg = _load_config(args, None)
    out = _out_dir(cfg)
    written = []
    for f in args.files:
        path = Path(f)
        if not path.exists():
            raise UsageError(f"{path} does not exist")
        if path.suffix == ".csv":
            ds = io.read_dataset(path)
            tables = {f"{path.stem}_samples_control_hist": io.control_histogram_table(ds.u_values, cfg.model.u_min,
                                                                             cfg.model.u_max)}
        else:
            doc = io.read_json(path)
            fmt = io.check_format(path, doc, (io.DATASET_META, io.TIMING, io.TRAIN_REPORT, io.EVAL_REPORT))
            if fmt == io.DATASET_META:
                u_all = np.concatenate([s["u_star"] for s in doc["scenarios"] if s.get("ok")] or [np.zeros(0)])
                tables = {
                    f"{path.stem}_param_ratio_hist": io.parameter_ratio_table(doc, cfg.model.w_nominal),
                    f"{path.stem}_control_hist": io.control_histogram_table(u_all, cfg.model.u_min, cfg.model.u_max),
                }
            elif fmt == io.TIMING:
                tables = {f"{path.stem}_solve_time_cdf": io.solve_time_table(doc)}
            elif fmt == io.TRAIN_REPORT:
                tables = {f"{path.stem}_confusion": io.confusion_table(doc)}
            else:
                tables = {f"{path.stem}_cost_comparison": io.cost_comparison_table(doc)}
        for name, (header, rows) in tables.items():
            target = out / f"{name}.csv"
            io.write_table(target, header, rows)
            written.append(target)
    for target in written:
        print(f"wrote {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpcdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="override the seed of this stage")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    p = sub.add_parser("generate", help="solve sampled problems and write the learning dataset")
    common(p)
    p.add_argument("--nominal", action="store_true", help="generate the nominal-parameter dataset instead")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train forests on the dataset, one per m variant")
    common(p)
    p.add_argument("--dataset", help="dataset CSV (default: <out>/dataset.csv)")
    p.add_argument("--m", type=int, action="append", help="m variant to train (repeatable)")
    p.add_argument("--nominal", action="store_true", help="train the nominal baseline on nominal_dataset.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="closed-loop comparison on fresh scenarios")
    common(p)
    p.add_argument("--model", action="append", help="learned model JSON (repeatable)")
    p.add_argument("--nominal-model", help="nominal baseline model JSON")
    p.add_argument("--nominal", action="store_true", help="train the nominal baseline if it is missing")
    p.add_argument("--sanity", action="store_true", help="add the ideal open-loop replay as a policy")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="write plot-ready CSV tables from result files")
    common(p)
    p.add_argument("files", nargs="*")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenerationError, SolverError, DomainError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
