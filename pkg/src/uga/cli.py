"""Command-line entry point for every pipeline stage.

All stages of the loop share a single run directory and a single JSON config
(the experiment config; partial files are merged over defaults, dumpable via
`print-config`). `simulate` executes the whole multi-seed experiment with
oracle corrections; the staged subcommands walk one seed through the same
artifacts step by step and are byte-compatible with it.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evaluation, loop, sampler, segmenter, synthdata

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    """Bad config file or flag combination (exit code 2)."""


class MissingArtifact(Exception):
    """A prerequisite stage has not produced its output yet (exit code 1)."""


def _load_config_file(path: str) -> loop.ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    try:
        config = loop.config_from_dict(raw)
        config.validate()
    except TypeError as e:
        raise ConfigError(f"config file {p}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"config file {p}: {e}") from e
    return config


def _run_dir_config(run_dir: str) -> loop.ExperimentConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path} (run generate-data first)")
    return dataclasses.replace(loop.load_experiment_config(path),
                               output_dir=str(run_dir))


def _seed_dir(config: loop.ExperimentConfig) -> Path:
    return Path(config.output_dir) / f"seed_{config.seeds[0]}"


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path} (run {hint} first)")
    return path


def _load_slides(config: loop.ExperimentConfig):
    seed_dir = _seed_dir(config)
    _require(seed_dir / "cohort" / synthdata.COHORT_MANIFEST, "generate-data")
    cohort = synthdata.load_cohort(seed_dir / "cohort")
    tc = config.cohort.train_center
    return (cohort,
            [s for s in cohort if s.center == tc and s.split == "train"],
            [s for s in cohort if s.split == "pool"],
            [s for s in cohort if s.split == "test"])


def _print_summary(rows: list[dict]) -> None:
    print(f"{'arm':<14}{'mean dice':>11}{'std':>9}{'seeds':>7}")
    for r in rows:
        print(f"{r['arm']:<14}{r['mean_dice']:>11.4f}{r['std_dice']:>9.4f}{r['seeds']:>7}")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate_data(args) -> int:
    config = _load_config_file(args.config)
    config = dataclasses.replace(config, output_dir=str(args.out))
    out = Path(args.out)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        existing = json.loads(cfg_path.read_text())
        if existing != json.loads(json.dumps(loop.config_to_dict(config))):
            raise ConfigError(f"{out} already holds a different experiment config")
    out.mkdir(parents=True, exist_ok=True)
    loop.save_experiment_config(config, cfg_path)
    slides = loop._ensure_cohort(config, config.seeds[0], _seed_dir(config))
    print(f"cohort: {len(slides)} slides across {config.cohort.num_centers} centers "
          f"at {_seed_dir(config) / 'cohort'}")
    return EXIT_OK


def cmd_train_baseline(args) -> int:
    config = _run_dir_config(args.run_dir)
    seed_dir = _seed_dir(config)
    _, train_slides, _, test_slides = _load_slides(config)
    existed = (seed_dir / "models" / "baseline" / "model.ugam").exists()
    baseline = loop._ensure_baseline(config, config.seeds[0], seed_dir,
                                     train_slides, args.jobs)
    report = loop._ensure_report(config, seed_dir, "baseline", baseline,
                                 test_slides, args.jobs)
    state = "reused existing" if existed else "trained"
    print(f"baseline: {state} {config.folds}-fold ensemble {baseline.model_id}, "
          f"test dice {report.overall['mean']:.4f}")
    return EXIT_OK


def cmd_rank(args) -> int:
    config = _run_dir_config(args.run_dir)
    seed_dir = _seed_dir(config)
    _require(seed_dir / "models" / "baseline" / "model.ugam", "train-baseline")
    baseline = segmenter.load_ensemble(seed_dir / "models" / "baseline" / "model.ugam")
    _, _, pool, _ = _load_slides(config)
    ranked = sampler.rank_pool(
        pool, baseline, config.train_config.patch_size,
        bg_threshold=config.bg_threshold, key=config.ranking_key,
        variant=config.variant, jobs=args.jobs)
    path = seed_dir / "rankings" / "baseline.json"
    sampler.save_rankings(ranked, path)
    n = sum(len(ps) for ps in ranked.values())
    print(f"ranked {n} pool patches across {len(ranked)} centers -> {path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    config = _run_dir_config(args.run_dir)
    seed_dir = _seed_dir(config)
    seed = config.seeds[0]
    base_path = _require(seed_dir / "rankings" / "baseline.json", "rank")
    arm = f"{args.strategy}_k{args.k}"
    arm_index = loop.STRATEGIES.index(args.strategy)
    cohort, _, pool, _ = _load_slides(config)
    if args.strategy == "uga":
        selected = sampler.select_uga(sampler.load_rankings(base_path), args.k,
                                      config.train_config.patch_size)
    else:
        selected = sampler.select_random(
            pool, args.k, config.bg_threshold, seed=[seed, arm_index],
            patch_size=config.train_config.patch_size)
    marked = sampler.load_rankings(base_path)
    sampler.mark_selected(marked, selected)
    sampler.save_rankings(marked, seed_dir / "rankings" / f"{arm}.json")
    loop._ensure_corrections(config, seed_dir, arm, selected, cohort)
    print(f"{arm}: selected {len(selected)} patches, corrections at "
          f"{seed_dir / 'corrections' / arm}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    config = _run_dir_config(args.run_dir)
    seed_dir = _seed_dir(config)
    seed = config.seeds[0]
    arm = f"{args.strategy}_k{args.k}"
    arm_index = loop.STRATEGIES.index(args.strategy)
    corr_dir = seed_dir / "corrections" / arm
    stems = sorted(p.stem for p in corr_dir.glob("*.json")) if corr_dir.is_dir() else []
    if not stems:
        raise MissingArtifact(f"missing artifact: corrections under {corr_dir} "
                              "(run sample first)")
    _require(seed_dir / "models" / "baseline" / "model.ugam", "train-baseline")
    baseline = segmenter.load_ensemble(seed_dir / "models" / "baseline" / "model.ugam")
    _, train_slides, _, _ = _load_slides(config)

    model_path = seed_dir / "models" / arm / "model.ugam"
    if not model_path.exists():
        corrections = [sampler.load_correction(corr_dir, s) for s in stems]
        new_patches = []
        for i, cp in enumerate(corrections):
            for aug in sampler.augment(cp, n=config.augment_n,
                                       hue_range=config.hue_range,
                                       seed=[seed, arm_index, args.k, i]):
                new_patches.append((aug.patch, aug.mask))
        tc = dataclasses.replace(config.train_config,
                                 seed=loop._arm_seed(seed, arm_index, args.k, 0xC0),
                                 steps=loop.retrain_budget(config, args.k))
        model = segmenter.continue_training(baseline, train_slides, new_patches,
                                            tc, jobs=args.jobs)
        segmenter.save_ensemble(model_path, model)
        print(f"{arm}: retrained on {len(stems)} corrections -> {model.model_id}")
    else:
        model = segmenter.load_ensemble(model_path)
        print(f"{arm}: reused existing model {model.model_id}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _run_dir_config(args.run_dir)
    seed_dir = _seed_dir(config)
    models_dir = _require(seed_dir / "models", "train-baseline")
    _, _, _, test_slides = _load_slides(config)
    rows = []
    for model_path in sorted(models_dir.glob("*/model.ugam")):
        name = model_path.parent.name
        model = segmenter.load_ensemble(model_path)
        metrics_dir = seed_dir / "metrics"
        report = evaluation.evaluate(
            model, test_slides, config.train_config.patch_size,
            bg_threshold=config.bg_threshold, variant=config.variant, jobs=args.jobs)
        metrics_dir.mkdir(parents=True, exist_ok=True)
        evaluation.save_report(report, metrics_dir / f"{name}.json")
        evaluation.save_report_csv(report, metrics_dir / f"{name}_slides.csv")
        evaluation.save_plot_data_csv(report, metrics_dir / f"{name}_plot.csv")
        rows.append({"arm": name.replace("_k", "@"), "mean_dice": report.overall["mean"],
                     "std_dice": report.overall["std"], "seeds": 1})
    rows.sort(key=lambda r: (r["arm"] != "baseline", r["arm"]))
    _print_summary(rows)
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _load_config_file(args.config)
    config = dataclasses.replace(config, output_dir=str(args.out))
    if args.seeds:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(","))
        except ValueError as e:
            raise ConfigError(f"--seeds must be comma-separated integers: {e}") from e
        config = dataclasses.replace(config, seeds=seeds)
        config.validate()
    report = loop.run_experiment(config, jobs=args.jobs)
    _print_summary(report.summary_rows())
    for err in report.errors:
        print(f"seed {err['seed']} failed: {err['error']}", file=sys.stderr)
    return EXIT_RUNTIME if report.errors else EXIT_OK


def cmd_serve(args) -> int:
    from . import service  # deferred: pulls in fastapi

    config = _run_dir_config(args.run_dir)
    metrics = _seed_dir(config) / "metrics" / "baseline.json"
    if metrics.exists():
        report = evaluation.load_report(metrics)
        _print_summary([{"arm": "baseline", "mean_dice": report.overall["mean"],
                         "std_dice": report.overall["std"], "seeds": 1}])
    app = service.create_app(args.run_dir, seed=args.seed, jobs=args.jobs)
    import uvicorn
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def cmd_print_config(args) -> int:
    print(json.dumps(loop.config_to_dict(loop.ExperimentConfig()), indent=1,
                     sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uga",
        description="uncertainty-guided annotation loop for multi-center segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("generate-data", cmd_generate_data, "synthesize a multi-center cohort")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="run directory to create")

    for name, fn, help_text in [
            ("train-baseline", cmd_train_baseline, "train the k-fold baseline ensemble"),
            ("rank", cmd_rank, "rank pool patches by ensemble disagreement"),
            ("evaluate", cmd_evaluate, "evaluate every trained model on the test split")]:
        p = add(name, fn, help_text)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--jobs", type=int, default=1)

    p = add("sample", cmd_sample, "select patches and apply oracle corrections")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--strategy", choices=("uga", "random"), default="uga")
    p.add_argument("--k", type=int, default=5, help="patches per center")
    p.add_argument("--jobs", type=int, default=1)

    p = add("retrain", cmd_retrain, "continue training from the baseline on corrections")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--strategy", choices=("uga", "random"), default="uga")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--jobs", type=int, default=1)

    p = add("simulate", cmd_simulate, "run the full multi-seed oracle experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed override")
    p.add_argument("--jobs", type=int, default=1)

    p = add("serve", cmd_serve, "serve the interactive review API/UI over a run dir")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)

    add("print-config", cmd_print_config, "dump the default experiment config JSON")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - CLI boundary
        log.exception("command failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
