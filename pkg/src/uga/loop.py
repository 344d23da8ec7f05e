"""Full-experiment orchestration: baseline, ranking, acquisition, retraining.

One experiment = several seeds; per seed: generate a cohort, train a k-fold
baseline on the training center's train split, rank the multi-center pool by
ensemble disagreement, then for every (strategy, k) arm select patches,
apply oracle corrections, augment, continue training from the baseline
weights, and evaluate on the untouched test split.

Every stage persists its artifact and then reloads it before use, so a
resumed run flows through byte-identical state as an uninterrupted one. All
numeric artifacts (metrics, rankings, models, cohort) are deterministic
functions of the config; wall-clock durations live only in the manifest.

Directory layout:
    output_dir/
      config.json               full experiment config
      manifest.json             version + status/duration per (seed, arm)
      seed_<s>/
        cohort/                 slide PNGs + cohort manifest
        models/baseline/        model.ugam + sidecar
        models/<strategy>_k<k>/
        rankings/               baseline.json + per-arm copies with marks
        corrections/<arm>/      corrected patch PNG pairs + sidecars
        metrics/                stratified reports (JSON + CSVs)
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, sampler, segmenter, synthdata
from .ioutil import atomic_write_text

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
STRATEGIES = ("uga", "random")


@dataclass(frozen=True)
class ExperimentConfig:
    cohort: synthdata.CohortSpec = field(default_factory=synthdata.CohortSpec)
    train_config: segmenter.TrainConfig = field(default_factory=segmenter.TrainConfig)
    strategy: str = "both"                      # uga | random | both
    k_schedule: tuple[int, ...] = (5, 10, 20)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs/experiment"
    folds: int = 5
    bg_threshold: float = 0.7
    augment_n: int = 100
    hue_range: float = 0.1
    ranking_key: str = "mean"
    variant: str = "kl"
    cumulative: bool = False                    # chain arm weights across k
    # Continued-training step budget: None = train_config.steps, an int is a
    # flat budget, a tuple gives one budget per k_schedule round (chained arms
    # extending an already-trained model usually want a shorter second round).
    retrain_steps: int | tuple[int, ...] | None = None

    def validate(self) -> None:
        self.cohort.validate()
        self.train_config.validate()
        if self.strategy not in ("uga", "random", "both"):
            raise ValueError(f"strategy must be uga/random/both, got {self.strategy!r}")
        ks = list(self.k_schedule)
        if any(k < 1 for k in ks) or ks != sorted(set(ks)):
            raise ValueError(f"k_schedule must be strictly increasing positive counts, got {ks}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not 0.0 <= self.bg_threshold <= 1.0:
            raise ValueError(f"bg_threshold {self.bg_threshold} outside [0, 1]")
        if self.augment_n < 1:
            raise ValueError(f"augment_n must be >= 1, got {self.augment_n}")
        if self.ranking_key not in ("mean", "total"):
            raise ValueError(f"ranking_key must be mean or total, got {self.ranking_key!r}")
        if self.variant not in ("kl", "raw"):
            raise ValueError(f"variant must be kl or raw, got {self.variant!r}")
        if isinstance(self.retrain_steps, tuple):
            if len(self.retrain_steps) != len(self.k_schedule):
                raise ValueError(
                    f"retrain_steps tuple must match k_schedule length "
                    f"{len(self.k_schedule)}, got {self.retrain_steps}")
            if any(s < 1 for s in self.retrain_steps):
                raise ValueError(f"retrain_steps entries must be >= 1, got {self.retrain_steps}")
        elif self.retrain_steps is not None and self.retrain_steps < 1:
            raise ValueError(f"retrain_steps must be >= 1 or None, got {self.retrain_steps}")
        n_train = synthdata._split_sizes(self.cohort, self.cohort.train_center)[0]
        if n_train < self.folds:
            raise ValueError(
                f"train split has {n_train} slides but {self.folds}-fold training "
                f"needs at least {self.folds}; raise slides_per_center")

    @property
    def strategies(self) -> tuple[str, ...]:
        return STRATEGIES if self.strategy == "both" else (self.strategy,)


@dataclass
class RoundRecord:
    seed: int
    round_index: int
    strategy: str                               # baseline | uga | random
    k: int
    selected: list[str]                         # patch ids
    model_id: str
    report: evaluation.StratifiedReport
    duration_seconds: float


@dataclass
class ExperimentReport:
    records: list[RoundRecord]
    errors: list[dict]

    def arm_records(self, strategy: str, k: int) -> list[RoundRecord]:
        return [r for r in self.records if r.strategy == strategy and r.k == k]

    def mean_dice(self, strategy: str, k: int = 0) -> float:
        recs = self.arm_records(strategy, k)
        if not recs:
            return float("nan")
        return float(np.mean([r.report.overall["mean"] for r in recs]))

    def summary_rows(self) -> list[dict]:
        """One row per arm, averaged over seeds, for the summary table."""
        rows = []
        seen = []
        for r in self.records:
            key = (r.strategy, r.k)
            if key not in seen:
                seen.append(key)
        for strategy, k in seen:
            recs = self.arm_records(strategy, k)
            means = [r.report.overall["mean"] for r in recs]
            rows.append({
                "arm": "baseline" if strategy == "baseline" else f"{strategy}@{k}",
                "mean_dice": float(np.mean(means)),
                "std_dice": float(np.std(means)),
                "seeds": len(means),
            })
        return rows


# ---------------------------------------------------------------------------
# Config serialization


def config_to_dict(config: ExperimentConfig) -> dict:
    d = dataclasses.asdict(config)
    d["k_schedule"] = list(config.k_schedule)
    d["seeds"] = list(config.seeds)
    d["train_config"]["tumor_sample_ratio"] = list(config.train_config.tumor_sample_ratio)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build a config from a possibly partial dict; absent keys keep defaults."""
    d = dict(d)
    cohort = synthdata.CohortSpec(**d.pop("cohort", {}))
    tc_raw = dict(d.pop("train_config", {}))
    if "tumor_sample_ratio" in tc_raw:
        tc_raw["tumor_sample_ratio"] = tuple(tc_raw["tumor_sample_ratio"])
    tc = segmenter.TrainConfig(**tc_raw)
    if "k_schedule" in d:
        d["k_schedule"] = tuple(d["k_schedule"])
    if "seeds" in d:
        d["seeds"] = tuple(d["seeds"])
    if isinstance(d.get("retrain_steps"), list):
        d["retrain_steps"] = tuple(d["retrain_steps"])
    return ExperimentConfig(cohort=cohort, train_config=tc, **d)


def save_experiment_config(config: ExperimentConfig, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(config_to_dict(config), indent=1, sort_keys=True) + "\n")


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Manifest


def _load_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt manifest at {path}: {e}") from e
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"manifest version {manifest.get('version')} unsupported "
                         f"(expected {MANIFEST_VERSION})")
    return manifest


def _save_manifest(path: Path, manifest: dict) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _arm_seed(seed: int, *tags: int) -> int:
    """Derived 64-bit stream id for one arm's training/selection RNG."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, np.uint64)[0])


def retrain_budget(config: ExperimentConfig, k: int) -> int:
    """Continued-training steps for the round acquiring k patches per center.

    A k outside the schedule (staged CLI with an ad-hoc budget) gets the last
    entry of a per-round tuple.
    """
    if config.retrain_steps is None:
        return config.train_config.steps
    if isinstance(config.retrain_steps, tuple):
        ks = config.k_schedule
        return config.retrain_steps[ks.index(k)] if k in ks else config.retrain_steps[-1]
    return config.retrain_steps


# ---------------------------------------------------------------------------
# Per-seed pipeline


def _ensure_cohort(config: ExperimentConfig, seed: int, seed_dir: Path) -> list[synthdata.Slide]:
    cohort_dir = seed_dir / "cohort"
    cspec = dataclasses.replace(config.cohort, seed=seed)
    if not (cohort_dir / synthdata.COHORT_MANIFEST).exists():
        synthdata.save_cohort(synthdata.generate_cohort(cspec), cohort_dir, cspec)
    return synthdata.load_cohort(cohort_dir)


def _ensure_baseline(config: ExperimentConfig, seed: int, seed_dir: Path,
                     train_slides, jobs: int) -> segmenter.EnsembleModel:
    path = seed_dir / "models" / "baseline" / "model.ugam"
    if not path.exists():
        tc = dataclasses.replace(config.train_config, seed=seed)
        ens = segmenter.train_kfold(train_slides, tc, k=config.folds, jobs=jobs)
        segmenter.save_ensemble(path, ens)
    return segmenter.load_ensemble(path)


def _ensure_report(config: ExperimentConfig, seed_dir: Path, name: str,
                   ensemble, test_slides, jobs: int) -> evaluation.StratifiedReport:
    metrics_dir = seed_dir / "metrics"
    path = metrics_dir / f"{name}.json"
    if not path.exists():
        metrics_dir.mkdir(parents=True, exist_ok=True)
        report = evaluation.evaluate(
            ensemble, test_slides, config.train_config.patch_size,
            bg_threshold=config.bg_threshold, variant=config.variant, jobs=jobs)
        evaluation.save_report(report, path)
        evaluation.save_report_csv(report, metrics_dir / f"{name}_slides.csv")
        evaluation.save_plot_data_csv(report, metrics_dir / f"{name}_plot.csv")
    return evaluation.load_report(path)


def _ensure_rankings(config: ExperimentConfig, seed_dir: Path, pool, baseline,
                     jobs: int) -> dict[int, list[sampler.RankedPatch]]:
    path = seed_dir / "rankings" / "baseline.json"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        ranked = sampler.rank_pool(
            pool, baseline, config.train_config.patch_size,
            bg_threshold=config.bg_threshold, key=config.ranking_key,
            variant=config.variant, jobs=jobs)
        sampler.save_rankings(ranked, path)
    return sampler.load_rankings(path)


def _ensure_corrections(config: ExperimentConfig, seed_dir: Path, arm: str,
                        selected, cohort) -> list[sampler.CorrectedPatch]:
    """Oracle corrections for the selected patches, in canonical id order.

    The order feeds the augmentation RNG and the retrain batch sampler, so it
    must be reconstructible from the correction directory alone (the staged
    CLI reloads corrections without the selection list).
    """
    corr_dir = seed_dir / "corrections" / arm
    patch_size = config.train_config.patch_size
    out = []
    for p in sorted(selected, key=lambda q: q.patch_id):
        stem = p.patch_id
        if not (corr_dir / f"{stem}.json").exists():
            sampler.save_correction(
                sampler.simulate_correction(p, cohort, patch_size), corr_dir, stem)
        out.append(sampler.load_correction(corr_dir, stem))
    return out


def _run_arm(config: ExperimentConfig, seed: int, seed_dir: Path, arm_index: int,
             strategy: str, k: int, cohort, train_slides, pool, test_slides,
             ranked, init_model, jobs: int) -> tuple[RoundRecord, segmenter.EnsembleModel]:
    arm = f"{strategy}_k{k}"
    if strategy == "uga":
        selected = sampler.select_uga(ranked, k, config.train_config.patch_size)
    else:
        # The draw seed is independent of k, so a larger budget extends the
        # smaller one (select_random walks one permutation): random@10 holds
        # random@5's patches plus five more, mirroring uga's nested top-k.
        selected = sampler.select_random(
            pool, k, config.bg_threshold, seed=[seed, arm_index],
            patch_size=config.train_config.patch_size)

    marks_path = seed_dir / "rankings" / f"{arm}.json"
    if not marks_path.exists():
        marked = sampler.load_rankings(seed_dir / "rankings" / "baseline.json")
        sampler.mark_selected(marked, selected)
        sampler.save_rankings(marked, marks_path)

    corrections = _ensure_corrections(config, seed_dir, arm, selected, cohort)
    new_patches = []
    for i, cp in enumerate(corrections):
        for aug in sampler.augment(cp, n=config.augment_n, hue_range=config.hue_range,
                                   seed=[seed, arm_index, k, i]):
            new_patches.append((aug.patch, aug.mask))

    model_path = seed_dir / "models" / arm / "model.ugam"
    if not model_path.exists():
        tcc = dataclasses.replace(config.train_config,
                                  seed=_arm_seed(seed, arm_index, k, 0xC0),
                                  steps=retrain_budget(config, k))
        model = segmenter.continue_training(init_model, train_slides, new_patches,
                                            tcc, jobs=jobs)
        segmenter.save_ensemble(model_path, model)
    model = segmenter.load_ensemble(model_path)
    report = _ensure_report(config, seed_dir, arm, model, test_slides, jobs)
    record = RoundRecord(seed=seed, round_index=0, strategy=strategy, k=k,
                         selected=[p.patch_id for p in selected],
                         model_id=model.model_id, report=report, duration_seconds=0.0)
    return record, model


def _run_seed(config: ExperimentConfig, seed: int, out: Path, jobs: int,
              manifest: dict, manifest_path: Path) -> list[RoundRecord]:
    seed_dir = out / f"seed_{seed}"
    records: list[RoundRecord] = []

    def finish(arm_key: str, record: RoundRecord, started: float) -> None:
        entry = manifest["rounds"].get(arm_key, {})
        if entry.get("status") == "done":
            record.duration_seconds = float(entry.get("duration_seconds", 0.0))
        else:
            record.duration_seconds = time.perf_counter() - started
            manifest["rounds"][arm_key] = {
                "status": "done",
                "model_id": record.model_id,
                "duration_seconds": record.duration_seconds,
            }
            _save_manifest(manifest_path, manifest)
        records.append(record)

    t0 = time.perf_counter()
    cohort = _ensure_cohort(config, seed, seed_dir)
    train_center = config.cohort.train_center
    train_slides = [s for s in cohort if s.center == train_center and s.split == "train"]
    pool = [s for s in cohort if s.split == "pool"]
    test_slides = [s for s in cohort if s.split == "test"]

    baseline = _ensure_baseline(config, seed, seed_dir, train_slides, jobs)
    base_report = _ensure_report(config, seed_dir, "baseline", baseline, test_slides, jobs)
    finish(f"seed{seed}/baseline",
           RoundRecord(seed=seed, round_index=0, strategy="baseline", k=0, selected=[],
                       model_id=baseline.model_id, report=base_report,
                       duration_seconds=0.0), t0)

    ranked = _ensure_rankings(config, seed_dir, pool, baseline, jobs)

    round_index = 0
    for strategy in config.strategies:
        arm_index = STRATEGIES.index(strategy)
        prev = baseline
        for k in config.k_schedule:
            round_index += 1
            t0 = time.perf_counter()
            init_model = prev if config.cumulative else baseline
            record, model = _run_arm(config, seed, seed_dir, arm_index, strategy, k,
                                     cohort, train_slides, pool, test_slides,
                                     ranked, init_model, jobs)
            record.round_index = round_index
            finish(f"seed{seed}/{strategy}_k{k}", record, t0)
            prev = model
    return records


def _expected_arm_keys(config: ExperimentConfig, seed: int) -> list[str]:
    keys = [f"seed{seed}/baseline"]
    keys += [f"seed{seed}/{s}_k{k}" for s in config.strategies for k in config.k_schedule]
    return keys


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Execute (or resume) every seed of the experiment; see module docstring.

    Completed rounds are detected through their persisted artifacts and
    reloaded instead of recomputed, so calling this twice on the same
    output_dir is a no-op the second time. A failing round aborts its seed
    (with the error recorded in the manifest) without stopping other seeds.
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        existing = json.loads(cfg_path.read_text())
        ours = json.loads(json.dumps(config_to_dict(config)))
        if existing != ours:
            raise ValueError(f"{out} already holds a different experiment config")
    else:
        save_experiment_config(config, cfg_path)

    manifest_path = out / "manifest.json"
    manifest = _load_manifest(manifest_path) if manifest_path.exists() \
        else {"version": MANIFEST_VERSION, "rounds": {}}
    _save_manifest(manifest_path, manifest)

    records: list[RoundRecord] = []
    errors: list[dict] = []
    for seed in config.seeds:
        try:
            records.extend(_run_seed(config, seed, out, jobs, manifest, manifest_path))
        except Exception as e:  # noqa: BLE001 - seed isolation is the contract
            log.exception("seed %d failed", seed)
            message = f"{type(e).__name__}: {e}"
            first = True
            for key in _expected_arm_keys(config, seed):
                if manifest["rounds"].get(key, {}).get("status") != "done":
                    manifest["rounds"][key] = {
                        "status": "failed" if first else "aborted",
                        "error": message,
                    }
                    first = False
            _save_manifest(manifest_path, manifest)
            errors.append({"seed": seed, "error": message})
    return ExperimentReport(records=records, errors=errors)


def resume(output_dir: str | Path) -> ExperimentReport:
    """Pick up an interrupted experiment; completed rounds are not redone."""
    out = Path(output_dir)
    cfg_path = out / "config.json"
    manifest_path = out / "manifest.json"
    if not cfg_path.exists() or not manifest_path.exists():
        raise FileNotFoundError(
            f"{out} is not an experiment directory (missing config.json/manifest.json)")
    _load_manifest(manifest_path)  # surfaces corruption/version mismatch early
    config = dataclasses.replace(load_experiment_config(cfg_path), output_dir=str(out))
    return run_experiment(config)
