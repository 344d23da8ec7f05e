"""Acceptance suite: one test per numbered acceptance criterion.

Criteria 1-8 are self-contained numeric properties checked against
independent oracles. Criteria 9-11 share one five-seed trend experiment
(module-scoped; ~15 minutes on one CPU). Set UGA_ACCEPTANCE_RUN=<dir> to
keep the run directory across invocations; the loop resumes finished
stages, so reruns only pay for the assertions. Criteria 12-13 drive the
review service over its HTTP API.
"""
import base64
import dataclasses
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from uga import evaluation, loop, pngio, sampler, segmenter, service, synthdata, uncertainty

# ---------------------------------------------------------------------------
# Oracles, written against the definitions rather than the implementation.


def mean_kl_oracle(probs: np.ndarray) -> float:
    """Direct mean KL(q || p_i) with q the normalized geometric mean."""
    logs = np.log(probs)
    geo = np.exp(logs.mean(axis=0))
    q = geo / geo.sum()
    kls = [(q * (np.log(q) - np.log(p))).sum() for p in probs]
    return float(np.mean(kls))


def dice_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Brute-force set counting over explicit pixel coordinate sets."""
    sa = {(i, j) for i, j in zip(*np.nonzero(a))}
    sb = {(i, j) for i, j in zip(*np.nonzero(b))}
    if not sa and not sb:
        return 1.0
    return 2.0 * len(sa & sb) / (len(sa) + len(sb))


def f64_params(seed: int) -> segmenter.ModelParams:
    p = segmenter.init_params(np.random.default_rng(seed))
    return segmenter.ModelParams([w.astype(np.float64) for w in p.weights],
                                 [b.astype(np.float64) for b in p.biases])


def single_pixel_map(probs: np.ndarray) -> np.ndarray:
    """(K, C) distributions -> (K, 1, 1, C) log-prob stack."""
    return np.log(probs)[:, None, None, :]


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# Uncertainty math.


def test_criterion_01_agreement_zero():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(1, 16, 16, 2)) * 3
    lp = segmenter.log_softmax(logits)[0]
    maps = np.stack([lp] * 5)
    for variant in ("kl",):
        umap = uncertainty.pixel_disagreement(maps, variant=variant)
        peak = float(umap.scores.max())
        assert peak <= 1e-9
    print(f"criterion 1: max disagreement on identical maps {peak:.3g} <= 1e-9: PASS")


def test_criterion_02_oracle_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for n in range(1000):
        k = (2, 3, 5)[n % 3]
        c = (2, 3)[n % 2]
        probs = rng.dirichlet(np.ones(c) * 0.7, size=k)
        probs = np.clip(probs, 1e-6, None)
        probs /= probs.sum(axis=1, keepdims=True)
        umap = uncertainty.pixel_disagreement(single_pixel_map(probs))
        worst = max(worst, abs(float(umap.scores[0, 0]) - mean_kl_oracle(probs)))
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-6
    assert elapsed < 1.0

    fixed = np.array([[0.9, 0.1], [0.1, 0.9]])
    got = float(uncertainty.pixel_disagreement(single_pixel_map(fixed)).scores[0, 0])
    assert abs(got - mean_kl_oracle(fixed)) <= 1e-6
    assert abs(got - 0.5108) <= 2e-4
    print(f"criterion 2: 1000 tuples worst |err| {worst:.2e} <= 1e-6, "
          f"opposed-folds case {got:.4f} nats, {elapsed:.2f}s < 1s: PASS")


def test_criterion_03_monotone_grid():
    values = []
    for a in (0.5, 0.6, 0.7, 0.8, 0.9):
        probs = np.array([[a, 1 - a], [1 - a, a]])
        values.append(float(uncertainty.pixel_disagreement(single_pixel_map(probs)).scores[0, 0]))
    assert all(lo < hi for lo, hi in zip(values, values[1:]))
    print(f"criterion 3: disagreement strictly increasing over the grid {values}: PASS")


# ---------------------------------------------------------------------------
# Segmenter numerics.


def test_criterion_04_gradient_check():
    t0 = time.perf_counter()
    params = f64_params(4)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 4, 4, 3))
    y = (rng.random((2, 4, 4)) < 0.4).astype(np.uint8)
    _, gw, gb = segmenter.gradient(params, x, y, dtype=np.float64)
    step = 1e-4
    worst = 0.0
    for li in range(len(segmenter.ARCHITECTURE)):
        w_shape = params.weights[li].shape
        coords = [np.unravel_index(int(i), w_shape)
                  for i in rng.choice(params.weights[li].size, size=20, replace=False)]
        coords += [("b", int(i)) for i in
                   rng.choice(params.biases[li].size,
                              size=min(5, params.biases[li].size), replace=False)]
        for idx in coords:
            if isinstance(idx, tuple) and idx and idx[0] == "b":
                tensor, key, analytic = "b", idx[1], float(gb[li][idx[1]])
            else:
                tensor, key, analytic = "w", idx, float(gw[li][idx])
            arrs = params.weights if tensor == "w" else params.biases
            orig = arrs[li][key]
            arrs[li][key] = orig + step
            hi = segmenter.loss_on_batch(params, x, y, dtype=np.float64)
            arrs[li][key] = orig - step
            lo = segmenter.loss_on_batch(params, x, y, dtype=np.float64)
            arrs[li][key] = orig
            fd = (hi - lo) / (2 * step)
            rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8)
            worst = max(worst, rel)
    elapsed = time.perf_counter() - t0
    assert worst <= 1e-3
    assert elapsed < 10.0
    print(f"criterion 4: worst relative gradient error {worst:.2e} <= 1e-3 "
          f"over >=20 coords/layer, {elapsed:.1f}s < 10s: PASS")


def test_criterion_05_log_softmax_normalization():
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(5):
        params = segmenter.init_params(np.random.default_rng(50 + trial))
        batch = rng.normal(size=(2, 8, 8, 3)) * (10.0 ** (trial - 2))
        lp = segmenter.predict_log_probs_batch(params, batch.astype(np.float32))
        worst = max(worst, float(np.abs(np.exp(lp).sum(axis=-1) - 1.0).max()))
    assert worst <= 1e-6
    print(f"criterion 5: per-pixel exp-sum within {worst:.2e} of 1 <= 1e-6: PASS")


# ---------------------------------------------------------------------------
# Pipeline determinism & hygiene.


def small_config(out_dir, **overrides) -> loop.ExperimentConfig:
    base = dict(
        cohort=synthdata.CohortSpec(num_centers=2, slides_per_center=8, slide_size=96),
        train_config=segmenter.TrainConfig(patch_size=32, steps=12, batch_size=2),
        strategy="both",
        k_schedule=(2,),
        seeds=(0,),
        folds=2,
        output_dir=str(out_dir),
    )
    base.update(overrides)
    return loop.ExperimentConfig(**base)


def test_criterion_06_simulate_deterministic(tmp_path):
    reports = []
    for name in ("a", "b"):
        cfg = small_config(tmp_path / name)
        reports.append(loop.run_experiment(cfg))
        assert reports[-1].errors == []
    for sub in ("metrics", "rankings"):
        a = tree_bytes(tmp_path / "a" / "seed_0" / sub)
        b = tree_bytes(tmp_path / "b" / "seed_0" / sub)
        assert a == b and a
    print("criterion 6: two simulate runs byte-identical in metrics/ and rankings/: PASS")


# ---------------------------------------------------------------------------
# Trend experiment shared by criteria 7 and 9-11.

TREND_SEEDS = (0, 1, 2, 3, 4)


def trend_config(out_dir) -> loop.ExperimentConfig:
    return loop.ExperimentConfig(
        cohort=synthdata.CohortSpec(),
        train_config=segmenter.TrainConfig(patch_size=32, batch_size=2, steps=1000),
        strategy="both",
        k_schedule=(5, 10),
        seeds=TREND_SEEDS,
        folds=5,
        cumulative=True,
        retrain_steps=(1500, 750),
        output_dir=str(out_dir),
    )


@pytest.fixture(scope="module")
def trend_run(tmp_path_factory):
    env = os.environ.get("UGA_ACCEPTANCE_RUN")
    out = Path(env) if env else tmp_path_factory.mktemp("trend")
    config = trend_config(out)
    t0 = time.perf_counter()
    report = loop.run_experiment(config)
    wall = time.perf_counter() - t0
    assert report.errors == []
    manifest = json.loads((out / "manifest.json").read_text())
    compute = sum(r["duration_seconds"] for r in manifest["rounds"].values())
    return config, out, report, max(wall, compute)


def load_metrics(out: Path, seed: int) -> dict[str, dict]:
    arms = {}
    for f in (out / f"seed_{seed}" / "metrics").glob("*.json"):
        arms[f.stem.replace("_k", "@")] = json.loads(f.read_text())
    return arms


def test_criterion_07_ranking_hygiene(trend_run):
    config, out, _, _ = trend_run
    checked = 0
    for seed in TREND_SEEDS:
        cohort = synthdata.load_cohort(out / f"seed_{seed}" / "cohort")
        splits = {s.id: s.split for s in cohort}
        for rk_file in (out / f"seed_{seed}" / "rankings").glob("*.json"):
            for row in json.loads(rk_file.read_text()):
                assert row["background_fraction"] <= config.bg_threshold
                assert splits[row["slide_id"]] == "pool"
                checked += 1
        for corr_dir in (out / f"seed_{seed}" / "corrections").iterdir():
            for sidecar in corr_dir.glob("*.json"):
                meta = json.loads(sidecar.read_text())
                assert splits[meta["slide_id"]] == "pool"
    assert checked
    print(f"criterion 7: {checked} ranked patches all background <= 0.7 and "
          "pool-split only; corrections never touch test slides: PASS")


def test_criterion_08_dice_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    for n in range(500):
        density = rng.random() * 0.9
        a = (rng.random((16, 16)) < density).astype(np.uint8)
        b = (rng.random((16, 16)) < density * rng.random()).astype(np.uint8)
        if n % 50 == 0:
            a = np.zeros((16, 16), np.uint8)
        if n % 70 == 0:
            b = np.zeros((16, 16), np.uint8)
        worst = max(worst, abs(evaluation.dice(a, b) - dice_oracle(a, b)))
    assert worst <= 1e-9
    empty = np.zeros((16, 16), np.uint8)
    assert evaluation.dice(empty, empty) == 1.0
    print(f"criterion 8: 500 pairs worst |err| {worst:.2e} <= 1e-9, empty-empty = 1.0: PASS")


def test_criterion_09_trend_ordering(trend_run):
    _, out, _, elapsed = trend_run
    n = len(TREND_SEEDS)
    order_wins = rand5_wins = rand10_wins = 0
    for seed in TREND_SEEDS:
        arms = {k: v["overall"]["mean"] for k, v in load_metrics(out, seed).items()}
        order_wins += arms["baseline"] < arms["uga@5"] <= arms["uga@10"]
        rand5_wins += arms["uga@5"] >= arms["random@5"]
        rand10_wins += arms["uga@10"] >= arms["random@10"]
    # Budget is stated for a 4-core laptop; on fewer cores scale it by the
    # missing parallelism (fold training, ranking and evaluation all split
    # across workers via --jobs).
    budget = 600.0 * max(1.0, 4.0 / (os.cpu_count() or 1))
    assert order_wins >= 4, f"baseline < uga@5 <= uga@10 in only {order_wins}/{n} seeds"
    assert rand5_wins >= 4, f"uga@5 >= random@5 in only {rand5_wins}/{n} seeds"
    assert rand10_wins >= 4, f"uga@10 >= random@10 in only {rand10_wins}/{n} seeds"
    assert elapsed <= budget
    print(f"criterion 9: ordering {order_wins}/{n}, uga>=random@5 {rand5_wins}/{n}, "
          f"uga>=random@10 {rand10_wins}/{n}, runtime {elapsed:.0f}s <= {budget:.0f}s: PASS")


def test_criterion_10_train_center_least_uncertain(trend_run):
    config, out, _, _ = trend_run
    n = len(TREND_SEEDS)
    wins = 0
    for seed in TREND_SEEDS:
        rows = json.loads((out / f"seed_{seed}" / "rankings" / "baseline.json").read_text())
        per_center: dict[int, list[float]] = {}
        for row in rows:
            per_center.setdefault(int(row["center"]), []).append(float(row["mean"]))
        means = {c: float(np.mean(v)) for c, v in per_center.items()}
        wins += min(means, key=means.get) == config.cohort.train_center
    assert wins >= 4, f"train center least uncertain in only {wins}/{n} seeds"
    print(f"criterion 10: train center has lowest mean patch uncertainty in {wins}/{n} seeds: PASS")


def test_criterion_11_itc_stratum_improves(trend_run):
    _, out, _, _ = trend_run
    n = len(TREND_SEEDS)
    wins = 0
    for seed in TREND_SEEDS:
        arms = load_metrics(out, seed)
        for arm in arms.values():
            assert set(arm["per_class"]) == {"negative", "itc", "micro", "macro"}
        wins += arms["uga@10"]["per_class"]["itc"]["mean"] > arms["baseline"]["per_class"]["itc"]["mean"]
    assert wins >= 3, f"uga@10 improved the itc stratum in only {wins}/{n} seeds"
    print(f"criterion 11: per-class Dice reported for all strata; "
          f"uga@10 > baseline on itc in {wins}/{n} seeds: PASS")


# ---------------------------------------------------------------------------
# Service round-trip (drives the HTTP API directly).


@pytest.fixture(scope="module")
def svc(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc")
    config = small_config(out, strategy="uga", k_schedule=(1,))
    report = loop.run_experiment(config)
    assert report.errors == []
    app = service.create_app(out, static_dir=out / "no-static")
    with TestClient(app) as client:
        yield client, out


def test_criterion_12_service_round_trip(svc):
    c, out = svc
    queue = c.get("/api/queue").json()
    # Queue order must reproduce the persisted ranking file's order.
    rows = json.loads((out / "seed_0" / "rankings" / "uga_k1.json").read_text())
    expected = sorted(rows, key=lambda r: (-r["mean"], r["slide_id"], r["y"], r["x"]))
    assert [(q["slide_id"], q["x"], q["y"]) for q in queue] == \
        [(r["slide_id"], r["x"], r["y"]) for r in expected]

    target = queue[0]["id"]
    mask = np.zeros((32, 32), np.uint8)
    mask[4:12, 6:20] = 255
    png = pngio.mask_png_bytes(mask)
    posted = c.post(f"/api/patch/{target}/correction",
                    json={"mask_png": base64.b64encode(png).decode()})
    assert posted.status_code == 200
    got = c.get(f"/api/patch/{target}/correction")
    assert got.content == png  # bit-exact round trip

    rounds_before = len(c.get("/api/metrics").json()["rounds"])
    assert c.post("/api/retrain").status_code == 202
    for _ in range(600):
        if c.get("/api/retrain/status").json()["status"] == "done":
            break
        time.sleep(0.1)
    assert c.get("/api/retrain/status").json()["status"] == "done"
    rounds_after = len(c.get("/api/metrics").json()["rounds"])
    assert rounds_after == rounds_before + 1
    print("criterion 12: bit-exact correction round trip, ranked queue order, "
          "retrain appended exactly one round: PASS")


def brush_stroke(mask: np.ndarray, cx: int, cy: int, radius: int, paint: bool) -> None:
    yy, xx = np.mgrid[:mask.shape[0], :mask.shape[1]]
    hit = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    mask[hit] = 255 if paint else 0


def test_criterion_13_painted_mask_fidelity(svc):
    c, _ = svc
    queue = c.get("/api/queue").json()
    target = next(item["id"] for item in queue if item["review_status"] != "corrected")
    # Scripted brush session: start from the model's prediction, paint and erase.
    start = c.get(f"/api/patch/{target}/prediction")
    assert start.status_code == 200
    canvas = pngio.decode_mask_png(start.content).astype(np.uint8) * 255
    brush_stroke(canvas, 8, 8, 4, paint=True)
    brush_stroke(canvas, 20, 22, 5, paint=True)
    brush_stroke(canvas, 12, 12, 2, paint=False)
    png = pngio.mask_png_bytes(canvas)
    assert c.post(f"/api/patch/{target}/correction",
                  json={"mask_png": base64.b64encode(png).decode()}).status_code == 200
    refetched = c.get(f"/api/patch/{target}/correction")
    assert refetched.content == png
    rendered = pngio.decode_mask_png(refetched.content).astype(np.uint8) * 255
    assert np.array_equal(rendered, canvas)  # pixel-identical re-render
    print("criterion 13: scripted brush session re-fetches pixel-identically: PASS")
