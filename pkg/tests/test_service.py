"""Review service API: queue, artifacts, corrections, retraining."""
import base64
import io
import json
import shutil
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from uga import loop, pngio, sampler, segmenter, service, synthdata
from uga.ioutil import atomic_write_bytes


def tiny_config(out_dir, **overrides) -> loop.ExperimentConfig:
    base = dict(
        cohort=synthdata.CohortSpec(num_centers=2, slides_per_center=8, slide_size=96),
        train_config=segmenter.TrainConfig(patch_size=32, steps=12, batch_size=2),
        strategy="uga",
        k_schedule=(1,),
        seeds=(0,),
        folds=2,
        output_dir=str(out_dir),
    )
    base.update(overrides)
    return loop.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("svc")
    config = tiny_config(out)
    report = loop.run_experiment(config)
    assert report.errors == []
    return Path(config.output_dir)


@pytest.fixture()
def client(run_dir, tmp_path):
    """Fresh session over a private copy so tests cannot contaminate each other."""
    copy = tmp_path / "run"
    shutil.copytree(run_dir, copy)
    app = service.create_app(copy, static_dir=tmp_path / "nonexistent")
    with TestClient(app) as c:
        yield c


def top_item(client):
    return client.get("/api/queue", params={"limit": 1}).json()[0]


def mask_png_b64(mask: np.ndarray) -> str:
    return base64.b64encode(pngio.mask_png_bytes(mask)).decode()


# ---------------------------------------------------------------------------
# Queue


def test_queue_descending_with_status(client):
    items = client.get("/api/queue").json()
    assert len(items) > 0
    means = [it["mean"] for it in items]
    assert means == sorted(means, reverse=True)
    assert all(it["review_status"] == "pending" for it in items)
    assert {"id", "center", "mean", "image_url", "heatmap_url"} <= set(items[0])


def test_queue_limit_and_center_filter(client):
    top5 = client.get("/api/queue", params={"limit": 5}).json()
    assert len(top5) == 5
    assert top5 == client.get("/api/queue").json()[:5]
    only1 = client.get("/api/queue", params={"center": 1}).json()
    assert only1 and all(it["center"] == 1 for it in only1)


def test_queue_matches_ranking_file(client, run_dir):
    ranked = sampler.load_rankings(run_dir / "seed_0" / "rankings" / "baseline.json")
    expected = sorted((p for ps in ranked.values() for p in ps),
                      key=lambda p: (-p.mean_uncertainty, p.slide_id,
                                     p.origin[1], p.origin[0]))
    got = client.get("/api/queue").json()
    assert [it["id"] for it in got] == [p.patch_id for p in expected]


def test_queue_409_before_ranking(tmp_path):
    bare = tmp_path / "bare"
    config = tiny_config(bare)
    loop.save_experiment_config(config, bare / "config.json")
    loop._ensure_cohort(config, 0, bare / "seed_0")
    with TestClient(service.create_app(bare, static_dir=tmp_path / "no_ui")) as c:
        r = c.get("/api/queue")
        assert r.status_code == 409
        assert "rank" in r.json()["detail"]


# ---------------------------------------------------------------------------
# Patch artifacts


def test_image_and_heatmap_are_png_with_etag(client):
    it = top_item(client)
    for url in (it["image_url"], it["heatmap_url"]):
        r = client.get(url)
        assert r.status_code == 200
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"
        assert r.headers["etag"].strip('"')
        assert r.headers["content-type"] == "image/png"


def test_unknown_patch_404(client):
    for url in ("/api/patch/nope_x0_y0/image", "/api/patch/nope_x0_y0/heatmap",
                "/api/patch/nope_x0_y0/prediction"):
        assert client.get(url).status_code == 404


def test_prediction_is_binary_mask_of_patch_size(client):
    it = top_item(client)
    r = client.get(f"/api/patch/{it['id']}/prediction")
    arr = np.asarray(Image.open(io.BytesIO(r.content)))
    assert arr.shape == (32, 32)
    assert set(np.unique(arr)) <= {0, 255}


def test_identical_folds_give_transparent_heatmap(run_dir, tmp_path):
    copy = tmp_path / "run"
    shutil.copytree(run_dir, copy)
    path = copy / "seed_0" / "models" / "baseline" / "model.ugam"
    ens = segmenter.load_ensemble(path)
    flat = segmenter.EnsembleModel(folds=[ens.folds[0]] * len(ens.folds),
                                   train_config=ens.train_config)
    segmenter.save_ensemble(path, flat)
    with TestClient(service.create_app(copy, static_dir=tmp_path / "no_ui")) as c:
        it = top_item(c)
        r = c.get(it["heatmap_url"])
        rgba = pngio.decode_rgba_png(r.content)
        assert int(rgba[..., 3].sum()) == 0


# ---------------------------------------------------------------------------
# Corrections


def test_correction_round_trip_bit_exact(client):
    it = top_item(client)
    rng = np.random.default_rng(7)
    mask = rng.integers(0, 2, size=(32, 32)).astype(np.uint8)
    png = pngio.mask_png_bytes(mask)
    r = client.post(f"/api/patch/{it['id']}/correction",
                    json={"mask_png": base64.b64encode(png).decode()})
    assert r.status_code == 200
    assert r.json()["review_status"] == "corrected"
    back = client.get(f"/api/patch/{it['id']}/correction")
    assert back.content == png


def test_corrected_patch_stays_in_queue_order(client):
    before = [it["id"] for it in client.get("/api/queue").json()]
    top = before[0]
    client.post(f"/api/patch/{top}/correction",
                json={"mask_png": mask_png_b64(np.zeros((32, 32), np.uint8))})
    after = client.get("/api/queue").json()
    assert [it["id"] for it in after] == before
    assert after[0]["review_status"] == "corrected"
    assert all(it["review_status"] == "pending" for it in after[1:])


def test_correction_rejects_wrong_size(client):
    it = top_item(client)
    r = client.post(f"/api/patch/{it['id']}/correction",
                    json={"mask_png": mask_png_b64(np.zeros((16, 16), np.uint8))})
    assert r.status_code == 400
    assert "dims" in r.json()["detail"]


def test_correction_rejects_garbage(client):
    it = top_item(client)
    bad_b64 = base64.b64encode(b"not a png").decode()
    assert client.post(f"/api/patch/{it['id']}/correction",
                       json={"mask_png": bad_b64}).status_code == 400
    assert client.post(f"/api/patch/{it['id']}/correction",
                       json={"mask_png": "!!!"}).status_code == 400
    assert client.post(f"/api/patch/{it['id']}/correction",
                       json={}).status_code == 400


def test_correction_rejects_non_binary_gray(client):
    it = top_item(client)
    buf = io.BytesIO()
    Image.fromarray(np.full((32, 32), 100, np.uint8), mode="L").save(buf, format="PNG")
    r = client.post(f"/api/patch/{it['id']}/correction",
                    json={"mask_png": base64.b64encode(buf.getvalue()).decode()})
    assert r.status_code == 400


def test_correction_unknown_id_404(client):
    r = client.post("/api/patch/ghost_x0_y0/correction",
                    json={"mask_png": mask_png_b64(np.zeros((32, 32), np.uint8))})
    assert r.status_code == 404


def test_repost_overwrites_and_audits(client, tmp_path):
    it = top_item(client)
    first = np.zeros((32, 32), np.uint8)
    second = np.ones((32, 32), np.uint8)
    client.post(f"/api/patch/{it['id']}/correction", json={"mask_png": mask_png_b64(first)})
    r = client.post(f"/api/patch/{it['id']}/correction", json={"mask_png": mask_png_b64(second)})
    assert r.json()["overwrite"] is True
    back = client.get(f"/api/patch/{it['id']}/correction")
    assert (pngio.decode_mask_png(back.content) == second).all()
    audit = (tmp_path / "run" / "seed_0" / "corrections" / "audit.log").read_text()
    events = [json.loads(line) for line in audit.splitlines()]
    assert [e["overwrite"] for e in events] == [False, True]


def test_rle_correction(client):
    it = top_item(client)
    # 32x32 = 1024 pixels: 100 background, 24 foreground, rest background
    r = client.post(f"/api/patch/{it['id']}/correction",
                    json={"rle": [100, 24, 900]})
    assert r.status_code == 200
    back = pngio.decode_mask_png(client.get(f"/api/patch/{it['id']}/correction").content)
    expected = np.zeros(1024, np.uint8)
    expected[100:124] = 1
    assert (back.ravel() == expected).all()


def test_rle_rejects_bad_total(client):
    it = top_item(client)
    assert client.post(f"/api/patch/{it['id']}/correction",
                       json={"rle": [100, 24]}).status_code == 400
    assert client.post(f"/api/patch/{it['id']}/correction",
                       json={"rle": [-1, 1025]}).status_code == 400


def test_skip_marks_status(client):
    items = client.get("/api/queue").json()
    target = items[1]["id"]
    assert client.post(f"/api/patch/{target}/skip").json()["review_status"] == "skipped"
    after = client.get("/api/queue").json()
    assert next(it for it in after if it["id"] == target)["review_status"] == "skipped"


# ---------------------------------------------------------------------------
# Retraining


def wait_for_retrain(client, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        status = client.get("/api/retrain/status").json()
        if status["status"] in ("done", "failed"):
            return status
        time.sleep(0.05)
    raise TimeoutError("retrain did not finish")


def test_retrain_without_corrections_409(client):
    assert client.post("/api/retrain").status_code == 409


def test_retrain_full_cycle(client):
    baseline_rounds = client.get("/api/metrics").json()["rounds"]
    assert [r["name"] for r in baseline_rounds] == ["baseline"]
    old_model = client.get("/api/retrain/status").json()["model_id"]

    it = top_item(client)
    client.post(f"/api/patch/{it['id']}/correction",
                json={"mask_png": mask_png_b64(np.zeros((32, 32), np.uint8))})
    r = client.post("/api/retrain")
    assert r.status_code == 202
    assert r.json()["job_id"] == 1
    status = wait_for_retrain(client)
    assert status["status"] == "done"
    assert status["model_id"] != old_model

    rounds = client.get("/api/metrics").json()["rounds"]
    assert [r["name"] for r in rounds] == ["baseline", "interactive_round1"]
    assert rounds[1]["trained_on"] == [it["id"]]

    queue = client.get("/api/queue").json()
    assert it["id"] not in [q["id"] for q in queue]
    means = [q["mean"] for q in queue]
    assert means == sorted(means, reverse=True)


def test_retrain_single_flight(client, monkeypatch):
    gate = threading.Event()
    real = segmenter.continue_training

    def slow(*args, **kwargs):
        gate.wait(timeout=60)
        return real(*args, **kwargs)

    monkeypatch.setattr(segmenter, "continue_training", slow)
    it = top_item(client)
    client.post(f"/api/patch/{it['id']}/correction",
                json={"mask_png": mask_png_b64(np.zeros((32, 32), np.uint8))})
    assert client.post("/api/retrain").status_code == 202
    assert client.post("/api/retrain").status_code == 409
    gate.set()
    assert wait_for_retrain(client)["status"] == "done"


def test_metrics_match_persisted_file(client, tmp_path):
    rounds = client.get("/api/metrics").json()["rounds"]
    path = tmp_path / "run" / "seed_0" / "metrics" / "baseline.json"
    assert rounds[0]["report"] == json.loads(path.read_text())


def test_restart_restores_session_state(client, tmp_path):
    it = top_item(client)
    mask = np.zeros((32, 32), np.uint8)
    mask[:8] = 1
    client.post(f"/api/patch/{it['id']}/correction", json={"mask_png": mask_png_b64(mask)})
    client.post("/api/retrain")
    wait_for_retrain(client)
    queue_before = [q["id"] for q in client.get("/api/queue").json()]
    rounds_before = client.get("/api/metrics").json()["rounds"]

    app2 = service.create_app(tmp_path / "run", static_dir=tmp_path / "no_ui")
    with TestClient(app2) as c2:
        assert [q["id"] for q in c2.get("/api/queue").json()] == queue_before
        rounds = c2.get("/api/metrics").json()["rounds"]
        assert [r["name"] for r in rounds] == [r["name"] for r in rounds_before]
        assert rounds[1]["report"] == rounds_before[1]["report"]
        assert rounds[1]["trained_on"] == [it["id"]]
        back = c2.get(f"/api/patch/{it['id']}/correction")
        assert back.status_code == 200
        assert (pngio.decode_mask_png(back.content) == mask).all()


def test_root_reports_service_when_ui_missing(client):
    body = client.get("/").json()
    assert "service" in body


def test_serves_built_ui_bundle(run_dir, tmp_path):
    dist = Path(service.__file__).resolve().parents[2] / "frontend" / "dist"
    if not (dist / "index.html").exists():
        pytest.skip("frontend bundle not built")
    copy = tmp_path / "run"
    shutil.copytree(run_dir, copy)
    with TestClient(service.create_app(copy, static_dir=dist)) as c:
        page = c.get("/")
        assert page.status_code == 200
        assert "text/html" in page.headers["content-type"]
        assert 'src="main.js"' in page.text
        script = c.get("/main.js")
        assert script.status_code == 200
        assert "javascript" in script.headers["content-type"]
        # API routes keep working alongside the static mount
        assert c.get("/api/queue", params={"limit": 1}).status_code == 200
