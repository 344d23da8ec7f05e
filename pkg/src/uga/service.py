"""HTTP facade for the interactive review loop.

Exposes the uncertainty-ranked queue over a run directory produced by the
experiment loop (or by the staged CLI commands), serves patch images,
heatmaps and model predictions, accepts painted corrections, and retrains
in the background on demand. One session per process; one exclusive writer
lock serializes every state mutation, so readers always see a consistent
queue snapshot.
"""
from __future__ import annotations

import base64
import binascii
import dataclasses
import hashlib
import json
import logging
import threading
import time
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import evaluation, loop, pngio, sampler, segmenter, synthdata, uncertainty
from .ioutil import atomic_write_bytes

log = logging.getLogger(__name__)

RETRAIN_STATES = ("idle", "running", "failed", "done")
INTERACTIVE_PREFIX = "interactive_round"


class CorrectionBody(BaseModel):
    """Painted mask: base64 PNG (values {0,255}) or run-length encoding.

    The RLE form is a flat list of run lengths over the row-major mask,
    alternating background/foreground and starting with background.
    """
    mask_png: str | None = None
    rle: list[int] | None = None


def _png_sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _png_response(data: bytes) -> Response:
    return Response(content=data, media_type="image/png",
                    headers={"ETag": f'"{_png_sha(data)}"',
                             "Cache-Control": "no-cache"})


class ReviewSession:
    """All mutable service state plus the artifacts it is a view over."""

    def __init__(self, run_dir: str | Path, seed: int | None = None, jobs: int = 1):
        self.run_dir = Path(run_dir)
        cfg_path = self.run_dir / "config.json"
        if not cfg_path.exists():
            raise FileNotFoundError(f"{self.run_dir} has no config.json; "
                                    "run generate-data or simulate first")
        self.config = loop.load_experiment_config(cfg_path)
        self.seed = int(seed) if seed is not None else int(self.config.seeds[0])
        self.seed_dir = self.run_dir / f"seed_{self.seed}"
        self.jobs = jobs
        self.lock = threading.RLock()

        cohort_dir = self.seed_dir / "cohort"
        if not (cohort_dir / "manifest.json").exists():
            raise FileNotFoundError(f"no cohort at {cohort_dir}; run generate-data first")
        self.cohort = synthdata.load_cohort(cohort_dir)
        self.slides = {s.id: s for s in self.cohort}
        tc = self.config.cohort.train_center
        self.train_slides = [s for s in self.cohort if s.center == tc and s.split == "train"]
        self.pool = [s for s in self.cohort if s.split == "pool"]
        self.test_slides = [s for s in self.cohort if s.split == "test"]

        self.retrain_status = "idle"
        self.retrain_error: str | None = None
        self.job_id = 0
        self._worker: threading.Thread | None = None

        self.corrections: dict[str, sampler.CorrectedPatch] = {}
        self._load_persisted_corrections()
        self.round_index, self.ensemble, self.queue = self._load_latest_round()
        self.history = self._load_history()
        self._png_cache: dict[tuple, bytes] = {}

    # -- startup reconstruction ------------------------------------------------

    def _interactive_rounds(self) -> list[int]:
        pattern = f"{INTERACTIVE_PREFIX}*"
        rounds = []
        for p in (self.seed_dir / "models").glob(pattern):
            try:
                rounds.append(int(p.name.removeprefix(INTERACTIVE_PREFIX)))
            except ValueError:
                continue
        return sorted(rounds)

    def _load_persisted_corrections(self) -> None:
        corr_dir = self.seed_dir / "corrections" / "interactive"
        if not corr_dir.is_dir():
            return
        for sidecar in sorted(corr_dir.glob("*.json")):
            cp = sampler.load_correction(corr_dir, sidecar.stem)
            self.corrections[sidecar.stem] = cp

    def _load_latest_round(self):
        rounds = self._interactive_rounds()
        if rounds:
            last = rounds[-1]
            model_dir, ranking = f"{INTERACTIVE_PREFIX}{last}", f"{INTERACTIVE_PREFIX}{last}.json"
        else:
            last, model_dir, ranking = 0, "baseline", "baseline.json"
        model_path = self.seed_dir / "models" / model_dir / "model.ugam"
        ensemble = segmenter.load_ensemble(model_path) if model_path.exists() else None
        rank_path = self.seed_dir / "rankings" / ranking
        queue = self._build_queue(sampler.load_rankings(rank_path)) \
            if rank_path.exists() else None
        return last, ensemble, queue

    def _load_history(self) -> list[dict]:
        history = []
        names = ["baseline"] + [f"{INTERACTIVE_PREFIX}{r}" for r in self._interactive_rounds()]
        for i, name in enumerate(names):
            path = self.seed_dir / "metrics" / f"{name}.json"
            if not path.exists():
                continue
            entry = {"round": i, "name": name,
                     "report": json.loads(path.read_text())}
            meta_path = self.seed_dir / "models" / name / "round.json"
            if meta_path.exists():
                meta = json.loads(meta_path.read_text())
                entry["model_id"] = meta["model_id"]
                entry["trained_on"] = meta["trained_on"]
            history.append(entry)
        return history

    def _build_queue(self, ranked: dict[int, list[sampler.RankedPatch]]
                     ) -> list[sampler.RankedPatch]:
        """Flatten per-center rankings into one descending list."""
        key = self.config.ranking_key
        flat = [p for patches in ranked.values() for p in patches]
        flat.sort(key=lambda p: (-getattr(p, f"{key}_uncertainty"),
                                 p.slide_id, p.origin[1], p.origin[0]))
        for p in flat:
            if p.patch_id in self.corrections:
                p.review_status = "corrected"
        return flat

    # -- queue -----------------------------------------------------------------

    def queue_view(self, center: int | None, limit: int | None) -> list[dict]:
        with self.lock:
            if self.queue is None:
                raise HTTPException(409, "ranking not yet computed; run rank first")
            items = [p for p in self.queue if center is None or p.center == center]
            if limit is not None:
                items = items[:limit]
            return [self._item_json(p) for p in items]

    def _item_json(self, p: sampler.RankedPatch) -> dict:
        return {
            "id": p.patch_id,
            "slide_id": p.slide_id,
            "center": p.center,
            "x": p.origin[0],
            "y": p.origin[1],
            "total": p.total_uncertainty,
            "mean": p.mean_uncertainty,
            "background_fraction": p.background_fraction,
            "rank": p.rank_within_center,
            "selected_by": p.selected_by,
            "review_status": p.review_status,
            "image_url": f"/api/patch/{p.patch_id}/image",
            "heatmap_url": f"/api/patch/{p.patch_id}/heatmap",
        }

    def _find(self, patch_id: str) -> sampler.RankedPatch:
        if self.queue is None:
            raise HTTPException(409, "ranking not yet computed; run rank first")
        for p in self.queue:
            if p.patch_id == patch_id:
                return p
        raise HTTPException(404, f"unknown patch id {patch_id!r}")

    # -- patch artifacts ---------------------------------------------------------

    def _patch_pixels(self, p: sampler.RankedPatch) -> np.ndarray:
        slide = self.slides[p.slide_id]
        patch, _ = sampler.extract_patch(slide, p.origin, self.config.train_config.patch_size)
        return patch

    def _log_prob_maps(self, p: sampler.RankedPatch) -> np.ndarray:
        patch = self._patch_pixels(p)
        norm = np.stack([segmenter.zscore_normalize(patch)]).astype(np.float32)
        return np.stack([segmenter.predict_log_probs_batch(fold, norm)[0]
                         for fold in self.ensemble.folds])

    def patch_image(self, patch_id: str) -> bytes:
        with self.lock:
            p = self._find(patch_id)
            key = ("image", patch_id)
            if key not in self._png_cache:
                self._png_cache[key] = pngio.rgb_png_bytes(self._patch_pixels(p))
            return self._png_cache[key]

    def patch_heatmap(self, patch_id: str) -> bytes:
        with self.lock:
            p = self._find(patch_id)
            if self.ensemble is None:
                raise HTTPException(409, "no trained model; run train-baseline first")
            key = ("heatmap", self.ensemble.model_id, patch_id)
            if key not in self._png_cache:
                umap = uncertainty.pixel_disagreement(
                    self._log_prob_maps(p), variant=self.config.variant,
                    slide_id=p.slide_id, center=p.center, patch_origin=p.origin)
                self._png_cache[key] = uncertainty.heatmap_png_bytes(umap)
            return self._png_cache[key]

    def patch_prediction(self, patch_id: str) -> bytes:
        """Current ensemble's thresholded mask; the editor's starting layer."""
        with self.lock:
            p = self._find(patch_id)
            if self.ensemble is None:
                raise HTTPException(409, "no trained model; run train-baseline first")
            key = ("prediction", self.ensemble.model_id, patch_id)
            if key not in self._png_cache:
                maps = self._log_prob_maps(p)
                prob = np.exp(maps)[..., 1].mean(axis=0)
                self._png_cache[key] = pngio.mask_png_bytes(
                    (prob >= 0.5).astype(np.uint8))
            return self._png_cache[key]

    # -- corrections ---------------------------------------------------------

    def _decode_mask(self, body: CorrectionBody, patch_size: int
                     ) -> tuple[np.ndarray, bytes]:
        """Returns (binary mask, PNG bytes to store verbatim)."""
        if body.mask_png is not None:
            try:
                raw = base64.b64decode(body.mask_png, validate=True)
                arr = pngio.decode_mask_png(raw, strict_binary=True)
            except (binascii.Error, ValueError, OSError) as e:
                raise HTTPException(400, f"undecodable mask PNG: {e}") from e
            if arr.shape != (patch_size, patch_size):
                raise HTTPException(
                    400, f"mask dims {arr.shape} != patch dims "
                         f"({patch_size}, {patch_size})")
            return arr, raw
        if body.rle is not None:
            if any(r < 0 for r in body.rle) or sum(body.rle) != patch_size * patch_size:
                raise HTTPException(400, "run lengths must be non-negative and sum "
                                         f"to {patch_size * patch_size}")
            flat = np.zeros(patch_size * patch_size, dtype=np.uint8)
            pos, value = 0, 0
            for run in body.rle:
                flat[pos:pos + run] = value
                pos += run
                value ^= 1
            mask = flat.reshape(patch_size, patch_size)
            return mask, pngio.mask_png_bytes(mask)
        raise HTTPException(400, "body must carry mask_png or rle")

    def submit_correction(self, patch_id: str, body: CorrectionBody) -> dict:
        patch_size = self.config.train_config.patch_size
        with self.lock:
            p = self._find(patch_id)
            mask, png = self._decode_mask(body, patch_size)
            overwrite = patch_id in self.corrections
            cp = sampler.CorrectedPatch(
                patch=self._patch_pixels(p), mask=mask, slide_id=p.slide_id,
                origin=p.origin, correction_source="human")
            corr_dir = self.seed_dir / "corrections" / "interactive"
            sampler.save_correction(cp, corr_dir, patch_id)
            atomic_write_bytes(corr_dir / f"{patch_id}_mask.png", png)
            self.corrections[patch_id] = cp
            p.review_status = "corrected"
            self._audit({"patch_id": patch_id, "event": "correction",
                         "overwrite": overwrite})
            return {"id": patch_id, "review_status": "corrected",
                    "overwrite": overwrite}

    def stored_correction(self, patch_id: str) -> bytes:
        # corrected patches may already have left the queue; the file is the record
        with self.lock:
            path = self.seed_dir / "corrections" / "interactive" / f"{patch_id}_mask.png"
            if not path.exists():
                raise HTTPException(404, f"no correction stored for {patch_id!r}")
            return path.read_bytes()

    def skip(self, patch_id: str) -> dict:
        with self.lock:
            p = self._find(patch_id)
            if p.review_status == "corrected":
                raise HTTPException(409, "already corrected; cannot skip")
            p.review_status = "skipped"
            self._audit({"patch_id": patch_id, "event": "skip"})
            return {"id": patch_id, "review_status": "skipped"}

    def _audit(self, entry: dict) -> None:
        entry = {"at": time.strftime("%Y-%m-%dT%H:%M:%S"), **entry}
        path = self.seed_dir / "corrections" / "audit.log"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a") as f:
            f.write(json.dumps(entry) + "\n")

    # -- retraining ------------------------------------------------------------

    def start_retrain(self) -> dict:
        with self.lock:
            if self.retrain_status == "running":
                raise HTTPException(409, "retrain already running")
            if not self.corrections:
                raise HTTPException(409, "no corrections received yet")
            if self.ensemble is None:
                raise HTTPException(409, "no trained model; run train-baseline first")
            self.job_id += 1
            self.retrain_status = "running"
            self.retrain_error = None
            snapshot = sorted(self.corrections)
            job = self.job_id
            self._worker = threading.Thread(
                target=self._retrain, args=(job, snapshot), daemon=True)
            self._worker.start()
            return {"job_id": job, "status": "running"}

    def retrain_view(self) -> dict:
        with self.lock:
            return {"status": self.retrain_status, "job_id": self.job_id,
                    "error": self.retrain_error, "round": self.round_index,
                    "model_id": self.ensemble.model_id if self.ensemble else None}

    def _retrain(self, job: int, snapshot: list[str]) -> None:
        try:
            with self.lock:
                base = self.ensemble
                next_round = self.round_index + 1
                corrections = [self.corrections[pid] for pid in snapshot]
            cfg = self.config
            name = f"{INTERACTIVE_PREFIX}{next_round}"
            new_patches = []
            for i, cp in enumerate(corrections):
                for aug in sampler.augment(cp, n=cfg.augment_n, hue_range=cfg.hue_range,
                                           seed=[self.seed, 0xD, next_round, i]):
                    new_patches.append((aug.patch, aug.mask))
            steps = cfg.retrain_steps[-1] if isinstance(cfg.retrain_steps, tuple) \
                else cfg.retrain_steps or cfg.train_config.steps
            tc = dataclasses.replace(
                cfg.train_config, seed=loop._arm_seed(self.seed, 0xD, next_round),
                steps=steps)
            model = segmenter.continue_training(base, self.train_slides, new_patches,
                                                tc, jobs=self.jobs)
            model_dir = self.seed_dir / "models" / name
            segmenter.save_ensemble(model_dir / "model.ugam", model)
            atomic_write_bytes(model_dir / "round.json", json.dumps(
                {"name": name, "model_id": model.model_id, "trained_on": snapshot},
                indent=1).encode())

            report = evaluation.evaluate(
                model, self.test_slides, cfg.train_config.patch_size,
                bg_threshold=cfg.bg_threshold, variant=cfg.variant, jobs=self.jobs)
            metrics_dir = self.seed_dir / "metrics"
            evaluation.save_report(report, metrics_dir / f"{name}.json")
            evaluation.save_report_csv(report, metrics_dir / f"{name}_slides.csv")

            ranked = sampler.rank_pool(
                self.pool, model, cfg.train_config.patch_size,
                bg_threshold=cfg.bg_threshold, key=cfg.ranking_key,
                variant=cfg.variant, jobs=self.jobs)
            # reviewed cases leave the queue
            for center, patches in ranked.items():
                ranked[center] = [p for p in patches if p.patch_id not in snapshot]
            sampler.save_rankings(ranked, self.seed_dir / "rankings" / f"{name}.json")

            with self.lock:
                self.ensemble = model
                self.queue = self._build_queue(ranked)
                self.round_index = next_round
                self.history.append({
                    "round": len(self.history), "name": name,
                    "model_id": model.model_id, "trained_on": snapshot,
                    "report": json.loads(
                        (metrics_dir / f"{name}.json").read_text())})
                self.retrain_status = "done"
        except Exception as e:  # noqa: BLE001 - report through status endpoint
            log.exception("retrain job %d failed", job)
            with self.lock:
                self.retrain_status = "failed"
                self.retrain_error = f"{type(e).__name__}: {e}"

    def metrics_view(self) -> dict:
        with self.lock:
            return {"rounds": self.history}


def create_app(run_dir: str | Path, seed: int | None = None, jobs: int = 1,
               static_dir: str | Path | None = None) -> FastAPI:
    session = ReviewSession(run_dir, seed=seed, jobs=jobs)
    app = FastAPI(title="uncertainty review service")
    app.state.session = session

    @app.get("/api/queue")
    def queue(center: int | None = None, limit: int | None = None):
        return session.queue_view(center, limit)

    @app.get("/api/patch/{patch_id}/image")
    def image(patch_id: str):
        return _png_response(session.patch_image(patch_id))

    @app.get("/api/patch/{patch_id}/heatmap")
    def heatmap(patch_id: str):
        return _png_response(session.patch_heatmap(patch_id))

    @app.get("/api/patch/{patch_id}/prediction")
    def prediction(patch_id: str):
        return _png_response(session.patch_prediction(patch_id))

    @app.post("/api/patch/{patch_id}/correction")
    def correct(patch_id: str, body: CorrectionBody):
        return session.submit_correction(patch_id, body)

    @app.get("/api/patch/{patch_id}/correction")
    def correction(patch_id: str):
        return _png_response(session.stored_correction(patch_id))

    @app.post("/api/patch/{patch_id}/skip")
    def skip(patch_id: str):
        return session.skip(patch_id)

    @app.post("/api/retrain", status_code=202)
    def retrain():
        return session.start_retrain()

    @app.get("/api/retrain/status")
    def retrain_status():
        return session.retrain_view()

    @app.get("/api/metrics")
    def metrics():
        return session.metrics_view()

    static = Path(static_dir) if static_dir else Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if static.is_dir():
        app.mount("/", StaticFiles(directory=static, html=True), name="ui")
    else:
        @app.get("/")
        def root():
            return {"service": "uncertainty review", "ui": "not built",
                    "endpoints": "/api/queue /api/patch/{id}/image|heatmap|prediction"}

    return app
