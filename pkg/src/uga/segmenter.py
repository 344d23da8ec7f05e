"""Small fully-convolutional binary segmenter with hand-written backprop.

The network is fixed: three 3x3 conv+ReLU stages (3->8->16->16 channels)
followed by a 1x1 conv to two per-pixel logits, all stride 1 with same
padding. It is deliberately tiny so that a k-fold ensemble trains on a CPU
in seconds; anything larger can be swapped in behind the same
``predict_log_probs`` / ``gradient`` surface.

Parameters are held in float32 (the on-disk format), while the forward and
backward passes take a compute dtype so the same code path can be verified
against float64 finite differences.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ioutil import atomic_write_bytes, atomic_write_text
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

# (kernel_h, kernel_w, in_channels, out_channels) per layer; ReLU after all
# but the last.
ARCHITECTURE = ((3, 3, 3, 8), (3, 3, 8, 16), (3, 3, 16, 16), (1, 1, 16, 2))
PARAM_COUNT = sum(kh * kw * ci * co + co for kh, kw, ci, co in ARCHITECTURE)
assert PARAM_COUNT == 3746

ZSCORE_EPS = 1e-6
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
MAX_DRAW_ATTEMPTS = 100


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 2
    # tumor-containing : benign draw odds; (1, 4) means 1 of every 5 batch
    # slots is a tumor-containing patch.
    tumor_sample_ratio: tuple[int, int] = (1, 4)
    steps: int = 2000
    learning_rate: float = 1e-3
    seed: int = 0
    # probability that a continued-training sample comes from the corrected
    # patches instead of the original slides
    new_data_mix: float = 0.5

    def validate(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        a, b = self.tumor_sample_ratio
        if a < 0 or b < 0 or a + b == 0:
            raise ValueError("tumor_sample_ratio must be a nonnegative pair with a positive sum")
        if not (0.0 <= self.new_data_mix <= 1.0):
            raise ValueError("new_data_mix must lie in [0, 1]")

    @property
    def tumor_fraction(self) -> float:
        a, b = self.tumor_sample_ratio
        return a / (a + b)


@dataclass
class ModelParams:
    """Weights and biases of the fixed architecture, stored float32."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        shapes = tuple(w.shape for w in self.weights)
        if shapes != ARCHITECTURE:
            raise ValueError(f"weight shapes {shapes} do not match the fixed architecture")
        for i, (b, spec) in enumerate(zip(self.biases, ARCHITECTURE)):
            if b.shape != (spec[3],):
                raise ValueError(f"bias {i} has shape {b.shape}, expected ({spec[3]},)")
        for arr in (*self.weights, *self.biases):
            if not np.isfinite(arr).all():
                raise ValueError("model parameters must be finite")

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flatten(self) -> np.ndarray:
        """Parameters in the fixed file order: W0, b0, W1, b1, ... as float32."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype=np.float32).ravel())
            parts.append(np.ascontiguousarray(b, dtype=np.float32).ravel())
        return np.concatenate(parts)

    @staticmethod
    def from_flat(flat: np.ndarray) -> "ModelParams":
        if flat.size != PARAM_COUNT:
            raise ValueError(f"expected {PARAM_COUNT} parameters, got {flat.size}")
        weights, biases, ofs = [], [], 0
        for kh, kw, ci, co in ARCHITECTURE:
            n = kh * kw * ci * co
            weights.append(flat[ofs:ofs + n].astype(np.float32).reshape(kh, kw, ci, co))
            ofs += n
            biases.append(flat[ofs:ofs + co].astype(np.float32))
            ofs += co
        return ModelParams(weights, biases)


@dataclass
class EnsembleModel:
    folds: list[ModelParams]
    train_config: TrainConfig
    round_index: int = 0
    parent_id: str | None = None
    fold_losses: list[tuple[float, float]] = field(default_factory=list)  # (first, last) per fold
    model_id: str = ""

    def __post_init__(self) -> None:
        if len(self.folds) < 2:
            raise ValueError("an ensemble needs at least 2 fold models")
        if not self.model_id:
            self.model_id = self.content_id()

    @property
    def num_folds(self) -> int:
        return len(self.folds)

    def content_id(self) -> str:
        h = hashlib.sha256()
        for fold in self.folds:
            h.update(fold.flatten().tobytes())
        h.update(json.dumps(dataclasses.asdict(self.train_config), sort_keys=True).encode())
        h.update(str(self.round_index).encode())
        return h.hexdigest()[:12]


def init_params(rng: np.random.Generator) -> ModelParams:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for kh, kw, ci, co in ARCHITECTURE:
        std = np.sqrt(2.0 / (kh * kw * ci))
        weights.append(rng.normal(0.0, std, size=(kh, kw, ci, co)).astype(np.float32))
        biases.append(np.zeros(co, dtype=np.float32))
    return ModelParams(weights, biases)


def zscore_normalize(patch: np.ndarray) -> np.ndarray:
    """Per-patch, per-channel standardization: (x - mean) / (std + eps)."""
    x = np.asarray(patch, dtype=np.float64)
    mean = x.mean(axis=(0, 1), keepdims=True)
    std = x.std(axis=(0, 1), keepdims=True)
    return ((x - mean) / (std + ZSCORE_EPS)).astype(patch.dtype if patch.dtype.kind == "f" else np.float64)


def _im2col(x: np.ndarray, kh: int) -> np.ndarray:
    """(B,H,W,Ci) -> (B*H*W, kh*kh*Ci) patch matrix for same-padding conv."""
    b, h, w, ci = x.shape
    if kh == 1:
        return x.reshape(b * h * w, ci)
    pad = kh // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (kh, kh), axis=(1, 2))  # (B,H,W,Ci,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b * h * w, kh * kh * ci)


def _conv_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Stride-1, same-padding correlation of NHWC input with (kh,kw,ci,co) weights."""
    kh, _, ci, co = w.shape
    cols = _im2col(x, kh)
    out = cols @ w.reshape(kh * kh * ci, co)
    return out.reshape(*x.shape[:3], co)


def forward_logits(params: ModelParams, batch: np.ndarray, dtype=np.float32,
                   want_cache: bool = False):
    """Forward pass. ``batch`` is (B,H,W,3), already normalized.

    Returns logits (B,H,W,2), plus per-layer (im2col matrix, pre-activation)
    caches when requested by the backward pass.
    """
    if not np.isfinite(batch).all():
        raise ValueError("non-finite values in the input batch")
    a = np.ascontiguousarray(batch, dtype=dtype)
    caches = []
    n_layers = len(ARCHITECTURE)
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        kh, _, ci, co = w.shape
        cols = _im2col(a, kh)
        z = (cols @ w.astype(dtype).reshape(kh * kh * ci, co) + b.astype(dtype))
        z = z.reshape(*a.shape[:3], co)
        if want_cache:
            caches.append((cols, z))
        a = np.maximum(z, 0) if li < n_layers - 1 else z
    return (a, caches) if want_cache else a


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Per-pixel log-softmax over the trailing class axis, in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def predict_log_probs(params: ModelParams, patch: np.ndarray, normalized: bool = True) -> np.ndarray:
    """Per-pixel class log-probabilities (P,P,2) for a single patch."""
    return predict_log_probs_batch(params, patch[None], normalized=normalized)[0]


def predict_log_probs_batch(params: ModelParams, patches: np.ndarray,
                            normalized: bool = True) -> np.ndarray:
    if not normalized:
        patches = np.stack([zscore_normalize(p) for p in patches])
    logits = forward_logits(params, patches)
    return log_softmax(logits)


def _loss_and_dlogits(logits: np.ndarray, targets: np.ndarray):
    """Mean per-pixel softmax cross-entropy and its gradient wrt the logits."""
    zmax = logits.max(axis=-1, keepdims=True)
    ez = np.exp(logits - zmax)
    se = ez.sum(axis=-1, keepdims=True)
    t = targets.astype(np.int64)
    n = t.size
    picked = np.take_along_axis(logits, t[..., None], axis=-1)[..., 0]
    lse = zmax[..., 0] + np.log(se[..., 0])
    loss = float((lse - picked).mean())
    dlogits = ez / se  # softmax probabilities
    np.put_along_axis(dlogits, t[..., None],
                      np.take_along_axis(dlogits, t[..., None], axis=-1) - 1.0, axis=-1)
    dlogits /= n
    return loss, dlogits


def loss_on_batch(params: ModelParams, patches: np.ndarray, masks: np.ndarray,
                  dtype=np.float32) -> float:
    logits = forward_logits(params, patches, dtype=dtype)
    loss, _ = _loss_and_dlogits(logits, masks)
    return loss


def gradient(params: ModelParams, patches: np.ndarray, masks: np.ndarray, dtype=np.float32):
    """Backprop of the mean per-pixel cross-entropy.

    ``patches`` is (B,P,P,3) normalized input, ``masks`` is (B,P,P) in {0,1}.
    Returns (loss, weight gradients, bias gradients) with gradients in the
    compute dtype, ordered like the parameter lists.
    """
    logits, caches = forward_logits(params, patches, dtype=dtype, want_cache=True)
    loss, d = _loss_and_dlogits(logits, masks)
    d = d.astype(dtype)
    grads_w: list[np.ndarray | None] = [None] * len(ARCHITECTURE)
    grads_b: list[np.ndarray | None] = [None] * len(ARCHITECTURE)
    n_layers = len(ARCHITECTURE)
    for li in range(n_layers - 1, -1, -1):
        cols, z = caches[li]
        dz = d if li == n_layers - 1 else d * (z > 0)
        b, h, w_dim, co = z.shape
        dz_flat = dz.reshape(b * h * w_dim, co)
        wt = params.weights[li].astype(dtype)
        kh, _, ci, _ = wt.shape
        grads_w[li] = (cols.T @ dz_flat).reshape(kh, kh, ci, co)
        grads_b[li] = dz_flat.sum(axis=0)
        if li == 0:
            continue
        if kh == 1:
            d = (dz_flat @ wt[0, 0].T).reshape(b, h, w_dim, ci)
        else:
            # Input gradient of a same-padding correlation: correlate dz with
            # the 180-degree-rotated kernel, in/out channels swapped.
            d = _conv_same(dz, wt[::-1, ::-1].transpose(0, 1, 3, 2))
    return loss, grads_w, grads_b


# ---------------------------------------------------------------------------
# Patch sampling


def _random_patch_origin(rng: np.random.Generator, h: int, w: int, p: int) -> tuple[int, int]:
    return int(rng.integers(0, h - p + 1)), int(rng.integers(0, w - p + 1))


def _draw_tumor_patch(rng, slide, p):
    flat = np.flatnonzero(slide.mask)
    if flat.size == 0:
        return None
    pick = int(flat[rng.integers(flat.size)])
    py, px = divmod(pick, slide.mask.shape[1])
    jitter = p // 4
    oy = py - p // 2 + int(rng.integers(-jitter, jitter + 1))
    ox = px - p // 2 + int(rng.integers(-jitter, jitter + 1))
    oy = min(max(oy, 0), slide.mask.shape[0] - p)
    ox = min(max(ox, 0), slide.mask.shape[1] - p)
    return oy, ox


def sample_training_batch(slides, config: TrainConfig, rng: np.random.Generator,
                          max_attempts: int = MAX_DRAW_ATTEMPTS):
    """Draw ``config.batch_size`` (patch, mask) pairs from the slides.

    Each slot is tumor-containing with probability given by the configured
    tumor:benign ratio; tumor draws center a patch on a random lesion pixel
    with jitter, benign draws look for an all-background patch. When a
    category cannot be satisfied the draw falls back to the other one and a
    warning is logged.
    """
    p = config.patch_size
    for s in slides:
        if s.mask.shape[0] < p or s.mask.shape[1] < p:
            raise ValueError(f"slide {s.id} is smaller than the patch size {p}")
    tumor_slides = [s for s in slides if s.mask.any()]
    batch = []
    for _ in range(config.batch_size):
        want_tumor = rng.random() < config.tumor_fraction
        patch = None
        if want_tumor:
            if tumor_slides:
                slide = tumor_slides[int(rng.integers(len(tumor_slides)))]
                oy, ox = _draw_tumor_patch(rng, slide, p)
                patch = (slide, oy, ox)
            else:
                log.warning("tumor patch requested but no slide contains lesion pixels; drawing benign")
        if patch is None:
            # benign draw (either requested, or tumor fallback)
            slide = None
            for _attempt in range(max_attempts):
                cand = slides[int(rng.integers(len(slides)))]
                oy, ox = _random_patch_origin(rng, *cand.mask.shape, p)
                if not cand.mask[oy:oy + p, ox:ox + p].any():
                    slide = cand
                    break
            if slide is None:
                log.warning("benign patch not found after %d attempts; falling back to tumor draw",
                            max_attempts)
                slide = tumor_slides[int(rng.integers(len(tumor_slides)))]
                oy, ox = _draw_tumor_patch(rng, slide, p)
            patch = (slide, oy, ox)
        slide, oy, ox = patch
        batch.append((slide.image[oy:oy + p, ox:ox + p],
                      slide.mask[oy:oy + p, ox:ox + p]))
    return batch


# ---------------------------------------------------------------------------
# Training


class _Adam:
    def __init__(self, params: ModelParams, lr: float):
        self.lr = lr
        self.t = 0
        self.m_w = [np.zeros_like(w) for w in params.weights]
        self.v_w = [np.zeros_like(w) for w in params.weights]
        self.m_b = [np.zeros_like(b) for b in params.biases]
        self.v_b = [np.zeros_like(b) for b in params.biases]

    def step(self, params: ModelParams, grads_w, grads_b) -> None:
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        for tgt, g, m, v in ((params.weights, grads_w, self.m_w, self.v_w),
                             (params.biases, grads_b, self.m_b, self.v_b)):
            for i in range(len(tgt)):
                gi = g[i].astype(np.float32)
                m[i] = ADAM_BETA1 * m[i] + (1 - ADAM_BETA1) * gi
                v[i] = ADAM_BETA2 * v[i] + (1 - ADAM_BETA2) * gi * gi
                tgt[i] = tgt[i] - self.lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + ADAM_EPS)


def _train_one_model(draw_batch, init: ModelParams, config: TrainConfig) -> tuple[ModelParams, tuple[float, float]]:
    """Run ``config.steps`` Adam steps; ``draw_batch(step)`` yields the raw batch."""
    params = init.copy()
    opt = _Adam(params, config.learning_rate)
    first_loss = last_loss = float("nan")
    for step in range(config.steps):
        raw = draw_batch(step)
        xs = np.stack([zscore_normalize(p.astype(np.float32)) for p, _ in raw])
        ys = np.stack([m for _, m in raw])
        loss, gw, gb = gradient(params, xs, ys)
        opt.step(params, gw, gb)
        if step == 0:
            first_loss = loss
        last_loss = loss
    return params, (first_loss, last_loss)


def partition_folds(n_slides: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded disjoint folds covering all slide indices."""
    perm = np.random.default_rng([seed, 0xF01D]).permutation(n_slides)
    return [np.sort(perm[i::k]) for i in range(k)]


def train_kfold(train_slides, config: TrainConfig, k: int = 5, jobs: int = 1) -> EnsembleModel:
    """Train the k-fold ensemble from scratch.

    Fold i is trained on the slides outside fold i, with an RNG stream
    derived from (config.seed, i) so results do not depend on execution
    order.
    """
    config.validate()
    if len(train_slides) < k:
        raise ValueError(f"need at least {k} slides for {k}-fold training, got {len(train_slides)}")
    folds_idx = partition_folds(len(train_slides), k, config.seed)

    def train_fold(i: int):
        held_out = set(folds_idx[i].tolist())
        subset = [s for j, s in enumerate(train_slides) if j not in held_out]
        init = init_params(np.random.default_rng([config.seed, i, 0xA]))
        rng = np.random.default_rng([config.seed, i, 0xB])
        return _train_one_model(lambda _s: sample_training_batch(subset, config, rng), init, config)

    results = _run_jobs(train_fold, k, jobs)
    return EnsembleModel(folds=[r[0] for r in results], train_config=config,
                         round_index=0, parent_id=None,
                         fold_losses=[r[1] for r in results])


def continue_training(baseline: EnsembleModel, old_slides, new_patches,
                      config: TrainConfig, jobs: int = 1) -> EnsembleModel:
    """Resume from the baseline weights on a mix of old slides and corrections.

    ``new_patches`` are (patch, mask) pairs, expected to be pre-augmented;
    each batch slot comes from them with probability ``config.new_data_mix``.
    """
    config.validate()
    if not new_patches:
        raise ValueError("continue_training requires at least one corrected patch")
    p = config.patch_size
    for patch, mask in new_patches:
        if patch.shape[:2] != (p, p) or mask.shape != (p, p):
            raise ValueError(f"corrected patch shape {patch.shape[:2]}/{mask.shape} "
                             f"does not match patch_size {p}")

    def train_fold(i: int):
        rng = np.random.default_rng([config.seed, i, 0xC])

        def draw(_step):
            out = []
            for _ in range(config.batch_size):
                if rng.random() < config.new_data_mix:
                    out.append(new_patches[int(rng.integers(len(new_patches)))])
                else:
                    one = dataclasses.replace(config, batch_size=1)
                    out.extend(sample_training_batch(old_slides, one, rng))
            return out

        return _train_one_model(draw, baseline.folds[i], config)

    results = _run_jobs(train_fold, baseline.num_folds, jobs)
    return EnsembleModel(folds=[r[0] for r in results], train_config=config,
                         round_index=baseline.round_index + 1, parent_id=baseline.model_id,
                         fold_losses=[r[1] for r in results])


def _run_jobs(fn, n: int, jobs: int):
    if jobs <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=min(jobs, n)) as ex:
        return list(ex.map(fn, range(n)))


# ---------------------------------------------------------------------------
# Model file format: magic "UGAM" | u32 version | u32 K | u64 params-per-fold,
# then K * params-per-fold little-endian float32 values. Within a fold the
# layer order is W0, b0, W1, b1, W2, b2, W3, b3, each flattened C-order.

MODEL_MAGIC = b"UGAM"
MODEL_VERSION = 1


def save_ensemble(path: str | Path, ensemble: EnsembleModel) -> None:
    path = Path(path)
    blob = MODEL_MAGIC + struct.pack("<IIQ", MODEL_VERSION, ensemble.num_folds, PARAM_COUNT)
    blob += b"".join(fold.flatten().astype("<f4").tobytes() for fold in ensemble.folds)
    meta = {
        "model_id": ensemble.model_id,
        "round_index": ensemble.round_index,
        "parent_id": ensemble.parent_id,
        "train_config": dataclasses.asdict(ensemble.train_config),
        "fold_losses": [[v if np.isfinite(v) else None for v in fl] for fl in ensemble.fold_losses],
        "num_folds": ensemble.num_folds,
    }
    # Sidecar first: the binary's appearance signals a complete model.
    atomic_write_text(path.with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True))
    atomic_write_bytes(path, blob)


def load_ensemble(path: str | Path) -> EnsembleModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no model file at {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, k, per_fold = struct.unpack("<IIQ", f.read(16))
        if version != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported model format version {version}")
        if per_fold != PARAM_COUNT:
            raise ValueError(f"{path}: parameter count {per_fold} does not match the architecture")
        folds = []
        for _ in range(k):
            raw = f.read(per_fold * 4)
            if len(raw) != per_fold * 4:
                raise ValueError(f"{path}: truncated model file")
            flat = np.frombuffer(raw, dtype="<f4")
            folds.append(ModelParams.from_flat(flat.astype(np.float32)))
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if "num_folds" in meta and meta["num_folds"] != k:
        raise ValueError(f"{path}: sidecar fold count {meta['num_folds']} != header {k}")
    tc = dict(meta.get("train_config", {}))
    if "tumor_sample_ratio" in tc:
        tc["tumor_sample_ratio"] = tuple(tc["tumor_sample_ratio"])
    cfg = TrainConfig(**tc)
    losses = [tuple(float("nan") if v is None else v for v in fl)
              for fl in meta.get("fold_losses", [])]
    return EnsembleModel(folds=folds, train_config=cfg,
                         round_index=meta.get("round_index", 0),
                         parent_id=meta.get("parent_id"),
                         fold_losses=losses,
                         model_id=meta.get("model_id", ""))
