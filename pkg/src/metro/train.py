"""Optimisation loop, evaluation, test-time augmentation and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, ValidationError
from .losses import LossBreakdown, total_loss
from .metrics import MetricReport, average_attention, evaluate_predictions, procrustes_align
from .model import EncoderConfig, Metro, save_checkpoint
from .synth import (IDENTITY_AUG, Dataset, OracleFeatures, TrainingSample, augment_points, get_preset,
                    project_points, rasterize)

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "lr", "loss_total", "l_v", "l_j", "l_j_reg", "l_j_proj",
               "mpjpe", "pa_mpjpe", "mpve", "f@5", "f@15"]


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr_initial: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_epoch: int | None = None
    mvm_max_fraction: float = 0.3
    seed: int = 0
    eval_every: int = 1
    grad_clip: float | None = 1.0
    augment: bool = False
    coarse_vertex_loss: bool = False
    stop_mpjpe_ratio: float | None = None
    time_limit: float | None = None  # seconds; checked after each epoch

    def __post_init__(self):
        if self.lr_decay_epoch is None:
            self.lr_decay_epoch = max(1, self.epochs // 2)

    def validate(self) -> None:
        if self.lr_initial < 0:
            raise ConfigError("lr_initial must be nonnegative")
        if self.lr_decay_factor <= 0:
            raise ConfigError("lr_decay_factor must be positive")
        if not 0.0 <= self.mvm_max_fraction <= 1.0:
            raise ConfigError("mvm_max_fraction must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 0 required")


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: ``lr_initial`` before ``lr_decay_epoch`` (1-based), divided once from then on."""
    if epoch >= cfg.lr_decay_epoch:
        return cfg.lr_initial / cfg.lr_decay_factor
    return cfg.lr_initial


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0
        self._bufs: dict = {}

    def step(self, lr: float) -> None:
        """One bias-corrected update from each parameter's ``.grad`` (missing grads count as zero)."""
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            m, v = self.m[name], self.v[name]
            g = p.grad
            buf = self._scratch(p.data)
            m *= b1
            v *= b2
            if g is not None:
                np.multiply(g, 1.0 - b1, out=buf)
                m += buf
                np.multiply(g, g, out=buf)
                buf *= 1.0 - b2
                v += buf
            # p -= lr * (m / c1) / (sqrt(v / c2) + eps)
            np.divide(v, c2, out=buf)
            np.sqrt(buf, out=buf)
            buf += self.eps
            np.divide(m, buf, out=buf)
            buf *= lr / c1
            p.data -= buf

    def _scratch(self, like: np.ndarray) -> np.ndarray:
        buf = self._bufs.get(like.dtype)
        if buf is None or buf.size < like.size:
            buf = self._bufs[like.dtype] = np.empty(max(p.size for p in self.params.values()), like.dtype)
        return buf[:like.size].reshape(like.shape)


def clip_grad_norm(params: dict[str, ad.Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm and norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(f)
    return norm


# --------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    feature: np.ndarray
    images: np.ndarray | None
    vertices: np.ndarray
    joints: np.ndarray
    joints2d: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


class Featurizer:
    """Recomputes inputs for augmented views of stored samples."""

    def __init__(self, dataset_meta: dict):
        self.mode = dataset_meta["feature_mode"]
        self.body = get_preset(dataset_meta["preset"])
        self.side = dataset_meta.get("image_side", 0)
        self.oracle = OracleFeatures(dataset_meta["K"], dataset_meta["H"]) if self.mode == "oracle_mlp" else None

    def view(self, sample: TrainingSample, aug) -> tuple[np.ndarray, np.ndarray | None, np.ndarray, np.ndarray]:
        """(feature, image, vertices, joints) of ``sample`` seen under ``aug``."""
        aug = np.asarray(aug, dtype=np.float64)
        if np.array_equal(aug, IDENTITY_AUG):
            return sample.feature, sample.image, sample.vertices, sample.joints
        verts = augment_points(sample.vertices, aug)
        joints = augment_points(sample.joints, aug)
        if self.oracle is not None:
            return self.oracle(sample.pose, sample.camera, aug), None, verts, joints
        return sample.feature, rasterize(verts, sample.camera, self.side), verts, joints


def make_batch(dataset: Dataset, idx, rng: np.random.Generator | None = None,
               featurizer: Featurizer | None = None) -> Batch:
    """Stack samples ``idx``; with ``rng`` and ``featurizer`` each gets a random yaw and scale jitter."""
    recs = dataset.records[np.asarray(idx)]
    f = recs["feature"].astype(np.float64)
    img = recs["image"].astype(np.float64) if dataset.has_images else None
    V = recs["vertices"].astype(np.float64)
    J = recs["joints"].astype(np.float64)
    J2 = recs["joints2d"].astype(np.float64)
    if rng is not None and featurizer is not None:
        for b, i in enumerate(idx):
            aug = np.array([rng.uniform(-np.pi / 6, np.pi / 6), 0.0, rng.uniform(0.9, 1.1)])
            feat, im, V[b], J[b] = featurizer.view(dataset[i], aug)
            f[b] = feat
            if img is not None:
                img[b] = im
            J2[b] = project_points(J[b], recs["camera"][b].astype(np.float64))
    return Batch(f, img, V, J, J2, recs["alpha"].astype(np.float64), recs["beta"].astype(np.float64))


def _features(model: Metro, batch: Batch) -> ad.Tensor:
    return model.features(batch.feature, batch.images)


def _coarse_gt(model: Metro, batch: Batch, coarse_indices) -> np.ndarray | None:
    if coarse_indices is None:
        return None
    return batch.vertices[:, coarse_indices]


def train_step(model: Metro, batch: Batch, opt: Adam, lr: float, rng: np.random.Generator,
               cfg: TrainConfig, coarse_indices=None) -> LossBreakdown:
    model.zero_grad()
    out = model.forward(_features(model, batch), rng=rng, mvm_max_fraction=cfg.mvm_max_fraction)
    lb = total_loss(out, batch.vertices, batch.joints, batch.joints2d, model.regressor,
                    batch.alpha, batch.beta, _coarse_gt(model, batch, coarse_indices))
    if not math.isfinite(lb.total):
        raise NumericError(f"loss became non-finite ({lb.total})")
    lb.tensor.backward()
    if cfg.grad_clip:
        clip_grad_norm(model.params, cfg.grad_clip)
    opt.step(lr)
    return lb


# --------------------------------------------------------------------------
# inference and evaluation


def predict(model: Metro, dataset: Dataset, batch_size: int = 16, indices=None,
            retain_attention: bool | str = False) -> dict:
    """Forward every sample with masking off. Returns stacked float64 arrays.

    With ``retain_attention`` the result also holds ``attention_last``, the
    final-layer map averaged over samples and heads.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    outs = {"joints": [], "coarse": [], "full": [], "camera": []}
    last_maps = []
    with ad.no_grad():
        for s in range(0, len(idx), batch_size):
            batch = make_batch(dataset, idx[s:s + batch_size])
            out = model.forward(_features(model, batch), retain_attention="last" if retain_attention else False)
            outs["joints"].append(out.joints3d.data.astype(np.float64))
            outs["coarse"].append(out.coarse_vertices3d.data.astype(np.float64))
            outs["full"].append(out.full_vertices3d.data.astype(np.float64))
            outs["camera"].append(out.camera.data.astype(np.float64))
            if retain_attention:
                last_maps.append(out.attention[-1])
    res = {k: np.concatenate(v) for k, v in outs.items()}
    if retain_attention:
        res["attention_last"] = average_attention(last_maps)
    return res


def evaluate(model: Metro, dataset: Dataset, batch_size: int = 16, thresholds=(5.0, 15.0)) -> MetricReport:
    """Metrics over ``dataset`` with masking off; never touches parameters."""
    p = predict(model, dataset, batch_size)
    if not (np.isfinite(p["joints"]).all() and np.isfinite(p["full"]).all()):
        raise NumericError("non-finite model output during evaluation")
    return evaluate_predictions(p["joints"], dataset.records["joints"], p["full"], dataset.records["vertices"],
                                model.regressor, root=0, thresholds=thresholds)


def _mean_losses(model: Metro, dataset: Dataset, batch_size: int, coarse_indices=None) -> dict:
    totals = dict.fromkeys(LOG_COLUMNS[2:7], 0.0)
    with ad.no_grad():
        for s in range(0, len(dataset), batch_size):
            batch = make_batch(dataset, np.arange(s, min(s + batch_size, len(dataset))))
            out = model.forward(_features(model, batch))
            lb = total_loss(out, batch.vertices, batch.joints, batch.joints2d, model.regressor,
                            batch.alpha, batch.beta, _coarse_gt(model, batch, coarse_indices))
            for k, v in lb.as_dict().items():
                totals[k] += v * len(batch.alpha)
    return {k: v / len(dataset) for k, v in totals.items()}


@dataclass
class TrainResult:
    history: list[dict]
    initial_report: MetricReport | None
    final_report: MetricReport | None
    epochs_run: int
    stopped_early: bool = False
    checkpoint: str | None = None
    seconds: float = 0.0


def _write_log(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(model: Metro, dataset: Dataset, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          eval_dataset: Dataset | None = None, coarse_indices=None) -> TrainResult:
    """Train with Adam, step LR decay, masked vertex modeling and mix-training flags.

    Row ``epoch=0`` of the history evaluates the untrained model. Rows
    ``1..epochs`` hold the mean training loss terms of that epoch and, every
    ``eval_every`` epochs, the metrics on ``eval_dataset`` (default: the
    training set). With ``out_dir`` a log CSV and ``last_good.ckpt`` are
    written after every epoch, and ``model.ckpt`` at the end.
    ``coarse_indices`` switches on the coarse-mesh auxiliary term.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValidationError("training set is empty")
    t0 = time.perf_counter()
    eval_ds = eval_dataset or dataset
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params)
    featurizer = Featurizer(dataset.meta) if cfg.augment else None
    if cfg.coarse_vertex_loss and coarse_indices is None:
        raise ConfigError("coarse_vertex_loss needs the coarse vertex indices")
    coarse_indices = coarse_indices if cfg.coarse_vertex_loss else None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        ckpt_path = os.path.join(out_dir, "last_good.ckpt")

    history: list[dict] = []
    stopped = False
    epoch = 0
    try:
        initial = evaluate(model, eval_ds, cfg.batch_size)
        row = {"epoch": 0, "lr": lr_at(cfg, 1),
               **_mean_losses(model, dataset, cfg.batch_size, coarse_indices), **_report_cols(initial)}
        history.append(row)
        report = initial
        for epoch in range(1, cfg.epochs + 1):
            lr = lr_at(cfg, epoch)
            perm = rng.permutation(len(dataset))
            sums = dict.fromkeys(LOG_COLUMNS[2:7], 0.0)
            for s in range(0, len(perm), cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                batch = make_batch(dataset, idx, rng if featurizer else None, featurizer)
                lb = train_step(model, batch, opt, lr, rng, cfg, coarse_indices)
                for k, v in lb.as_dict().items():
                    sums[k] += v * len(idx)
            row = {"epoch": epoch, "lr": lr, **{k: v / len(dataset) for k, v in sums.items()}}
            if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                report = evaluate(model, eval_ds, cfg.batch_size)
                row.update(_report_cols(report))
            history.append(row)
            log.info("epoch %d lr %.3g loss %.5f mpjpe %s", epoch, lr, row["loss_total"], row.get("mpjpe"))
            if out_dir is not None:
                _write_log(log_path, history)
                save_checkpoint(ckpt_path, model, {"epoch": epoch})
            if (cfg.stop_mpjpe_ratio is not None and "mpjpe" in row
                    and row["mpjpe"] < cfg.stop_mpjpe_ratio * initial.mpjpe):
                stopped = True
                break
            if cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit:
                break
    except NumericError:
        if out_dir is not None:
            _write_log(log_path, history)
        raise
    final_ckpt = None
    if out_dir is not None:
        final_ckpt = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(final_ckpt, model, {"epoch": epoch})
        if not os.path.exists(log_path):
            _write_log(log_path, history)
    return TrainResult(history, initial, report, epoch, stopped, final_ckpt, time.perf_counter() - t0)


def _report_cols(rep: MetricReport) -> dict:
    d = {"mpjpe": rep.mpjpe, "pa_mpjpe": rep.pa_mpjpe, "mpve": rep.mpve}
    for t in (5.0, 15.0):
        if t in rep.f_scores:
            d[f"f@{t:g}"] = rep.f_scores[t]
    return d


# --------------------------------------------------------------------------
# test-time augmentation


def average_aligned(meshes) -> np.ndarray:
    """Align every mesh to the first by Procrustes, then average vertex-wise."""
    meshes = [np.asarray(m, dtype=np.float64) for m in meshes]
    if not meshes:
        raise ValidationError("no meshes to average")
    ref = meshes[0]
    # mean of offsets from the reference, so equal meshes average to themselves exactly
    acc = np.zeros_like(ref)
    for m in meshes[1:]:
        acc += (m if np.array_equal(m, ref) else procrustes_align(m, ref)[3]) - ref
    return ref + acc / len(meshes)


DEFAULT_TTA = [(0.0, 0.0, 1.0), (0.0, 0.15, 1.0), (0.0, -0.15, 1.0), (0.0, 0.0, 0.9), (0.0, 0.0, 1.1)]


def tta_infer(model: Metro, sample: TrainingSample, transforms, featurizer: Featurizer) -> np.ndarray:
    """Full mesh averaged over transformed views of one input.

    Each transform ``(yaw, roll, scale)`` acts on the input before feature
    extraction; outputs are Procrustes-aligned to the first view's mesh.
    """
    transforms = list(transforms)
    if not transforms:
        raise ValidationError("tta_infer needs at least one transform")
    meshes = []
    with ad.no_grad():
        for aug in transforms:
            feat, img, _, _ = featurizer.view(sample, aug)
            X = model.features(np.asarray(feat)[None], None if img is None else np.asarray(img)[None])
            out = model.forward(X)
            meshes.append(out.full_vertices3d.data[0].astype(np.float64))
    return average_aligned(meshes)


def infer(model: Metro, sample: TrainingSample):
    """Plain single-sample inference: the ModelOutput with masking off."""
    with ad.no_grad():
        feat = np.asarray(sample.feature)[None]
        img = None if sample.image is None else np.asarray(sample.image)[None]
        return model.forward(model.features(feat, img))


# --------------------------------------------------------------------------
# ablations


def model_for_dataset(dataset: Dataset, enc_cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> Metro:
    body = get_preset(dataset.preset)
    return Metro.from_template(enc_cfg, body.mesh, body.regressor, seed=seed, dtype=dtype)


def _write_rows(path, rows):
    if path is None or not rows:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def ablate_mvm(model_factory, dataset: Dataset, cfg: TrainConfig, caps=(0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
               eval_dataset: Dataset | None = None, path=None) -> list[dict]:
    """Train one model per masking cap (shared seed) and report its metrics."""
    rows = []
    for cap in caps:
        run = TrainConfig(**{**asdict(cfg), "mvm_max_fraction": cap, "eval_every": 0, "stop_mpjpe_ratio": None})
        model = model_factory(cfg.seed)
        train(model, dataset, run)
        rep = evaluate(model, eval_dataset or dataset, cfg.batch_size)
        rows.append({"max_mask_fraction": cap, **rep.as_dict()})
    _write_rows(path, rows)
    return rows


def dim_scheme_configs(feature_dim: int, total_layers: int = 12, heads: int = 4, stages=(0, 1, 2, 3),
                       **kw) -> list[EncoderConfig]:
    """Encoder configs for width schedules with 0..3 halvings; raises ConfigError up front."""
    return [EncoderConfig.scheme(feature_dim, n, total_layers=total_layers, heads=heads, **kw) for n in stages]


def ablate_dim_schemes(dataset: Dataset, cfg: TrainConfig, feature_dim: int | None = None,
                       total_layers: int = 12, heads: int = 4, eval_dataset: Dataset | None = None,
                       path=None, stages=(0, 1, 2, 3), **enc_kw) -> list[dict]:
    """Compare width schedules with 0..3 halvings, all with ``total_layers`` layers."""
    H = feature_dim or dataset.feature_dim
    configs = dim_scheme_configs(H, total_layers, heads, stages, mvm_max_fraction=cfg.mvm_max_fraction, **enc_kw)
    rows = []
    for enc in configs:
        model = model_for_dataset(dataset, enc, seed=cfg.seed)
        run = TrainConfig(**{**asdict(cfg), "eval_every": 0, "stop_mpjpe_ratio": None})
        train(model, dataset, run)
        rep = evaluate(model, eval_dataset or dataset, cfg.batch_size)
        rows.append({"scheme": enc.describe(), "widths": "-".join(map(str, enc.widths)),
                     "layers": enc.total_layers, **rep.as_dict()})
    _write_rows(path, rows)
    return rows


def save_config(path, **sections) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sections, fh, indent=2, sort_keys=True, default=_jsonable)


def _jsonable(o):
    if hasattr(o, "to_dict"):
        return o.to_dict()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o)}")
