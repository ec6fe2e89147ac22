"""Training coordinator: autoencoder pretraining, the diffusion loop with
checkpoint/resume, and held-out evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import AdamW, clip_grad_norm, no_grad
from .boundary import BoundarySample, assemble_condition_tensor
from .checkpoint import Checkpoint, load_checkpoint, restore_rng, rng_state, save_checkpoint
from .config import RunConfig, SampleConfig, build_config
from .dataset import load_dataset
from .diffusion import (
    LOSS_TERMS,
    FieldGenModel,
    LossContext,
    NoiseSchedule,
    PerceptualPyramid,
    build_schedule,
    sample,
    total_loss,
)
from .dit import DiffusionTransformer
from .errors import ConfigError, NumericError
from .metrics import MetricReport, evaluate_pair
from .prior import BlendSchedule, PriorEncoder
from .vae import VAE, pretrain_vae

METRICS_HEADER = ("epoch", "step", *LOSS_TERMS, "total", "alpha")
Log = Callable[[str], None]


def build_model(cfg: RunConfig) -> FieldGenModel:
    """Fresh parameters, drawn in a fixed order from ``cfg.model.seed``."""
    rng = np.random.default_rng(cfg.model.seed)
    h, w = cfg.dataset.height, cfg.dataset.width
    if h != w:
        raise ConfigError("the transformer grid needs square images")
    vae = VAE(cfg.model.vae, rng)
    prior = PriorEncoder(cfg.model.vae, rng)
    dit = DiffusionTransformer(cfg.model.dit, cfg.model.vae.latent_channels, h // 8, h, rng)
    return FieldGenModel(vae, prior, dit)


def stack_samples(samples: list[BoundarySample]) -> tuple[np.ndarray, np.ndarray]:
    """Condition tensors (N x 9 x H x W) and targets (N x 3 x H x W)."""
    if not samples:
        raise ConfigError("no samples in the requested split")
    cond = np.stack([assemble_condition_tensor(s) for s in samples])
    target = np.stack([s.target for s in samples])
    return cond, target


def latent_means(model: FieldGenModel, images: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(model.vae.encode(images[i : i + batch])[0].data)
    return np.concatenate(out)


def fit_latent_scale(model: FieldGenModel, images: np.ndarray) -> float:
    """1 / std of the autoencoder means, so diffusion latents have unit scale."""
    std = float(latent_means(model, images).std())
    return 1.0 / std if std > 1e-8 else 1.0


def trainable_parameters(model: FieldGenModel) -> list:
    return model.prior.parameters() + model.dit.parameters()


def make_optimizer(model: FieldGenModel, cfg: RunConfig) -> AdamW:
    return AdamW(trainable_parameters(model), lr=cfg.train.lr, weight_decay=cfg.train.weight_decay)


def make_checkpoint(
    model: FieldGenModel, opt: AdamW, cfg: RunConfig, epoch: int, rng: np.random.Generator, phase: str
) -> Checkpoint:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"optim/{k}": v for k, v in opt.state_arrays().items()})
    meta = {
        "format": "fieldgen-checkpoint",
        "epoch": int(epoch),
        "phase": phase,
        "config_digest": cfg.digest(),
        "config": cfg.model_dump(mode="json"),
        "latent_scale": model.latent_scale,
        "rng": rng_state(rng),
        "optimizer": opt.state_meta(),
    }
    return Checkpoint(meta, tensors)


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[FieldGenModel, RunConfig]:
    cfg = build_config(ckpt.meta["config"])
    model = build_model(cfg)
    model.load_state_dict(ckpt.group("model"))
    model.latent_scale = float(ckpt.meta["latent_scale"])
    model.vae.freeze()
    return model, cfg


def checkpoint_name(epoch: int) -> str:
    return f"ckpt_epoch{epoch:04d}.fgc"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


class MetricsLog:
    """Append-only loss CSV; on resume, rows at or after the resume epoch are dropped."""

    def __init__(self, path: Path, start_epoch: int):
        self.path = path
        rows = []
        if start_epoch > 0 and path.exists():
            with open(path, newline="") as f:
                reader = csv.reader(f)
                header = next(reader, None)
                if header and tuple(header) == METRICS_HEADER:
                    rows = [r for r in reader if int(r[0]) < start_epoch]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            w.writerows(rows)

    def append(self, epoch: int, step: int, breakdown: dict) -> None:
        with open(self.path, "a", newline="") as f:
            row = [epoch, step] + [_fmt(breakdown[k]) for k in METRICS_HEADER[2:]]
            csv.writer(f, lineterminator="\n").writerow(row)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class TrainResult:
    model: FieldGenModel
    final_checkpoint: Path
    epoch0_checkpoint: Path | None
    vae_history: list[float]


def _loss_context(cfg: RunConfig) -> tuple[NoiseSchedule, LossContext]:
    sched = build_schedule(cfg.train.timesteps)
    ctx = LossContext(
        sched=sched,
        weights=cfg.train.loss_weights,
        blend=BlendSchedule(cfg.train.blend_horizon),
        perceptual=PerceptualPyramid(),
        cfg_dropout=cfg.train.cfg_dropout,
        x0_clip=cfg.train.x0_clip,
    )
    return sched, ctx


def train(
    cfg: RunConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
    log: Log = lambda s: None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train on the ``train`` split of ``data_dir``; write checkpoints and logs to ``out_dir``.

    ``stop_after`` ends the run after that many completed epochs (used to
    produce an interrupted run for resume checks).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest, samples = load_dataset(data_dir, "train")
    if (manifest.height, manifest.width) != (cfg.dataset.height, cfg.dataset.width):
        raise ConfigError(
            f"dataset is {manifest.height}x{manifest.width}, config expects "
            f"{cfg.dataset.height}x{cfg.dataset.width}"
        )
    cond, target = stack_samples(samples)
    tc = cfg.train
    epoch0 = None
    vae_history: list[float] = []

    if resume is not None:
        ckpt = load_checkpoint(resume, expected_digest=cfg.digest())
        model, _ = model_from_checkpoint(ckpt)
        opt = make_optimizer(model, cfg)
        opt.load_state(ckpt.meta["optimizer"], ckpt.group("optim"))
        rng = restore_rng(ckpt.meta["rng"])
        start = ckpt.epoch
        log(f"resumed from {resume} at epoch {start}")
    else:
        model = build_model(cfg)
        rng = np.random.default_rng(tc.seed)
        if tc.vae_epochs:
            log(f"pretraining autoencoder for {tc.vae_epochs} epochs on {len(target)} fields")
            vae_history = pretrain_vae(
                model.vae, target, tc.vae_epochs, tc.vae_lr, tc.vae_batch_size, tc.vae_kl_weight, rng
            )
            log(f"autoencoder L1 {vae_history[0]:.4f} -> {vae_history[-1]:.4f}")
        model.vae.freeze()
        model.latent_scale = fit_latent_scale(model, target)
        opt = make_optimizer(model, cfg)
        start = 0
        epoch0 = out / checkpoint_name(0)
        save_checkpoint(make_checkpoint(model, opt, cfg, 0, rng, "diffusion"), epoch0)

    (out / "run_info.json").write_text(
        json.dumps(
            {
                "config": cfg.model_dump(mode="json"),
                "config_digest": cfg.digest(),
                "loss_weights": cfg.train.loss_weights.model_dump(),
                "latent_scale": model.latent_scale,
                "n_train": len(target),
                "trainable_parameters": sum(p.size for p in trainable_parameters(model)),
            },
            indent=2,
            sort_keys=True,
        )
    )

    sched, ctx = _loss_context(cfg)
    z_true = latent_means(model, target) * np.float32(model.latent_scale)
    metrics = MetricsLog(out / "metrics.csv", start)
    params = trainable_parameters(model)
    n = len(target)
    end = tc.epochs if stop_after is None else min(tc.epochs, stop_after)
    last = out / checkpoint_name(start)
    for epoch in range(start, end):
        order = rng.permutation(n)
        for step, s in enumerate(range(0, n, tc.batch_size)):
            idx = order[s : s + tc.batch_size]
            batch = {"cond": cond[idx], "target": target[idx], "z_true": z_true[idx]}
            try:
                loss, breakdown = total_loss(batch, model, ctx, epoch, rng)
                opt.zero_grad()
                loss.backward()
                clip_grad_norm(params, tc.grad_clip)
                opt.step()
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from exc
            metrics.append(epoch, step, breakdown)
        log(f"epoch {epoch}: total {breakdown['total']:.4f} alpha {breakdown['alpha']:.3f}")
        done = epoch + 1
        if done % tc.checkpoint_every == 0 or done == end:
            last = out / checkpoint_name(done)
            save_checkpoint(make_checkpoint(model, opt, cfg, done, rng, "diffusion"), last)
        if tc.eval_every and done % tc.eval_every == 0:
            _, held = load_dataset(data_dir, "heldout")
            rep = evaluate(model, held[: tc.n_eval], cfg.sample, sched, tc.eval_batch_size)
            with open(out / "eval_log.csv", "a") as f:
                f.write(f"{done},{rep.mean('ssim')!r},{rep.mean('mse')!r}\n")
    return TrainResult(model, last, epoch0, vae_history)


def evaluate(
    model: FieldGenModel,
    samples: list[BoundarySample],
    sample_cfg: SampleConfig,
    sched: NoiseSchedule,
    batch_size: int = 8,
    ground_truth: bool = False,
) -> MetricReport:
    """Sample every case and score it against its target.

    Each case starts from its own noise stream seeded by (sampler seed, case
    seed), so results do not depend on batching. ``ground_truth=True`` scores
    the targets against themselves.
    """
    rows = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        if ground_truth:
            gens = [s.target for s in chunk]
        else:
            cond, _ = stack_samples(chunk)
            lat = (model.dit.latent_channels, cond.shape[2] // 8, cond.shape[3] // 8)
            noise = np.stack(
                [np.random.default_rng([sample_cfg.seed, s.seed]).standard_normal(lat) for s in chunk]
            )
            gens = sample(cond, sample_cfg, model, sched, noise)
        for s, g in zip(chunk, gens):
            row = evaluate_pair(np.clip(g, 0.0, 1.0), s.target, s.sketch)
            row["sample"] = s.seed
            rows.append(row)
    return MetricReport(rows)
