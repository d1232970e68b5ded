"""Classifier training, purifier pretraining and adversarial fine-tuning of the
purifier with a frozen classifier."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .attacks import AttackConfig, cross_entropy, run_attack
from .data import LabeledDataset, SeededRng, as_rng, batches
from .models import (Classifier, Discriminator, Pipeline, Purifier, parameter_checksum,
                     purify_details, save_checkpoint)
from .transforms import TransformConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    schedule: str = "constant"

    def build(self, params, epochs: int = 1):
        params = list(params)
        if self.method == "sgd":
            opt = torch.optim.SGD(params, lr=self.lr, momentum=self.momentum)
        elif self.method == "adam":
            opt = torch.optim.Adam(params, lr=self.lr, betas=(0.5, 0.999))
        else:
            raise TrainingError(f"unknown optimizer {self.method!r}")
        if self.schedule == "constant":
            sched = None
        elif self.schedule == "cosine":
            sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs, 1))
        else:
            raise TrainingError(f"unknown schedule {self.schedule!r}")
        return opt, sched


@dataclass(frozen=True)
class PretrainConfig:
    variant: str = "gan"
    transform: TransformConfig = field(default_factory=TransformConfig)
    epochs: int = 10
    batch_size: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    d_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-4))
    d_clip: float = 0.0
    width: int = 32
    residual: bool = False


@dataclass(frozen=True)
class AtopConfig:
    lam: float = 0.1
    epochs: int = 5
    attack_for_ft: AttackConfig = field(
        default_factory=lambda: AttackConfig(kind="FGSM", eps=8 / 255, steps=1, bpda=True, eot_k=1))
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-4))
    d_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=1e-4))
    purifier_variant: str = "gan"
    transform: TransformConfig = field(default_factory=TransformConfig)
    train_with: str = "adversarial"
    attack_mode: str = "per_batch"
    freeze_discriminator: bool = False
    d_clip: float = 0.0
    batch_size: int = 64

    def __post_init__(self):
        if self.lam < 0:
            raise TrainingError("lambda must be >= 0")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.train_with not in ("adversarial", "clean"):
            raise TrainingError("train_with must be 'adversarial' or 'clean'")
        if self.attack_mode not in ("per_batch", "precomputed"):
            raise TrainingError("attack_mode must be 'per_batch' or 'precomputed'")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    l_org: torch.Tensor
    l_cls: torch.Tensor
    real: torch.Tensor | None = None
    fake: torch.Tensor | None = None
    l1: torch.Tensor | None = None
    x_hat: torch.Tensor | None = None
    logits: torch.Tensor | None = None

    def as_row(self) -> dict:
        row = {"total": self.total, "l_org": self.l_org, "l_cls": self.l_cls,
               "real": self.real, "fake": self.fake, "l1": self.l1}
        return {k: (float(v.detach()) if v is not None else "") for k, v in row.items()}


# ---------------------------------------------------------------------------
# losses


def loss_df(x_in: torch.Tensor, purified: torch.Tensor, D) -> dict:
    """E[D(x_in)] - E[D(purified)] + E[||x_in - purified||_1], parts returned separately.

    The l1 term sums over each image and averages over the batch.
    """
    if x_in.shape != purified.shape:
        raise TrainingError(f"shape mismatch {tuple(x_in.shape)} vs {tuple(purified.shape)}")
    real = D(x_in).mean()
    fake = -D(purified).mean()
    l1 = (x_in - purified).abs().flatten(1).sum(1).mean()
    return {"real": real, "fake": fake, "l1": l1, "total": real + fake + l1}


def loss_mae(x: torch.Tensor, reconstruction: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over missing pixels only."""
    if x.shape != reconstruction.shape:
        raise TrainingError("shape mismatch between image and reconstruction")
    missing = (1 - mask).expand_as(x)
    denom = missing.sum()
    if denom == 0:
        raise TrainingError("mask has no missing pixels")
    return (missing * (x - reconstruction) ** 2).sum() / denom


def frozen_forward(f: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Run ``f`` with detached parameters so no gradient can reach them."""
    params = {n: p.detach() for n, p in f.named_parameters()}
    params.update(dict(f.named_buffers()))
    return functional_call(f, params, (x,))


def loss_atop(x_prime, y, t_cfg: TransformConfig, g: Purifier, D, f: nn.Module | None,
              lam: float, rng: SeededRng, variant: str | None = None) -> LossBreakdown:
    """L_org(x', g) + lam * CE(y, f(purify(x'))) with f frozen."""
    if lam < 0:
        raise TrainingError("lambda must be >= 0")
    variant = variant or getattr(g, "variant", "gan")
    res = purify_details(x_prime, t_cfg, g, as_rng(rng))
    parts = {}
    if variant == "gan":
        parts = loss_df(x_prime, res.x_hat, D)
        l_org = parts["total"]
    else:
        l_org = sum(loss_mae(x_prime, xg, m) for xg, m in zip(res.purified, res.transformed.masks))
        l_org = l_org / len(res.purified)
    logits = None
    if f is not None:
        logits = frozen_forward(f, res.x_hat)
        l_cls = cross_entropy(logits, y)
    else:
        l_cls = torch.zeros((), dtype=x_prime.dtype)
    # the weighted sum is accumulated in float64 so the logged parts add up exactly
    total = l_org.double() + lam * l_cls.double() if f is not None else l_org
    return LossBreakdown(total, l_org, l_cls, parts.get("real"), parts.get("fake"), parts.get("l1"),
                         res.x_hat, logits)


# ---------------------------------------------------------------------------
# classifier


def train_classifier(train: LabeledDataset, rng, epochs: int = 10, batch_size: int = 128,
                     optimizer: OptimizerConfig = OptimizerConfig(lr=2e-3, schedule="cosine"),
                     width: int = 32, log_every: int = 0) -> Classifier:
    """Standard (non-adversarial) training on clean images."""
    rng = as_rng(rng)
    torch.manual_seed(rng.spawn("init").seed)
    c, h, _ = train.image_shape
    mean = train.images.mean(dim=(0, 2, 3)).tolist()
    std = train.images.std(dim=(0, 2, 3)).clamp_min(1e-3).tolist()
    model = Classifier(train.num_classes, c, h, width, mean, std)
    opt, sched = optimizer.build(model.parameters(), epochs)
    for epoch in range(epochs):
        model.train()
        total, correct, seen = 0.0, 0, 0
        for batch in batches(train, batch_size, rng, shuffle=True):
            logits = model(batch.x)
            loss = F.cross_entropy(logits, batch.y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch.y)
            correct += int((logits.argmax(1) == batch.y).sum())
            seen += len(batch.y)
        if sched:
            sched.step()
        if log_every and (epoch + 1) % log_every == 0:
            log.info("classifier epoch %d loss %.4f acc %.3f", epoch + 1, total / seen, correct / seen)
    model.hyperparams = {"epochs": epochs, "batch_size": batch_size, "optimizer": asdict(optimizer)}
    model.seed = rng.seed
    return model.eval()


# ---------------------------------------------------------------------------
# purifier training


def _clip_(module: nn.Module, c: float):
    if c > 0:
        with torch.no_grad():
            for p in module.parameters():
                p.clamp_(-c, c)


def _check_finite(br: LossBreakdown, step: int):
    if not torch.isfinite(br.total):
        raise TrainingError(f"non-finite loss at step {step}: {br.as_row()}")


def _purifier_step(x_in, y, g, D, f, lam, t_cfg, variant, opt_g, opt_d, rng, d_clip, update_d, step):
    g.train()
    if D is not None:
        D.train(update_d)
    br = loss_atop(x_in, y, t_cfg, g, D, f, lam, rng, variant)
    _check_finite(br, step)
    opt_g.zero_grad()
    br.total.backward()
    opt_g.step()
    if variant == "gan" and update_d:
        opt_d.zero_grad()
        d_loss = D(br.x_hat.detach()).mean() - D(x_in).mean()
        d_loss.backward()
        opt_d.step()
        _clip_(D, d_clip)
    g.eval()
    if D is not None:
        D.eval()
    return br


@dataclass
class TrainingResult:
    purifier: Purifier
    discriminator: Discriminator | None
    log: list[dict]


def _train_loop(g, D, f, data, rng, *, epochs, batch_size, lam, t_cfg, variant, opt_cfg, d_opt_cfg,
                d_clip, update_d, make_inputs, checkpoint_dir=None, tag="purifier"):
    opt_g, sched = opt_cfg.build(g.parameters(), epochs)
    opt_d = d_opt_cfg.build(D.parameters(), epochs)[0] if D is not None else None
    rows, step = [], 0
    for epoch in range(epochs):
        for batch in batches(data, batch_size, rng, shuffle=True):
            x_in = make_inputs(batch)
            br = _purifier_step(x_in, batch.y, g, D, f, lam, t_cfg, variant, opt_g, opt_d, rng,
                                d_clip, update_d, step)
            row = {"step": step, "epoch": epoch, **br.as_row()}
            if br.logits is not None:
                row["attack_success"] = float((br.logits.argmax(1) != batch.y).float().mean())
            else:
                row["attack_success"] = ""
            rows.append(row)
            step += 1
        if sched:
            sched.step()
        if checkpoint_dir is not None:
            save_checkpoint(g, Path(checkpoint_dir) / f"{tag}_epoch{epoch + 1:03d}.ckpt")
        log.info("%s epoch %d total %.4f", tag, epoch + 1, rows[-1]["total"] if rows else float("nan"))
    return rows


def pretrain_purifier(cfg: PretrainConfig, data: LabeledDataset, rng, g: Purifier | None = None,
                      D: Discriminator | None = None, checkpoint_dir=None) -> TrainingResult:
    """Train the purifier on transformed clean images with its original loss.

    GAN variant: generator descent on L_df, then one critic ascent step per
    batch (``d_clip > 0`` adds weight clipping). AE variant: masked-pixel MSE.
    """
    rng = as_rng(rng)
    c, h, _ = data.image_shape
    torch.manual_seed(rng.spawn("init").seed)
    if g is None:
        g = Purifier(c, h, cfg.width, variant=cfg.variant, residual=cfg.residual)
    if D is None and cfg.variant == "gan":
        D = Discriminator(c, h, cfg.width)
    start = time.time()
    rows = _train_loop(g, D, None, data, rng, epochs=cfg.epochs, batch_size=cfg.batch_size, lam=0.0,
                       t_cfg=cfg.transform, variant=cfg.variant, opt_cfg=cfg.optimizer,
                       d_opt_cfg=cfg.d_optimizer, d_clip=cfg.d_clip, update_d=True,
                       make_inputs=lambda b: b.x, checkpoint_dir=checkpoint_dir, tag="pretrain")
    g.hyperparams = {"pretrain": _jsonable(cfg), "seconds": time.time() - start}
    g.seed = rng.seed
    return TrainingResult(g.eval(), D.eval() if D is not None else None, rows)


def finetune_atop(cfg: AtopConfig, g: Purifier, D: Discriminator | None, f: nn.Module,
                  data: LabeledDataset, rng, checkpoint_dir=None) -> TrainingResult:
    """Adversarial fine-tuning of the purifier; ``f`` is never updated.

    Each batch: build x' with ``cfg.attack_for_ft`` against the current
    pipeline (or use x when training with clean examples), take one purifier
    step on the AToP loss, then one critic step unless the critic is frozen.
    """
    rng = as_rng(rng)
    f.eval()
    requires = [p.requires_grad for p in f.parameters()]
    for p in f.parameters():
        p.requires_grad_(False)
    before = parameter_checksum(f)
    attack_rng = rng.spawn("ft-attack")
    pipeline = Pipeline(f, g, cfg.transform)

    if cfg.train_with == "clean":
        make_inputs = lambda b: b.x  # noqa: E731
    elif cfg.attack_mode == "precomputed":
        g.eval()
        adv = torch.cat([run_attack(pipeline, b.x, b.y, cfg.attack_for_ft, attack_rng)
                         for b in batches(data, cfg.batch_size)])
        make_inputs = lambda b: adv[b.index]  # noqa: E731
    else:
        def make_inputs(b):
            g.eval()
            return run_attack(pipeline, b.x, b.y, cfg.attack_for_ft, attack_rng)

    try:
        start = time.time()
        rows = _train_loop(g, D, f, data, rng, epochs=cfg.epochs, batch_size=cfg.batch_size,
                           lam=cfg.lam, t_cfg=cfg.transform, variant=cfg.purifier_variant,
                           opt_cfg=cfg.optimizer, d_opt_cfg=cfg.d_optimizer, d_clip=cfg.d_clip,
                           update_d=not cfg.freeze_discriminator, make_inputs=make_inputs,
                           checkpoint_dir=checkpoint_dir, tag="atop")
    finally:
        for p, r in zip(f.parameters(), requires):
            p.requires_grad_(r)
    if parameter_checksum(f) != before:
        raise TrainingError("classifier parameters changed during fine-tuning")
    g.hyperparams = {**getattr(g, "hyperparams", {}), "atop": _jsonable(cfg),
                     "atop_seconds": time.time() - start}
    g.seed = rng.seed
    return TrainingResult(g.eval(), D.eval() if D is not None else None, rows)


def _jsonable(cfg) -> dict:
    return asdict(cfg)


LOG_FIELDS = ["step", "epoch", "total", "l_org", "real", "fake", "l1", "l_cls", "attack_success"]


def write_log_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path
