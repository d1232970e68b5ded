"""Gradient attacks against the full transform-purifier-classifier pipeline.

Gradients come from :func:`input_gradient`, which averages over ``eot_k``
independent transform draws (EOT) and can swap the purifier's Jacobian for
the identity (BPDA). All l_p attacks work in [0, 1] pixel space.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from .data import LabeledDataset, SeededRng, as_rng, batches, save_image_dataset
from .models import Pipeline

ATTACK_KINDS = ("FGSM", "PGD", "CW", "StAdv")
NORMS = ("l_inf", "l_2", "non_lp")


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "PGD"
    norm: str = "l_inf"
    eps: float = 8 / 255
    step: float | None = None  # None -> eps / 4
    steps: int = 10
    bpda: bool = True
    eot_k: int = 20
    random_start: bool = True
    cw_kappa: float = 0.0
    stadv_tau: float = 0.05
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}")
        if self.norm not in NORMS:
            raise AttackError(f"unsupported norm {self.norm!r}")
        if self.kind == "StAdv" and self.norm != "non_lp":
            raise AttackError("StAdv uses the non_lp threat model")
        if self.kind != "StAdv" and self.norm == "non_lp":
            raise AttackError(f"{self.kind} needs an l_p norm")
        if self.eps < 0:
            raise AttackError("eps must be >= 0")
        if self.steps < 1 or self.eot_k < 1:
            raise AttackError("steps and eot_k must be >= 1")

    @property
    def alpha(self) -> float:
        return self.step if self.step is not None else self.eps / 4

    @property
    def id(self) -> str:
        if self.name:
            return self.name
        return "FGSM" if self.kind == "FGSM" else f"{self.kind}-{self.steps}"

    @property
    def gradient(self) -> "GradientEstimatorConfig":
        return GradientEstimatorConfig(bpda=self.bpda, eot_k=self.eot_k)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "AttackConfig":
        return AttackConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class GradientEstimatorConfig:
    bpda: bool = False
    eot_k: int = 1

    def __post_init__(self):
        if self.eot_k < 1:
            raise AttackError("eot_k must be >= 1")


def preset(name: str, eps: float = 8 / 255, **kw) -> AttackConfig:
    """Named presets such as FGSM, PGD-10, PGD-20, CW-100 and StAdv."""
    if name == "FGSM":
        return AttackConfig(kind="FGSM", eps=eps, steps=1, **kw)
    kind, _, steps = name.partition("-")
    if steps and not steps.isdigit():
        raise AttackError(f"unknown preset {name!r}")
    if kind == "PGD":
        return AttackConfig(kind="PGD", eps=eps, steps=int(steps or 10), **kw)
    if kind == "CW":
        return AttackConfig(kind="CW", eps=eps, steps=int(steps or 100), **kw)
    if kind == "StAdv":
        return AttackConfig(kind="StAdv", norm="non_lp", eps=kw.pop("stadv_eps", 0.05),
                            steps=int(steps or 20), **kw)
    raise AttackError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# losses


def _check_labels(logits, y):
    if y.min() < 0 or y.max() >= logits.shape[1]:
        raise AttackError(f"label out of range [0, {logits.shape[1]})")


def cross_entropy(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_labels(logits, y)
    return F.cross_entropy(logits, y)


def cw_margin(logits: torch.Tensor, y: torch.Tensor, kappa: float = 0.0) -> torch.Tensor:
    """Per-example max(z_y - max_{c != y} z_c, -kappa)."""
    _check_labels(logits, y)
    true = logits.gather(1, y[:, None]).squeeze(1)
    other = logits.masked_fill(F.one_hot(y, logits.shape[1]).bool(), float("-inf")).amax(1)
    return torch.clamp(true - other, min=-kappa)


def attack_objective(logits, y, loss: str = "ce", kappa: float = 0.0):
    """Scalar the attacker ascends: mean CE, or the negated mean CW margin."""
    if loss == "ce":
        return cross_entropy(logits, y)
    if loss == "cw":
        return -cw_margin(logits, y, kappa).mean()
    raise AttackError(f"unknown attack loss {loss!r}")


# ---------------------------------------------------------------------------
# gradient estimation


def _forward(pipeline, x, rng, bpda):
    if isinstance(pipeline, Pipeline):
        return pipeline(x, rng, bpda=bpda)
    return pipeline(x)


def _is_deterministic(pipeline) -> bool:
    return not isinstance(pipeline, Pipeline) or pipeline.deterministic


def input_gradient(pipeline, x: torch.Tensor, y: torch.Tensor, gcfg: GradientEstimatorConfig,
                   rng: SeededRng, loss: str = "ce", kappa: float = 0.0) -> torch.Tensor:
    """(1/k) sum_j grad_x objective(f(pipeline_j(x)), y) over k transform draws."""
    rng = as_rng(rng)
    k = 1 if _is_deterministic(pipeline) else gcfg.eot_k
    total = torch.zeros_like(x)
    for _ in range(k):
        xr = x.detach().clone().requires_grad_(True)
        obj = attack_objective(_forward(pipeline, xr, rng, gcfg.bpda), y, loss, kappa)
        (g,) = torch.autograd.grad(obj, xr)
        total += g
    grad = total / k if k > 1 else total
    if not torch.isfinite(grad).all():
        raise AttackError("non-finite input gradient")
    return grad


# ---------------------------------------------------------------------------
# l_p attacks


def _per_example_norm(d: torch.Tensor) -> torch.Tensor:
    return d.flatten(1).norm(dim=1).view(-1, *([1] * (d.ndim - 1)))


def project(x_cand: torch.Tensor, x: torch.Tensor, norm: str, eps: float) -> torch.Tensor:
    """Project onto the eps-ball around ``x`` and then onto [0, 1]."""
    if x_cand.shape != x.shape:
        raise AttackError("shape mismatch in projection")
    delta = x_cand - x
    if norm == "l_inf":
        delta = delta.clamp(-eps, eps)
    elif norm == "l_2":
        n = _per_example_norm(delta)
        factor = torch.where(n > eps, eps / n.clamp_min(1e-30), torch.ones_like(n))
        delta = delta * factor
    else:
        raise AttackError(f"unsupported norm {norm!r}")
    return (x + delta).clamp(0, 1)


def fgsm(pipeline, x, y, eps: float, gcfg: GradientEstimatorConfig, rng) -> torch.Tensor:
    grad = input_gradient(pipeline, x, y, gcfg, rng)
    return (x + eps * grad.sign()).clamp(0, 1).detach()


def _step_direction(grad, norm):
    if norm == "l_inf":
        return grad.sign()
    return grad / _per_example_norm(grad).clamp_min(1e-12)


def _random_start(x, norm, eps, rng):
    g = rng.generator
    if norm == "l_inf":
        delta = (torch.rand(x.shape, generator=g, dtype=x.dtype) * 2 - 1) * eps
    else:
        d = torch.randn(x.shape, generator=g, dtype=x.dtype)
        d = d / _per_example_norm(d).clamp_min(1e-12)
        u = torch.rand(x.shape[0], generator=g, dtype=x.dtype) ** (1.0 / x[0].numel())
        delta = d * eps * u.view(-1, *([1] * (x.ndim - 1)))
    return project(x + delta, x, norm, eps)


def pgd(pipeline, x, y, cfg: AttackConfig, rng, loss: str = "ce", history: list | None = None) -> torch.Tensor:
    """Projected gradient ascent on ``loss`` inside the eps-ball intersected with [0, 1]."""
    rng = as_rng(rng)
    x = x.detach()
    x_adv = _random_start(x, cfg.norm, cfg.eps, rng) if cfg.random_start else x.clone()
    if history is not None:
        history.append(x_adv.clone())
    for _ in range(cfg.steps):
        grad = input_gradient(pipeline, x_adv, y, cfg.gradient, rng, loss, cfg.cw_kappa)
        x_adv = project(x_adv + cfg.alpha * _step_direction(grad, cfg.norm), x, cfg.norm, cfg.eps).detach()
        if history is not None:
            history.append(x_adv.clone())
    return x_adv


def cw_margin_attack(pipeline, x, y, cfg: AttackConfig, rng, history: list | None = None) -> torch.Tensor:
    """PGD on the CW margin loss (l_inf ball by default, 100 steps in the CW-100 preset)."""
    return pgd(pipeline, x, y, cfg, rng, loss="cw", history=history)


# ---------------------------------------------------------------------------
# spatial (flow-field) attack


def flow_warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear resampling: out[i, j] = x[i + flow_v, j + flow_u], zero outside the image.

    ``flow`` has shape (B, 2, H, W) with channel 0 the horizontal and channel 1
    the vertical displacement, both in pixels.
    """
    b, _, h, w = x.shape
    ys, xs = torch.meshgrid(torch.arange(h, dtype=x.dtype), torch.arange(w, dtype=x.dtype), indexing="ij")
    gx = (xs[None] + flow[:, 0]) / max(w - 1, 1) * 2 - 1
    gy = (ys[None] + flow[:, 1]) / max(h - 1, 1) * 2 - 1
    grid = torch.stack([gx, gy], dim=-1)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def flow_smoothness(flow: torch.Tensor) -> torch.Tensor:
    """Per-example sum of squared differences between 4-neighbour displacements."""
    dx = flow[:, :, :, 1:] - flow[:, :, :, :-1]
    dy = flow[:, :, 1:, :] - flow[:, :, :-1, :]
    return dx.pow(2).flatten(1).sum(1) + dy.pow(2).flatten(1).sum(1)


def stadv(pipeline, x, y, cfg: AttackConfig, rng, return_flow: bool = False):
    """Signed-gradient ascent on CE - tau * smoothness over a capped flow field."""
    rng = as_rng(rng)
    x = x.detach()
    cap = cfg.eps * x.shape[-1]
    step = cfg.step if cfg.step is not None else cap / 4
    flow = torch.zeros(x.shape[0], 2, *x.shape[-2:], dtype=x.dtype)
    for _ in range(cfg.steps):
        flow.requires_grad_(True)
        warped = flow_warp(x, flow)
        g_img = input_gradient(pipeline, warped.detach().clamp(0, 1), y, cfg.gradient, rng) * x.shape[0]
        objective = (warped * g_img).sum() - cfg.stadv_tau * flow_smoothness(flow).sum()
        (g_flow,) = torch.autograd.grad(objective, flow)
        if not torch.isfinite(g_flow).all():
            raise AttackError("non-finite flow gradient")
        flow = (flow.detach() + step * g_flow.sign()).clamp(-cap, cap)
    out = flow_warp(x, flow).clamp(0, 1).detach()
    return (out, flow) if return_flow else out


# ---------------------------------------------------------------------------
# drivers


def run_attack(pipeline, x, y, cfg: AttackConfig, rng) -> torch.Tensor:
    if cfg.eps == 0:
        return x.detach().clone()
    if cfg.kind == "FGSM":
        return fgsm(pipeline, x, y, cfg.eps, cfg.gradient, rng)
    if cfg.kind == "PGD":
        return pgd(pipeline, x, y, cfg, rng)
    if cfg.kind == "CW":
        return cw_margin_attack(pipeline, x, y, cfg, rng)
    return stadv(pipeline, x, y, cfg, rng)


@dataclass
class AdversarialSet:
    dataset: LabeledDataset
    config: AttackConfig
    linf: torch.Tensor
    l2: torch.Tensor
    seed: int


def attack_suite(pipeline, dataset: LabeledDataset, configs: list[AttackConfig], rng,
                 batch_size: int = 128) -> dict[str, AdversarialSet]:
    """Adversarial copies of ``dataset`` for each attack config, with per-example norms."""
    rng = as_rng(rng)
    results = {}
    for cfg in configs:
        arng = rng.spawn("attack", cfg.id)
        advs = []
        for batch in batches(dataset, batch_size):
            advs.append(run_attack(pipeline, batch.x, batch.y, cfg, arng))
        adv = torch.cat(advs) if advs else dataset.images.clone()
        delta = (adv - dataset.images).flatten(1)
        meta = dict(dataset.metadata, name=f"{dataset.metadata.get('name', 'data')}-{cfg.id}")
        results[cfg.id] = AdversarialSet(
            LabeledDataset(adv, dataset.labels.clone(), meta), cfg,
            delta.abs().amax(1) if len(delta) else torch.zeros(0),
            delta.norm(dim=1) if len(delta) else torch.zeros(0),
            arng.seed,
        )
    return results


def save_adversarial_set(adv: AdversarialSet, path) -> Path:
    """Data-layout shards plus ``attack.json`` with config, seed and per-example norms.

    The norms are those of the float examples; the shards round pixels to 1/255.
    """
    path = save_image_dataset(adv.dataset, path)
    sidecar = {"attack": adv.config.to_dict(), "attack_id": adv.config.id, "seed": adv.seed,
               "linf": adv.linf.tolist(), "l2": adv.l2.tolist()}
    Path(path, "attack.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path
