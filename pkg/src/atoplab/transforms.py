"""Random transforms that destroy perturbation structure before purification.

RT1 masks random patches, RT2 adds Gaussian noise and then masks, RT3 adds
noise once and covers the noisy image with N non-overlapping masks whose
missing regions are regenerated by the purifier and stitched back together.

Masks use 1 for kept pixels and 0 for missing pixels and have shape
(B, 1, H, W) so they broadcast over channels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch

from .data import SeededRng, as_rng

KINDS = ("none", "RT1", "RT2", "RT3")


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class TransformConfig:
    kind: str = "RT2"
    sigma: float = 0.25
    patch: int | None = None  # None -> image side / 8
    rate: float = 0.25
    n_masks: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TransformError(f"unknown transform kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma < 0:
            raise TransformError("sigma must be >= 0")
        if not 0 <= self.rate <= 1:
            raise TransformError("rate must lie in [0, 1]")
        if self.n_masks < 1:
            raise TransformError("n_masks must be >= 1")
        if self.patch is not None and self.patch < 1:
            raise TransformError("patch must be >= 1")

    def patch_for(self, h: int, w: int) -> int:
        p = self.patch if self.patch is not None else max(1, h // 8)
        if h % p or w % p:
            raise TransformError(f"patch size {p} does not divide image size {h}x{w}")
        return p

    def validate_for(self, h: int, w: int):
        p = self.patch_for(h, w)
        num = (h // p) * (w // p)
        if self.kind in ("RT1", "RT2"):
            _missing_count(num, self.rate)
        elif self.kind == "RT3" and num % self.n_masks:
            raise TransformError(f"{self.n_masks} masks do not evenly partition {num} patches")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "TransformConfig":
        return TransformConfig(**{**asdict(self), **changes})


@dataclass
class TransformOutput:
    views: list[torch.Tensor]
    masks: list[torch.Tensor]
    noisy: torch.Tensor
    kind: str = field(default="RT1")


def _missing_count(num_patches: int, rate: float) -> int:
    k = rate * num_patches
    if abs(k - round(k)) > 1e-9:
        raise TransformError(f"rate {rate} x {num_patches} patches is not an integer patch count")
    return int(round(k))


def _grid(shape, p):
    h, w = shape
    if p < 1 or h % p or w % p:
        raise TransformError(f"patch size {p} does not divide image size {h}x{w}")
    return h // p, w // p


def _expand(patch_values: torch.Tensor, gh: int, gw: int, p: int) -> torch.Tensor:
    """(B, gh*gw) patch values -> (B, 1, gh*p, gw*p) pixel mask."""
    grid = patch_values.reshape(-1, 1, gh, gw)
    return grid.repeat_interleave(p, dim=2).repeat_interleave(p, dim=3)


def sample_patch_masks(rng: SeededRng, batch: int, shape, p: int, r: float) -> torch.Tensor:
    """Independent patch masks for ``batch`` images, exactly r * num_patches missing each."""
    gh, gw = _grid(shape, p)
    num = gh * gw
    k = _missing_count(num, r)
    ranks = torch.rand(batch, num, generator=as_rng(rng).generator).argsort(dim=1).argsort(dim=1)
    keep = (ranks >= k).float()
    return _expand(keep, gh, gw, p)


def sample_patch_mask(rng: SeededRng, shape, p: int, r: float) -> torch.Tensor:
    """A single (H, W) mask with exactly r * num_patches patches zeroed."""
    return sample_patch_masks(rng, 1, shape, p, r)[0, 0]


def sample_partition_masks_batch(rng: SeededRng, batch: int, shape, p: int, n: int) -> list[torch.Tensor]:
    """N masks per image whose missing regions partition the patch grid."""
    gh, gw = _grid(shape, p)
    num = gh * gw
    if n < 1 or num % n:
        raise TransformError(f"{n} masks do not evenly partition {num} patches")
    size = num // n
    ranks = torch.rand(batch, num, generator=as_rng(rng).generator).argsort(dim=1).argsort(dim=1)
    group = ranks // size
    return [_expand((group != i).float(), gh, gw, p) for i in range(n)]


def sample_partition_masks(rng: SeededRng, shape, p: int, n: int) -> list[torch.Tensor]:
    """A single image's MaskSet: N (H, W) masks with disjoint, covering missing regions."""
    return [m[0, 0] for m in sample_partition_masks_batch(rng, 1, shape, p, n)]


def add_gaussian_noise(x: torch.Tensor, sigma: float, rng: SeededRng, return_noise: bool = False):
    """clip(x + eta, 0, 1) with eta ~ N(0, sigma^2) per pixel."""
    if sigma < 0:
        raise TransformError("sigma must be >= 0")
    if sigma == 0:
        out = x.clone()
        noise = torch.zeros_like(x)
    else:
        noise = sigma * torch.randn(x.shape, generator=as_rng(rng).generator, dtype=x.dtype)
        out = (x + noise).clamp(0, 1)
    return (out, noise) if return_noise else out


def apply_transform(x: torch.Tensor, cfg: TransformConfig, rng: SeededRng) -> TransformOutput:
    """Apply one random draw of ``cfg`` to a batch; differentiable in ``x``."""
    if x.ndim != 4:
        raise TransformError(f"expected a (B, C, H, W) batch, got shape {tuple(x.shape)}")
    b, _, h, w = x.shape
    rng = as_rng(rng)
    if cfg.kind == "none":
        ones = torch.ones(b, 1, h, w, dtype=x.dtype)
        return TransformOutput([x], [ones], x, "none")
    cfg.validate_for(h, w)
    p = cfg.patch_for(h, w)
    if cfg.kind == "RT1":
        m = sample_patch_masks(rng, b, (h, w), p, cfg.rate).to(x.dtype)
        return TransformOutput([m * x], [m], x, "RT1")
    noisy = add_gaussian_noise(x, cfg.sigma, rng)
    if cfg.kind == "RT2":
        m = sample_patch_masks(rng, b, (h, w), p, cfg.rate).to(x.dtype)
        return TransformOutput([m * noisy], [m], noisy, "RT2")
    masks = [m.to(x.dtype) for m in sample_partition_masks_batch(rng, b, (h, w), p, cfg.n_masks)]
    return TransformOutput([m * noisy for m in masks], masks, noisy, "RT3")


def aggregate_rt3(purified: list[torch.Tensor], masks: list[torch.Tensor]) -> torch.Tensor:
    """Keep only the regenerated pixels of each pass: sum_i (1 - m_i) * x_g^i."""
    if len(purified) != len(masks) or not purified:
        raise TransformError(f"{len(purified)} purified views for {len(masks)} masks")
    out = torch.zeros_like(purified[0])
    for xg, m in zip(purified, masks):
        if xg.shape[-2:] != m.shape[-2:] or xg.shape != purified[0].shape:
            raise TransformError("purified view and mask shapes do not match")
        out = out + (1 - m) * xg
    return out
