"""Classifier, purifier and discriminator networks, the purify-then-classify
pipeline, and the checkpoint container."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import SeededRng, as_rng
from .transforms import TransformConfig, TransformOutput, aggregate_rt3, apply_transform


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


def _check_input(x: torch.Tensor, shape: tuple, name: str):
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(shape):
        raise ModelError(f"{name} expects inputs of shape (B, {', '.join(map(str, shape))}), "
                         f"got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# classifier


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class Classifier(nn.Module):
    """Small residual CNN; per-channel normalisation happens inside forward."""

    def __init__(self, num_classes: int = 10, channels: int = 3, size: int = 32, width: int = 32,
                 mean: tuple | None = None, std: tuple | None = None):
        super().__init__()
        self.arch = {"type": "Classifier", "num_classes": num_classes, "channels": channels,
                     "size": size, "width": width,
                     "mean": list(mean) if mean else [0.5] * channels,
                     "std": list(std) if std else [0.25] * channels}
        self.input_shape = (channels, size, size)
        self.register_buffer("mean", torch.tensor(self.arch["mean"]).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(self.arch["std"]).view(1, -1, 1, 1))
        w = width
        self.stem = nn.Sequential(nn.Conv2d(channels, w, 3, 1, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU())
        self.layers = nn.Sequential(BasicBlock(w, w), BasicBlock(w, 2 * w, 2), BasicBlock(2 * w, 4 * w, 2))
        self.fc = nn.Linear(4 * w, num_classes)

    def forward(self, x):
        z = (x - self.mean) / self.std
        z = self.layers(self.stem(z))
        return self.fc(z.mean(dim=(2, 3)))


# ---------------------------------------------------------------------------
# purifier


class Purifier(nn.Module):
    """Encoder-decoder with skip connections and a sigmoid output head.

    The ``gan`` variant is an inpainter that receives the binary mask as an
    extra input channel; the ``ae`` variant only sees the masked image.

    With ``residual=True`` the head predicts a correction in logit space on
    top of the visible pixels, ``sigmoid(out + m * logit(x_t))``, so an
    untrained correction passes visible pixels through unchanged. This suits
    noise-free masking, where visible pixels are already exact.
    """

    def __init__(self, channels: int = 3, size: int = 32, width: int = 32, depth: int = 4,
                 variant: str = "gan", residual: bool = False):
        super().__init__()
        if variant not in ("gan", "ae"):
            raise ModelError(f"unknown purifier variant {variant!r}")
        if size % (2 ** depth):
            raise ModelError(f"image size {size} is not divisible by 2**{depth}")
        self.arch = {"type": "Purifier", "channels": channels, "size": size, "width": width,
                     "depth": depth, "variant": variant, "residual": residual}
        self.variant = variant
        self.residual = residual
        self.input_shape = (channels, size, size)
        cin = channels + (1 if variant == "gan" else 0)
        widths = [width * min(2 ** i, 4) for i in range(depth + 1)]
        self.inc = nn.Sequential(nn.Conv2d(cin, widths[0], 3, 1, 1), nn.ReLU())
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i], widths[i + 1], 3, 2, 1), nn.ReLU(),
                          nn.Conv2d(widths[i + 1], widths[i + 1], 3, 1, 1), nn.ReLU())
            for i in range(depth)
        )
        self.up = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i + 1] + widths[i], widths[i], 3, 1, 1), nn.ReLU())
            for i in reversed(range(depth))
        )
        self.out = nn.Conv2d(widths[0], channels, 3, 1, 1)

    def forward(self, x_t, mask=None):
        if mask is None and (self.variant == "gan" or self.residual):
            raise ModelError("this purifier requires a mask")
        if mask is not None:
            if mask.ndim == 3:
                mask = mask[:, None]
            mask = mask.expand(x_t.shape[0], 1, *x_t.shape[2:]).to(x_t.dtype)
        h = torch.cat([x_t, mask], 1) if self.variant == "gan" else x_t
        skips = [self.inc(h)]
        for block in self.down:
            skips.append(block(skips[-1]))
        h = skips.pop()
        for block in self.up:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], 1))
        out = self.out(h)
        if self.residual:
            out = out + mask * torch.logit(x_t.clamp(0.01, 0.99))
        return torch.sigmoid(out)


# ---------------------------------------------------------------------------
# discriminator


class Discriminator(nn.Module):
    """Four stride-2 convolutions followed by a linear score per image.

    With ``spectral=True`` every layer is spectrally normalised, which keeps
    the critic roughly 1-Lipschitz without weight clipping.
    """

    def __init__(self, channels: int = 3, size: int = 32, width: int = 32, spectral: bool = True):
        super().__init__()
        self.arch = {"type": "Discriminator", "channels": channels, "size": size, "width": width,
                     "spectral": spectral}
        self.input_shape = (channels, size, size)
        norm = nn.utils.parametrizations.spectral_norm if spectral else (lambda m: m)
        widths = [channels, width, 2 * width, 4 * width, 4 * width]
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [norm(nn.Conv2d(a, b, 4, 2, 1)), nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.score = norm(nn.Linear(widths[-1], 1))

    def forward(self, x):
        return self.score(self.features(x).mean(dim=(2, 3))).squeeze(1)


ARCHS = {"Classifier": Classifier, "Purifier": Purifier, "Discriminator": Discriminator}


def build_model(arch: dict) -> nn.Module:
    kwargs = {k: v for k, v in arch.items() if k != "type"}
    try:
        cls = ARCHS[arch["type"]]
    except KeyError:
        raise ModelError(f"unknown architecture {arch.get('type')!r}") from None
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# forward contracts


def _finite(out: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise ModelError(f"non-finite activations in {name} output")
    return out


def classifier_forward(h: Classifier, x: torch.Tensor) -> torch.Tensor:
    _check_input(x, h.input_shape, "classifier")
    return _finite(h(x), "classifier")


def purifier_forward(h: Purifier, x_t: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    _check_input(x_t, h.input_shape, "purifier")
    if mask is not None and mask.shape[-2:] != x_t.shape[-2:]:
        raise ModelError(f"mask shape {tuple(mask.shape)} does not match image {tuple(x_t.shape)}")
    return _finite(h(x_t, mask), "purifier")


def discriminator_forward(h: Discriminator, x: torch.Tensor) -> torch.Tensor:
    _check_input(x, h.input_shape, "discriminator")
    return _finite(h(x), "discriminator")


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PurifyResult:
    x_hat: torch.Tensor
    transformed: TransformOutput
    purified: list[torch.Tensor]


def _run_purifier(g, views, masks, bpda: bool):
    if g is None:
        return list(views)
    n = len(views)
    out = g(torch.cat(views), torch.cat(masks)) if n > 1 else g(views[0], masks[0])
    out = list(out.chunk(n)) if n > 1 else [out]
    if bpda:
        # identity Jacobian in the backward pass, true purifier output forward
        out = [v + (o - v).detach() for v, o in zip(views, out)]
    return out


def purify_details(x: torch.Tensor, t_cfg: TransformConfig | None, g: Purifier | None,
                   rng: SeededRng, bpda: bool = False) -> PurifyResult:
    t_cfg = t_cfg or TransformConfig(kind="none")
    t_out = apply_transform(x, t_cfg, as_rng(rng))
    purified = _run_purifier(g, t_out.views, t_out.masks, bpda)
    if t_cfg.kind == "RT3":
        x_hat = aggregate_rt3(purified, t_out.masks)
    else:
        x_hat = purified[0]
    return PurifyResult(x_hat, t_out, purified)


def purify_pipeline(x: torch.Tensor, t_cfg: TransformConfig | None, g: Purifier | None,
                    rng: SeededRng, bpda: bool = False) -> torch.Tensor:
    """x -> t(x) -> g(.) (-> aggregate for RT3). ``g=None`` is the identity purifier."""
    return purify_details(x, t_cfg, g, rng, bpda).x_hat


class Pipeline:
    """The composed defence f(g(t(x))). Call with (x, rng) to get logits."""

    def __init__(self, classifier: nn.Module, purifier: nn.Module | None = None,
                 transform: TransformConfig | None = None):
        self.classifier = classifier
        self.purifier = purifier
        self.transform = transform or TransformConfig(kind="none")

    @property
    def deterministic(self) -> bool:
        return self.transform.kind == "none"

    def purify(self, x, rng, bpda: bool = False):
        return purify_pipeline(x, self.transform, self.purifier, rng, bpda)

    def __call__(self, x, rng=None, bpda: bool = False):
        return self.classifier(self.purify(x, as_rng(rng), bpda))

    def eval(self):
        for m in (self.classifier, self.purifier):
            if m is not None:
                m.eval()
        return self

    def with_transform(self, transform: TransformConfig) -> "Pipeline":
        return Pipeline(self.classifier, self.purifier, transform)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"ATOPCKPT"
FORMAT_VERSION = 1
_DTYPES = {"float32": (torch.float32, "<f4"), "int64": (torch.int64, "<i8")}


def save_checkpoint(model: nn.Module, path, hyperparams: dict | None = None, seed: int | None = None) -> Path:
    """Write ``model`` as MAGIC | version | header length | JSON header | tensor blob | sha256.

    Floating-point tensors are stored as little-endian float32.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    entries, chunks, offset = [], [], 0
    for name, tensor in state.items():
        dtype = "int64" if not tensor.is_floating_point() else "float32"
        arr = tensor.detach().cpu().to(_DTYPES[dtype][0]).numpy().astype(_DTYPES[dtype][1])
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch,
        "hyperparams": hyperparams if hyperparams is not None else getattr(model, "hyperparams", {}),
        "seed": seed if seed is not None else getattr(model, "seed", None),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    return _parse(data, path)[0]


def _parse(data: bytes, path):
    if len(data) < len(MAGIC) + 8 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"corrupt checkpoint {path}: checksum mismatch")
    version, hlen = struct.unpack("<II", body[len(MAGIC):len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} unsupported (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen])
    return header, body[start + hlen:]


def load_checkpoint(path, expect_arch: dict | None = None) -> nn.Module:
    """Rebuild the model stored at ``path``; returned in eval mode."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    header, blob = _parse(path.read_bytes(), path)
    arch = header["arch"]
    if expect_arch is not None and dict(expect_arch) != arch:
        raise CheckpointError(f"architecture mismatch: checkpoint has {arch}, expected {dict(expect_arch)}")
    model = build_model(arch)
    state = {}
    for e in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(blob, dtype=np_dtype, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(torch_dtype)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as err:
        raise CheckpointError(f"checkpoint tensors do not match architecture {arch}: {err}") from None
    model.hyperparams = header["hyperparams"]
    model.seed = header["seed"]
    return model.eval()


def parameter_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
