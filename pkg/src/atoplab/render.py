"""Labelled image grids: one row per example, one column per pipeline stage."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

STAGES = ("clean", "adversarial", "transformed", "purified", "purified_adversarial")


class RenderError(ValueError):
    pass


def _to_pil(img: torch.Tensor, scale: int) -> Image.Image:
    arr = (img.detach().clamp(0, 1) * 255).round().to(torch.uint8).cpu().numpy()
    arr = np.transpose(arr, (1, 2, 0))
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    tile = Image.fromarray(arr)
    if scale > 1:
        tile = tile.resize((tile.width * scale, tile.height * scale), Image.NEAREST)
    return tile.convert("RGB")


def render_grid(examples: list[dict], stages: list[str], out_path, scale: int = 4,
                row_labels: list[str] | None = None) -> Path:
    """Write a PNG grid; ``examples[i][stage]`` is a (C, H, W) tensor in [0, 1].

    Small images are upscaled with nearest-neighbour sampling so individual
    patches stay visible.
    """
    if not examples:
        raise RenderError("empty selection")
    if not stages:
        raise RenderError("no stages requested")
    for i, ex in enumerate(examples):
        missing = [s for s in stages if s not in ex]
        if missing:
            raise RenderError(f"example {i} is missing stage artifact(s): {', '.join(missing)}")
    tiles = [[_to_pil(ex[s], scale) for s in stages] for ex in examples]
    tw, th = tiles[0][0].size
    pad, header = 4, 14
    left = 40 if row_labels else 0
    width = left + len(stages) * (tw + pad) + pad
    height = header + len(examples) * (th + pad) + pad
    canvas = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(canvas)
    for j, stage in enumerate(stages):
        draw.text((left + pad + j * (tw + pad), 1), stage[: max(4, tw // 6)], fill="black")
    for i, row in enumerate(tiles):
        y = header + i * (th + pad)
        if row_labels:
            draw.text((2, y + th // 2 - 5), str(row_labels[i])[:6], fill="black")
        for j, tile in enumerate(row):
            canvas.paste(tile, (left + pad + j * (tw + pad), y))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path, format="PNG")
    return out_path
