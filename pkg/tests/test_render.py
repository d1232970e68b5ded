import pytest
import torch
from PIL import Image

from atoplab.render import RenderError, render_grid


def test_single_tile(tmp_path):
    img = torch.zeros(3, 4, 4)
    img[0] = 1.0
    path = render_grid([{"clean": img}], ["clean"], tmp_path / "g.png", scale=2)
    out = Image.open(path).convert("RGB")
    # one 8x8 tile below a 14 px header; each row and the outer border are padded by 4 px
    assert out.size == (4 + 8 + 4, 14 + (8 + 4) + 4)
    assert out.getpixel((4, 14)) == (255, 0, 0)
    assert out.getpixel((11, 21)) == (255, 0, 0)


def test_grid_layout_and_determinism(tmp_path):
    ex = [{"clean": torch.rand(1, 6, 6), "purified": torch.rand(1, 6, 6)} for _ in range(3)]
    a = render_grid(ex, ["clean", "purified"], tmp_path / "a.png", scale=3, row_labels=["0", "1", "2"])
    b = render_grid(ex, ["clean", "purified"], tmp_path / "b.png", scale=3, row_labels=["0", "1", "2"])
    assert a.read_bytes() == b.read_bytes()
    w, h = Image.open(a).size
    assert (w, h) == (40 + 2 * (18 + 4) + 4, 14 + 3 * (18 + 4) + 4)
    # nearest-neighbour upscaling: every 3x3 block of a tile is one colour
    tile = Image.open(a).convert("L").crop((44, 14, 62, 32))
    expected = (ex[0]["clean"][0].clamp(0, 1) * 255).round().to(torch.uint8)
    for i in range(6):
        for j in range(6):
            block = {tile.getpixel((3 * j + dj, 3 * i + di)) for di in range(3) for dj in range(3)}
            assert block == {int(expected[i, j])}


def test_errors(tmp_path):
    with pytest.raises(RenderError, match="empty selection"):
        render_grid([], ["clean"], tmp_path / "x.png")
    with pytest.raises(RenderError, match="adversarial"):
        render_grid([{"clean": torch.rand(3, 4, 4)}], ["clean", "adversarial"], tmp_path / "x.png")
