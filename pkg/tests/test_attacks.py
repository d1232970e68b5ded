import json
import math

import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from conftest import IdentityPurifier, fd_relative_error

from atoplab.attacks import (AttackConfig, AttackError, GradientEstimatorConfig, attack_objective,
                             attack_suite, cross_entropy, cw_margin, cw_margin_attack, fgsm, flow_smoothness,
                             flow_warp, input_gradient, pgd, preset, project, run_attack,
                             save_adversarial_set, stadv)
from atoplab.data import SeededRng, load_image_dataset
from atoplab.models import Classifier, Pipeline
from atoplab.transforms import TransformConfig

EPS = 8 / 255


class Logistic(nn.Module):
    """Two-class logits (0, w.x) for a flat 2-vector input."""

    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(w, dtype=torch.double))

    def forward(self, x):
        z = x.flatten(1) @ self.w
        return torch.stack([torch.zeros_like(z), z], 1)


def _toy_classifier(channels=1, size=8):
    torch.manual_seed(0)
    return Classifier(num_classes=3, channels=channels, size=size, width=1).double().eval()


# config


def test_config_validation():
    with pytest.raises(AttackError):
        AttackConfig(kind="BIM")
    with pytest.raises(AttackError):
        AttackConfig(kind="PGD", norm="non_lp")
    with pytest.raises(AttackError):
        AttackConfig(steps=0)
    with pytest.raises(AttackError):
        AttackConfig(eot_k=0)
    with pytest.raises(AttackError):
        GradientEstimatorConfig(eot_k=0)
    assert AttackConfig(eps=0.04).alpha == pytest.approx(0.01)
    assert preset("PGD-20").steps == 20 and preset("CW-100").kind == "CW"
    assert preset("StAdv").eps == 0.05 and preset("StAdv").norm == "non_lp"


# losses


def test_cross_entropy_values():
    assert cross_entropy(torch.zeros(1, 10), torch.tensor([0])).item() == pytest.approx(math.log(10))
    assert cross_entropy(torch.tensor([[100.0, 0.0, 0.0]]), torch.tensor([0])).item() == pytest.approx(0, abs=1e-6)
    expected = -math.log(math.exp(2) / (math.exp(2) + math.exp(1) + 1))
    assert cross_entropy(torch.tensor([[2.0, 1.0, 0.0]]), torch.tensor([0])).item() == pytest.approx(expected, abs=1e-5)
    assert expected == pytest.approx(0.40761, abs=1e-5)
    with pytest.raises(AttackError):
        cross_entropy(torch.zeros(1, 3), torch.tensor([3]))


def test_cw_margin_values():
    assert cw_margin(torch.tensor([[3.0, 1.0]]), torch.tensor([0])).item() == 2.0
    assert cw_margin(torch.tensor([[1.0, 3.0]]), torch.tensor([0]), kappa=0.5).item() == -0.5
    with pytest.raises(AttackError):
        attack_objective(torch.zeros(1, 2), torch.tensor([0]), loss="hinge")


@pytest.mark.parametrize("loss", ["ce", "cw"])
def test_attack_loss_input_gradients_fd(loss):
    f = _toy_classifier()
    x = torch.rand(3, 1, 8, 8, dtype=torch.double)
    y = torch.tensor([0, 1, 2])
    assert fd_relative_error(lambda: attack_objective(f(x), y, loss), x) <= 1e-4


def test_input_gradient_matches_fd_through_pipeline():
    f = _toy_classifier()
    pipe = Pipeline(f, IdentityPurifier(), TransformConfig(kind="none"))
    x = torch.rand(2, 1, 8, 8, dtype=torch.double)
    y = torch.tensor([0, 2])
    g = input_gradient(pipe, x, y, GradientEstimatorConfig(), SeededRng(0))
    xr = x.clone()
    assert fd_relative_error(lambda: cross_entropy(pipe(xr), y), xr) <= 1e-4
    assert torch.allclose(g, torch.autograd.grad(cross_entropy(pipe(xr), y), xr)[0])


def test_stadv_objective_gradient_fd():
    torch.manual_seed(1)
    x = torch.rand(2, 1, 6, 6, dtype=torch.double)
    flow = (torch.rand(2, 2, 6, 6, dtype=torch.double) - 0.5) * 0.8
    w = torch.randn(2, 1, 6, 6, dtype=torch.double)
    fn = lambda: (flow_warp(x, flow) * w).sum() - 0.05 * flow_smoothness(flow).sum()  # noqa: E731
    assert fd_relative_error(fn, flow) <= 1e-4


# gradient estimation


def test_eot_equals_plain_for_deterministic_pipeline():
    f = _toy_classifier()
    pipe = Pipeline(f)
    x = torch.rand(2, 1, 8, 8, dtype=torch.double)
    y = torch.tensor([0, 1])
    a = input_gradient(pipe, x, y, GradientEstimatorConfig(eot_k=1), SeededRng(0))
    b = input_gradient(pipe, x, y, GradientEstimatorConfig(eot_k=7), SeededRng(1))
    assert torch.equal(a, b)


def test_bpda_exact_for_identity_purifier():
    f = _toy_classifier()
    pipe = Pipeline(f, IdentityPurifier(), TransformConfig(kind="RT2"))
    x = torch.rand(2, 1, 8, 8, dtype=torch.double)
    y = torch.tensor([0, 1])
    a = input_gradient(pipe, x, y, GradientEstimatorConfig(bpda=True, eot_k=3), SeededRng(4))
    b = input_gradient(pipe, x, y, GradientEstimatorConfig(bpda=False, eot_k=3), SeededRng(4))
    assert torch.equal(a, b)


def test_eot_single_sample_is_one_pipeline_gradient():
    f = _toy_classifier()
    pipe = Pipeline(f, IdentityPurifier(), TransformConfig(kind="RT2"))
    x = torch.rand(2, 1, 8, 8, dtype=torch.double)
    y = torch.tensor([2, 1])
    got = input_gradient(pipe, x, y, GradientEstimatorConfig(eot_k=1), SeededRng(9))
    xr = x.clone().requires_grad_(True)
    (want,) = torch.autograd.grad(cross_entropy(pipe(xr, SeededRng(9)), y), xr)
    assert torch.equal(got, want)


def test_eot_converges_to_two_branch_average():
    # 2x4 image with a 1x2 patch grid and r=0.5: mask A or mask B, probability 1/2 each
    torch.manual_seed(0)
    lin = nn.Sequential(nn.Flatten(), nn.Linear(8, 3)).double()
    pipe = Pipeline(lin, None, TransformConfig(kind="RT1", patch=2, rate=0.5))
    x = torch.rand(1, 1, 2, 4, dtype=torch.double)
    y = torch.tensor([1])
    m_a = torch.tensor([[0, 0, 1, 1], [0, 0, 1, 1]], dtype=torch.double).view(1, 1, 2, 4)
    branch = []
    for m in (m_a, 1 - m_a):
        xr = x.clone().requires_grad_(True)
        (g,) = torch.autograd.grad(F.cross_entropy(lin(m * xr), y), xr)
        branch.append(g)
    exact = (branch[0] + branch[1]) / 2
    k = 4000
    est = input_gradient(pipe, x, y, GradientEstimatorConfig(eot_k=k), SeededRng(0))
    spread = (branch[0] - branch[1]).abs().max().item() / 2
    assert (est - exact).abs().max().item() <= 4 * spread / math.sqrt(k)


def test_nonfinite_gradient_reported():
    bad = lambda x: x.flatten(1)[:, :2] * float("nan")  # noqa: E731
    with pytest.raises(AttackError, match="non-finite"):
        input_gradient(bad, torch.rand(1, 1, 2, 2), torch.tensor([0]), GradientEstimatorConfig(), SeededRng(0))


# fgsm and projection


def test_fgsm_zero_gradient_is_identity():
    const = lambda x: torch.zeros(x.shape[0], 3, dtype=x.dtype) + 0 * x.sum()  # noqa: E731
    x = torch.rand(2, 1, 4, 4)
    assert torch.equal(fgsm(const, x, torch.tensor([0, 1]), EPS, GradientEstimatorConfig(), SeededRng(0)), x)


def test_fgsm_magnitude_on_interior_pixels():
    f = _toy_classifier()
    x = 0.2 + 0.6 * torch.rand(2, 1, 8, 8, dtype=torch.double)
    adv = fgsm(f, x, torch.tensor([0, 1]), EPS, GradientEstimatorConfig(), SeededRng(0))
    grad = input_gradient(f, x, torch.tensor([0, 1]), GradientEstimatorConfig(), SeededRng(0))
    nz = grad != 0
    assert torch.allclose((adv - x).abs()[nz], torch.full_like(adv[nz], EPS), atol=1e-12)


def test_fgsm_logistic_toy():
    model = Logistic([2.0, -3.0])
    x = torch.tensor([[0.5, 0.5]], dtype=torch.double)
    y = torch.tensor([1])
    adv = fgsm(model, x, y, 0.1, GradientEstimatorConfig(), SeededRng(0))
    assert torch.allclose(adv - x, torch.tensor([[-0.1, 0.1]], dtype=torch.double))
    with torch.no_grad():
        assert F.cross_entropy(model(adv), y) > F.cross_entropy(model(x), y)


def test_project_inside_ball_unchanged():
    x = torch.full((1, 1, 4, 4), 0.5)
    cand = x + 0.01
    assert torch.equal(project(cand, x, "l_inf", EPS), cand)
    assert torch.equal(project(cand, x, "l_2", 1.0), cand)


def test_project_linf_clamp():
    x = torch.full((1, 3, 4, 4), 0.5)
    out = project(x + 0.1, x, "l_inf", EPS)
    assert torch.allclose(out - x, torch.full_like(x, EPS))


def test_project_l2_radial():
    x = torch.full((2, 1, 4, 4), 0.5, dtype=torch.double)
    d = torch.randn(2, 1, 4, 4, dtype=torch.double)
    eps = 0.05
    d = d / d.flatten(1).norm(dim=1).view(-1, 1, 1, 1) * 2 * eps
    out = project(x + d, x, "l_2", eps) - x
    assert torch.allclose(out.flatten(1).norm(dim=1), torch.full((2,), eps, dtype=torch.double))
    assert torch.allclose(out, d / 2)


def test_project_errors():
    with pytest.raises(AttackError):
        project(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), "l_1", 0.1)
    with pytest.raises(AttackError):
        project(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3), "l_inf", 0.1)


# pgd / cw


def test_pgd_one_step_equals_fgsm():
    f = _toy_classifier()
    x = torch.rand(3, 1, 8, 8, dtype=torch.double)
    y = torch.tensor([0, 1, 2])
    cfg = AttackConfig(kind="PGD", eps=EPS, step=EPS, steps=1, random_start=False, bpda=False, eot_k=1)
    assert torch.equal(pgd(f, x, y, cfg, SeededRng(0)),
                       fgsm(f, x, y, EPS, GradientEstimatorConfig(), SeededRng(0)))


@pytest.mark.parametrize("norm,eps", [("l_inf", EPS), ("l_2", 0.5)])
def test_pgd_iterates_in_ball(norm, eps):
    f = _toy_classifier()
    x = torch.rand(4, 1, 8, 8, dtype=torch.double)
    y = torch.tensor([0, 1, 2, 0])
    cfg = AttackConfig(kind="PGD", norm=norm, eps=eps, steps=8, eot_k=1)
    history = []
    pgd(f, x, y, cfg, SeededRng(0), history=history)
    assert len(history) == 9
    for it in history:
        d = (it - x).flatten(1)
        assert it.min() >= 0 and it.max() <= 1
        if norm == "l_inf":
            assert d.abs().max() <= eps
        else:
            assert (d.norm(dim=1) <= eps + 1e-6).all()


def test_pgd_drives_undefended_accuracy_down(small_classifier, small_eval):
    f = small_classifier
    x, y = small_eval.images, small_eval.labels

    def acc(xs):
        with torch.no_grad():
            return 100.0 * (f(xs).argmax(1) == y).float().mean().item()

    fg = run_attack(f, x, y, preset("FGSM"), SeededRng(0))
    pg = run_attack(f, x, y, preset("PGD-20", step=2 / 255), SeededRng(0))
    print(f"clean {acc(x):.1f} FGSM {acc(fg):.1f} PGD-20 {acc(pg):.1f}")
    assert acc(pg) < 5.0
    assert acc(fg) >= acc(pg)


def test_pgd_loss_non_decreasing_in_steps(small_classifier, small_eval):
    f = small_classifier
    x, y = small_eval.images[:64], small_eval.labels[:64]
    losses = []
    for k in (1, 5, 20):
        adv = run_attack(f, x, y, preset(f"PGD-{k}", eps=2 / 255), SeededRng(0))
        with torch.no_grad():
            losses.append(F.cross_entropy(f(adv), y).item())
    assert losses[0] <= losses[1] <= losses[2]


def test_cw_margin_attack_properties(small_classifier, small_eval):
    f = small_classifier
    x, y = small_eval.images, small_eval.labels
    with torch.no_grad():
        wrong = (f(x).argmax(1) + 1) % f.fc.out_features
        assert (cw_margin(f(x), wrong) <= 0).all()
    cfg = preset("CW-100")
    history = []
    cw = cw_margin_attack(f, x, y, cfg, SeededRng(0), history=history)
    # float32 images: containment holds up to one rounding of x + delta
    assert all((h - x).abs().max() <= EPS + torch.finfo(torch.float32).eps for h in history)
    pg = run_attack(f, x, y, preset("PGD-100"), SeededRng(0))
    with torch.no_grad():
        s_cw = 100 * (f(cw).argmax(1) != y).float().mean().item()
        s_pg = 100 * (f(pg).argmax(1) != y).float().mean().item()
    print(f"success CW-100 {s_cw:.1f} PGD-100 {s_pg:.1f}")
    assert abs(s_cw - s_pg) <= 5.0


# stadv


def test_flow_warp_identity_and_shift():
    x = torch.arange(16, dtype=torch.double).view(1, 1, 4, 4) / 16
    assert torch.allclose(flow_warp(x, torch.zeros(1, 2, 4, 4, dtype=torch.double)), x)
    flow = torch.zeros(1, 2, 4, 4, dtype=torch.double)
    flow[:, 0] = 1.0
    expected = torch.zeros_like(x)
    expected[..., :3] = x[..., 1:]
    assert torch.allclose(flow_warp(x, flow), expected)


def test_flow_smoothness_constant_zero():
    flow = torch.full((2, 2, 5, 5), 0.7)
    assert torch.all(flow_smoothness(flow) == 0)


def test_stadv_output_and_cap(small_classifier, small_eval):
    f = small_classifier
    x, y = small_eval.images[:32], small_eval.labels[:32]
    cfg = preset("StAdv")
    adv, flow = stadv(f, x, y, cfg, SeededRng(0), return_flow=True)
    assert adv.min() >= 0 and adv.max() <= 1
    assert torch.isfinite(flow).all()
    assert flow.abs().max() <= cfg.eps * x.shape[-1] + 1e-6
    with torch.no_grad():
        assert (f(adv).argmax(1) == y).float().mean() < (f(x).argmax(1) == y).float().mean()


# suite


def test_attack_suite(small_classifier, small_eval, tmp_path):
    f = small_classifier
    sub = small_eval.subset(range(16))
    assert attack_suite(f, sub, [], SeededRng(0)) == {}
    cfgs = [preset("FGSM"), preset("PGD-5", eot_k=1)]
    a = attack_suite(f, sub, cfgs, SeededRng(0))
    b = attack_suite(f, sub, cfgs, SeededRng(0))
    for cid, adv in a.items():
        assert (adv.linf <= EPS + 1e-7).all()
        assert torch.equal(adv.dataset.images, b[cid].dataset.images)
    path = save_adversarial_set(a["PGD-5"], tmp_path / "adv")
    meta = json.loads((path / "attack.json").read_text())
    assert meta["attack_id"] == "PGD-5" and len(meta["linf"]) == 16
    assert len(load_image_dataset(path)) == 16


def test_zero_eps_is_identity():
    f = _toy_classifier()
    x = torch.rand(2, 1, 8, 8, dtype=torch.double)
    assert torch.equal(run_attack(f, x, torch.tensor([0, 1]), preset("PGD-10", eps=0.0), SeededRng(0)), x)
