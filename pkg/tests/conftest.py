import pytest
import torch

from atoplab.data import SyntheticSpec, make_synthetic_dataset, sample_eval_subset
from atoplab.training import PretrainConfig, pretrain_purifier, train_classifier
from atoplab.transforms import TransformConfig

torch.set_num_threads(1)

# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class IdentityPurifier(torch.nn.Module):
    variant = "gan"

    def forward(self, x_t, mask=None):
        return x_t


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(C=4, H=16, W=16, n_per_class=60)


@pytest.fixture(scope="session")
def small_data(small_spec):
    train = make_synthetic_dataset(10, small_spec, "train")
    test = make_synthetic_dataset(11, small_spec, "test")
    return train, test


@pytest.fixture(scope="session")
def small_classifier(small_data):
    train, _ = small_data
    return train_classifier(train, 0, epochs=15, batch_size=32, width=8)


@pytest.fixture(scope="session")
def small_pretrained(small_data):
    train, _ = small_data
    cfg = PretrainConfig(transform=TransformConfig(kind="RT2"), epochs=6, batch_size=32, width=8)
    return pretrain_purifier(cfg, train, 3)


@pytest.fixture(scope="session")
def small_eval(small_data):
    _, test = small_data
    return sample_eval_subset(test, 128, 0)


def fd_relative_error(fn, tensor: torch.Tensor, h: float = 1e-6) -> float:
    """Norm-wise relative error between autograd and central differences of scalar ``fn``.

    ``tensor`` must be a double leaf; ``fn`` is re-evaluated with it perturbed in place.
    """
    tensor.requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(), tensor)
    numeric = torch.zeros_like(tensor)
    flat, nflat = tensor.data.view(-1), numeric.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            old = flat[i].item()
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale
