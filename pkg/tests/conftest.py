import numpy as np
import pytest
import torch

from cdrsb.config import TrainConfig
from cdrsb.synth import SynthConfig, generate
from cdrsb.train import toy_bundle


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def toy():
    return toy_bundle()


@pytest.fixture
def toy_ranking():
    return toy_bundle("ranking")


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_users=40, n_items=60, interactions_per_user=10, friends_per_user=3,
                                candidate_pool=8, seed=3))


@pytest.fixture
def tiny_config():
    return TrainConfig(d=8, d_prime=8, batch_size=16, max_epochs=3, patience=2, learning_rate=1e-3)


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_difference_error(fn, params, step=1e-6):
    """Max per-tensor relative error of autograd vs central differences for scalar ``fn()``."""
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            analytic = p.grad.clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            flat = p.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + step
                up = fn().item()
                flat[k] = orig - step
                down = fn().item()
                flat[k] = orig
                numeric.view(-1)[k] = (up - down) / (2 * step)
            denom = analytic.norm() + numeric.norm()
            if denom > 1e-10:
                worst = max(worst, float((analytic - numeric).norm() / denom))
    return worst
