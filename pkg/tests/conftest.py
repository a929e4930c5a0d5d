import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", max_examples=100, deadline=None)
settings.load_profile("default")

torch.set_default_dtype(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_fd(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a flat array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def tiny_config(**overrides):
    cfg = {
        "model": {
            "state_dim": 1,
            "kernel": {"type": "rbf", "variance": 1.0, "lengthscale": 1.0},
            "num_inducing": 3,
            "sigma_f2": 0.05,
            "sigma_g2": 0.1,
            "seed": 0,
        },
        "recognition": {"hidden_dim": 2, "seed": 0},
        "training": {"steps": 5, "batch_size": 4, "learning_rate": 1e-2, "seed": 0},
    }
    for key, value in overrides.items():
        section, name = key.split("__")
        cfg[section][name] = value
    return cfg


def tiny_model(dataset, **overrides):
    from gpssm.model import build_model

    return build_model(tiny_config(**overrides), dataset.obs_dim, dataset.action_dim, dataset)


def elbo_fd_check(model, batch, h=1e-5, seed=0):
    """Compare reverse-mode ELBO gradients with central differences at fixed noise.

    Returns ``(name, index, grad, fd)`` for every scalar parameter entry.
    """
    from gpssm.optim import gradient

    eps_rng = np.random.default_rng(seed)
    lengths = []
    for ep in batch:
        if len(ep) not in lengths:
            lengths.append(len(ep))
    eps = [
        torch.from_numpy(eps_rng.standard_normal((1, sum(len(e) == T for e in batch), T + 1, model.state_dim)))
        for T in lengths
    ]

    def value():
        return model.elbo(batch, eps=eps).total

    params = model.param_set()
    grads = gradient(lambda _p: value(), params)
    rows = []
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(value())
                flat[i] = orig - h
                dn = float(value())
                flat[i] = orig
                rows.append((name, i, float(grads[name].view(-1)[i]), (up - dn) / (2 * h)))
    return rows


def fd_agrees(g, fd, rel=1e-4, floor=1e-7):
    return abs(g - fd) <= rel * max(abs(g), abs(fd)) + floor


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
