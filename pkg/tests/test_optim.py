import json
import math

import numpy as np
import pytest
import torch

from conftest import elbo_fd_check, fd_agrees, tiny_config, tiny_model
from gpssm.data import kink_generate, load_checkpoint
from gpssm.linalg import cholesky
from gpssm.optim import AdamState, NonFiniteError, adam_step, clip_by_global_norm, gradient, train


def test_gradient_of_half_square_norm(rng):
    p = {"a": torch.from_numpy(rng.normal(size=3)).requires_grad_(), "b": torch.tensor(2.0, requires_grad=True)}
    g = gradient(lambda q: 0.5 * sum((v * v).sum() for v in q.values()), p)
    assert torch.equal(g["a"], p["a"].detach())
    assert float(g["b"]) == 2.0


def test_gradient_of_cholesky_logdet(rng):
    B = rng.normal(size=(2, 2))
    A = torch.from_numpy(B @ B.T + np.eye(2)).requires_grad_()
    g = gradient(lambda q: 2 * torch.log(torch.diagonal(cholesky(q["A"]))).sum(), {"A": A})
    assert torch.allclose(g["A"], torch.linalg.inv(A.detach()).T, atol=1e-12)


def test_unused_parameter_gets_zero_gradient():
    p = {"a": torch.tensor(1.0, requires_grad=True), "b": torch.ones(2, requires_grad=True)}
    g = gradient(lambda q: q["a"] ** 2, p)
    assert torch.equal(g["b"], torch.zeros(2))


def test_non_finite_gradient_names_parameter():
    p = {"ok": torch.tensor(1.0, requires_grad=True), "bad": torch.tensor(0.0, requires_grad=True)}
    with pytest.raises(NonFiniteError) as info:
        gradient(lambda q: q["ok"] + torch.sqrt(q["bad"]), p)
    assert info.value.name == "bad"


def test_full_elbo_gradient_matches_finite_differences():
    ds = kink_generate(3, 5, seed=4)
    model = tiny_model(ds)
    rows = elbo_fd_check(model, ds.episodes)
    bad = [r for r in rows if not fd_agrees(r[2], r[3])]
    assert not bad, bad[:5]
    groups = {r[0].split(".")[0] for r in rows}
    assert groups == {"transition", "emission", "recognition"}


def test_adam_first_step():
    p = {"x": torch.tensor([0.0], requires_grad=True)}
    st = AdamState(lr=1e-3)
    adam_step(st, p, {"x": torch.tensor([1.0])})
    assert float(p["x"]) == pytest.approx(-1e-3 * 1 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_keeps_parameters(rng):
    x = torch.from_numpy(rng.normal(size=4)).requires_grad_()
    before = x.detach().clone()
    st = AdamState()
    for _ in range(3):
        adam_step(st, {"x": x}, {"x": torch.zeros(4)})
    assert torch.equal(x.detach(), before)


def test_adam_two_steps_by_hand():
    g, lr, b1, b2, eps = 0.3, 0.01, 0.9, 0.999, 1e-8
    p = {"x": torch.tensor([1.0], requires_grad=True)}
    st = AdamState(lr=lr)
    x, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        adam_step(st, p, {"x": torch.tensor([g])})
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert float(p["x"]) == pytest.approx(x, rel=1e-14)
    assert st.step == 2


def test_clip_by_global_norm():
    g = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_by_global_norm(g, 100.0) == 5.0 and float(g["a"]) == 3.0
    clip_by_global_norm(g, 1.0)
    assert float(g["a"]) == pytest.approx(0.6) and float(g["b"]) == pytest.approx(0.8)


@pytest.fixture
def data():
    return kink_generate(8, 5, seed=0)


def test_zero_steps_saves_initialisation(tmp_path, data):
    cfg = tiny_config(training__steps=0)
    res = train(cfg, data, tmp_path)
    init = tiny_model(data)
    cp = load_checkpoint(res.checkpoint_path)
    for name, value in init.tensors().items():
        assert np.array_equal(cp.tensors["model." + name], value)
    assert res.history == []


def test_training_is_deterministic(tmp_path, data):
    cfg = tiny_config(training__steps=6)
    a = train(cfg, data, tmp_path / "a")
    b = train(cfg, data, tmp_path / "b")
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_time"} for r in h]
    assert strip(a.history) == strip(b.history)
    for name, value in a.model.tensors().items():
        assert np.array_equal(value, b.model.tensors()[name])


def test_metrics_file_records(tmp_path, data):
    res = train(tiny_config(training__steps=3), data, tmp_path)
    recs = [json.loads(line) for line in open(res.metrics_path)]
    assert [r["step"] for r in recs] == [0, 1, 2]
    assert set(recs[0]) >= {"step", "emission", "transition", "entropy", "kl_u", "prior_x0", "total", "grad_norm", "wall_time"}


def test_resume_matches_uninterrupted_run(tmp_path, data):
    cfg = tiny_config(training__steps=8, training__checkpoint_every=4)
    full = train(cfg, data, tmp_path / "full")
    train(cfg, data, tmp_path / "part", max_steps=4)
    resumed = train(cfg, data, tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_4.bin")
    assert [r["total"] for r in resumed.history] == [r["total"] for r in full.history[4:]]
    for name, value in full.model.tensors().items():
        assert np.array_equal(value, resumed.model.tensors()[name])


def test_elbo_improves_on_kink(tmp_path):
    ds = kink_generate(30, 10, seed=0)
    cfg = tiny_config(training__steps=150, training__batch_size=10, model__num_inducing=6, recognition__hidden_dim=6)
    hist = train(cfg, ds, tmp_path).history
    first = np.mean([r["total"] for r in hist[:10]])
    last = np.mean([r["total"] for r in hist[-10:]])
    assert last > first + 100.0


def test_non_finite_elbo_keeps_last_good(tmp_path, data):
    model = tiny_model(data)
    with torch.no_grad():
        model.emission.raw_sigma_g2.fill_(float("nan"))
    with pytest.raises(NonFiniteError):
        train(tiny_config(), data, tmp_path, model=model)
    assert (tmp_path / "last_good.bin").exists()


def test_constrained_values_stay_valid(tmp_path, data):
    res = train(tiny_config(training__steps=20, training__learning_rate=0.2), data, tmp_path)
    m = res.model
    assert float(m.transition.sigma_f2) > 0 and float(m.emission.sigma_g2) > 0
    assert bool((torch.diagonal(m.transition.q_sqrt, dim1=-2, dim2=-1) > 0).all())
