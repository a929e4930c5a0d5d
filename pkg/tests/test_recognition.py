import math

import numpy as np
import pytest
import torch

from gpssm.linalg import softplus
from gpssm.recognition import GRUCell, RecognitionNet, gru_step


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_oracle(W, U, b, h, x):
    """Elementwise GRU update with the reset applied before the recurrent matrix."""
    H = len(h)
    out = []
    z = [sig(sum(W[i, j] * x[j] for j in range(len(x))) + b[i] + sum(U[i, k] * h[k] for k in range(H))) for i in range(H)]
    r = [sig(sum(W[H + i, j] * x[j] for j in range(len(x))) + b[H + i] + sum(U[H + i, k] * h[k] for k in range(H))) for i in range(H)]
    for i in range(H):
        pre = sum(W[2 * H + i, j] * x[j] for j in range(len(x))) + b[2 * H + i]
        pre += sum(U[2 * H + i, k] * r[k] * h[k] for k in range(H))
        out.append((1 - z[i]) * h[i] + z[i] * math.tanh(pre))
    return np.array(out)


def test_zero_cell_halves_state():
    cell = GRUCell(2, 3)
    h = torch.tensor([0.4, -1.0, 2.0])
    assert torch.allclose(gru_step(cell, h, torch.tensor([5.0, -3.0])), 0.5 * h)
    assert torch.equal(gru_step(cell, torch.zeros(3), torch.tensor([1.0, 1.0])), torch.zeros(3))


def test_cell_matches_oracle(rng):
    cell = GRUCell(3, 4)
    with torch.no_grad():
        for p in cell.parameters():
            p.copy_(torch.from_numpy(rng.normal(size=p.shape)))
    h, x = rng.normal(size=4), rng.normal(size=3)
    got = gru_step(cell, torch.from_numpy(h), torch.from_numpy(x)).detach().numpy()
    W, U, b = (p.detach().numpy() for p in (cell.W, cell.U, cell.b))
    assert np.allclose(got, gru_oracle(W, U, b, h, x), atol=1e-12)


def _zero_net(D=2, O=1, P=1, H=3):
    net = RecognitionNet(O, P, D, H)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if not name.endswith("bias"):
                p.zero_()
    return net


def test_zero_weights_give_constant_heads(rng):
    net = _zero_net()
    q = net.encode(torch.from_numpy(rng.normal(size=(5, 1))), torch.from_numpy(rng.normal(size=(5, 1))))
    assert torch.allclose(q.A, torch.eye(2).expand(5, 2, 2))
    assert torch.allclose(q.L, q.L[0].expand(5, 2, 2))
    assert torch.allclose(torch.diagonal(q.L[0]), torch.full((2,), 0.1))
    assert torch.allclose(torch.diagonal(q.L0), torch.ones(2))


def test_single_step_episode(rng):
    net = RecognitionNet(1, 0, 2, 4)
    q = net.encode(torch.from_numpy(rng.normal(size=(1, 1))))
    assert q.A.shape == (1, 2, 2) and q.L.shape == (1, 2, 2)
    assert q.m0.shape == (2,) and q.L0.shape == (2, 2)


def test_encode_matches_hand_computation(rng):
    H, D, O, P, T = 2, 1, 1, 1, 3
    net = RecognitionNet(O, P, D, H, seed=3)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.from_numpy(rng.normal(scale=0.7, size=p.shape)))
    Y, A = rng.normal(size=(T, O)), rng.normal(size=(T, P))
    q = net.encode(torch.from_numpy(Y), torch.from_numpy(A))
    inp = np.concatenate([Y, A], 1)
    cells = {}
    for name in ("fwd", "bwd"):
        c = getattr(net, name)
        cells[name] = tuple(p.detach().numpy() for p in (c.W, c.U, c.b))
    hf, h = [], np.zeros(H)
    for t in range(T):
        h = gru_oracle(*cells["fwd"], h, inp[t])
        hf.append(h)
    hb, h = [None] * T, np.zeros(H)
    for t in reversed(range(T)):
        h = gru_oracle(*cells["bwd"], h, inp[t])
        hb[t] = h

    def affine(head, v):
        return head.weight.detach().numpy() @ v + head.bias.detach().numpy()

    for t in range(T):
        both = np.concatenate([hf[t], hb[t]])
        assert float(q.A[t, 0, 0]) == pytest.approx(affine(net.head_A, both)[0], abs=1e-12)
        l_raw = affine(net.head_L, both)[0]
        assert float(q.L[t, 0, 0]) == pytest.approx(math.log1p(math.exp(l_raw)), abs=1e-12)
    init = affine(net.head_init, hb[0])
    assert float(q.m0[0]) == pytest.approx(init[0], abs=1e-12)
    assert float(q.L0[0, 0]) == pytest.approx(math.log1p(math.exp(init[1])), abs=1e-12)


def test_reversal_swaps_streams(rng):
    net = RecognitionNet(2, 1, 2, 5, seed=1)
    with torch.no_grad():
        net.bwd.W.copy_(net.fwd.W)
        net.bwd.U.copy_(net.fwd.U)
        net.bwd.b.copy_(net.fwd.b)
    x = torch.from_numpy(rng.normal(size=(1, 6, 3)))
    hf, hb = net.hidden_states(x)
    hf_r, hb_r = net.hidden_states(torch.flip(x, [1]))
    assert torch.allclose(hf_r, torch.flip(hb, [1]), atol=1e-14)
    assert torch.allclose(hb_r, torch.flip(hf, [1]), atol=1e-14)


def test_parameter_count_independent_of_length(rng):
    net = RecognitionNet(2, 1, 3, 4)
    n = sum(p.numel() for p in net.parameters())
    for T in (1, 7, 40):
        net.encode(torch.from_numpy(rng.normal(size=(3, T, 2))), torch.from_numpy(rng.normal(size=(3, T, 1))))
    assert n == sum(p.numel() for p in net.parameters())
    H, D, In = 4, 3, 3
    expected = 2 * (3 * H * In + 3 * H * H + 3 * H) + (2 * H + 1) * D * D + (2 * H + 1) * 6 + (H + 1) * (D + 6)
    assert n == expected


def test_batch_equals_individual(rng):
    net = RecognitionNet(1, 0, 2, 3, seed=2)
    Y = torch.from_numpy(rng.normal(size=(4, 5, 1)))
    q = net.encode(Y)
    for i in range(4):
        qi = net.encode(Y[i])
        assert torch.allclose(q.A[i], qi.A) and torch.allclose(q.m0[i], qi.m0)


def test_diagonals_positive_for_any_input(rng):
    net = RecognitionNet(2, 0, 3, 4)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.from_numpy(rng.normal(scale=3.0, size=p.shape)))
    q = net.encode(torch.from_numpy(rng.normal(scale=10, size=(2, 8, 2))))
    assert bool((torch.diagonal(q.L, dim1=-2, dim2=-1) > 0).all())
    assert bool((torch.diagonal(q.L0, dim1=-2, dim2=-1) > 0).all())


def test_standardisation_applied(rng):
    net = RecognitionNet(1, 0, 1, 3)
    Y = torch.from_numpy(rng.normal(loc=5.0, scale=3.0, size=(2, 4, 1)))
    ref = net.encode((Y - 5.0) / 3.0)
    net.set_standardisation([5.0], [3.0])
    out = net.encode(Y)
    assert torch.allclose(ref.A, out.A) and torch.allclose(ref.m0, out.m0)


def test_offset_head_optional(rng):
    assert RecognitionNet(1, 0, 2, 3).encode(torch.zeros(3, 1)).b is None
    q = RecognitionNet(1, 0, 2, 3, offset=True).encode(torch.zeros(3, 1))
    assert q.b.shape == (3, 2)


def test_input_validation():
    net = RecognitionNet(2, 1, 1, 3)
    with pytest.raises(ValueError):
        net.encode(torch.zeros(4, 3), torch.zeros(4, 1))
    with pytest.raises(ValueError):
        net.encode(torch.zeros(4, 2), torch.zeros(3, 1))
    with pytest.raises(ValueError):
        net.encode(torch.zeros(0, 2), torch.zeros(0, 1))


def test_initial_noise_scale():
    net = RecognitionNet(1, 0, 2, 3, init_transition_std=0.25)
    q = net.encode(torch.zeros(2, 1))
    assert float(softplus(net.head_L.bias[0])) == pytest.approx(0.25)
    assert bool((torch.diagonal(q.L, dim1=-2, dim2=-1) > 0).all())
