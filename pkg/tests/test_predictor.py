import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from fend.numeric import grad_check
from fend.predictor import (ContractError, HyperLSTMCell, HyperZ, Predictor, PredictorConfig, ewta_k, ewta_loss,
                            ewta_per_sample, head_errors, hyperlstm_step)

SMALL = dict(enc_hidden=5, dec_hidden=4, dec_input=3, hyper_hidden=6, z_dim=3, K=3, d_proj=4, T_pred=4)


def ref_ln(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def sig(x):
    return 1 / (1 + np.exp(-x))


def reference_ln_lstm(W_h, W_x, b0, x, h, m):
    """Per-gate loops over numpy weights (gate order i, g, f, o)."""
    pre = [ref_ln(W_h[g] @ h + W_x[g] @ x + b0[g]) for g in range(4)]
    i, g, f, o = pre
    m_new = sig(f) * m + sig(i) * np.tanh(g)
    return sig(o) * np.tanh(m_new), m_new


def identity_z(cell: HyperLSTMCell, rng):
    """z vectors and hyper weights giving d_h = d_x = 1 and zero bias adjustment."""
    dz = cell.z_dim
    z_h = rng.normal(size=dz)
    z_x = rng.normal(size=dz)
    with torch.no_grad():
        cell.W_hz.copy_(torch.as_tensor(np.broadcast_to(z_h / (z_h @ z_h), (4, cell.n_h, dz)).copy()))
        cell.W_xz.copy_(torch.as_tensor(np.broadcast_to(z_x / (z_x @ z_x), (4, cell.n_h, dz)).copy()))
        cell.W_bz.copy_(torch.as_tensor(rng.normal(size=(4, cell.n_h, dz))))
    return HyperZ(torch.as_tensor(z_h), torch.as_tensor(z_x), torch.zeros(4, dz, dtype=torch.float64))


def test_identity_modulation_matches_ln_lstm():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    cell = HyperLSTMCell(6, 8, 5)
    with torch.no_grad():
        cell.b0.copy_(torch.as_tensor(rng.normal(size=(4, 8))))
    z = identity_z(cell, rng)
    d_h, d_x, b = cell.modulation(z)
    np.testing.assert_allclose(d_h.detach().numpy(), 1.0, atol=1e-14)
    Wh, Wx, b0 = (p.detach().numpy() for p in (cell.W_h, cell.W_x, cell.b0))
    worst = 0.0
    for _ in range(100):
        x, h, m = rng.normal(size=6), rng.normal(size=8), rng.normal(size=8)
        got_h, got_m = hyperlstm_step(cell, z, *(torch.as_tensor(a) for a in (x, h, m)))
        want_h, want_m = reference_ln_lstm(Wh, Wx, b0, x, h, m)
        worst = max(worst, np.abs(got_h.detach().numpy() - want_h).max(), np.abs(got_m.detach().numpy() - want_m).max())
    assert worst < 1e-12


def test_zero_modulation_halves_cell():
    cell = HyperLSTMCell(3, 4, 2)
    with torch.no_grad():
        cell.b0.zero_()
    z = HyperZ(torch.zeros(2, dtype=torch.float64), torch.zeros(2, dtype=torch.float64),
               torch.zeros(4, 2, dtype=torch.float64))
    m_prev = torch.tensor([1.0, -2.0, 0.5, 4.0], dtype=torch.float64)
    x, h = torch.randn(3, dtype=torch.float64), torch.randn(4, dtype=torch.float64)
    pre = cell.preactivations(cell.modulation(z), x, h)
    assert pre.abs().max() == 0.0
    _, m = hyperlstm_step(cell, z, x, h, m_prev)
    np.testing.assert_allclose(m.detach().numpy(), 0.5 * m_prev.numpy(), atol=1e-15)


def test_preactivations_zero_mean():
    torch.manual_seed(3)
    cell = HyperLSTMCell(4, 9, 3)
    z = HyperZ(torch.randn(3, dtype=torch.float64), torch.randn(3, dtype=torch.float64),
               torch.randn(4, 3, dtype=torch.float64))
    pre = cell.preactivations(cell.modulation(z), torch.randn(4, dtype=torch.float64),
                              torch.randn(9, dtype=torch.float64))
    assert pre.mean(-1).abs().max() < 1e-6


def test_hyperlstm_step_grad_check():
    torch.manual_seed(1)
    cell = HyperLSTMCell(3, 4, 2)
    z = HyperZ(*(torch.randn(*s, dtype=torch.float64, requires_grad=True) for s in [(2,), (2,), (4, 2)]))
    x, h, m = (torch.randn(n, dtype=torch.float64, requires_grad=True) for n in (3, 4, 4))
    target = torch.randn(4, dtype=torch.float64)

    def f():
        h1, m1 = hyperlstm_step(cell, z, x, h, m)
        return ((h1 - target) ** 2).sum() + (m1 ** 2).sum()

    assert grad_check(f, list(cell.parameters()) + list(z) + [x, h, m]) < 1e-4


def test_default_shapes():
    model = Predictor(PredictorConfig())
    obs = torch.zeros(3, 8, 2, dtype=torch.float64)
    obs[:, :, 0] = torch.arange(-7.0, 1.0) * 0.5
    pred, proj, v = model(obs)
    assert pred.shape == (3, 20, 12, 2)
    assert v.shape == (3, 128) and proj.shape == (3, 64)
    z = model.hypernet(v)
    assert z.z_h.shape == (3, 16) and z.z_x.shape == (3, 16) and z.z_b.shape == (3, 4, 16)


def test_zero_params_give_origin():
    model = Predictor(PredictorConfig(**SMALL))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    pred, _, _ = model(torch.randn(2, 8, 2, dtype=torch.float64))
    assert pred.abs().max() == 0.0
    z = model.hypernet(torch.randn(2, 5, dtype=torch.float64))
    assert all(t.abs().max() == 0.0 for t in z)


def test_hyper_embed_varies_with_input():
    torch.manual_seed(0)
    model = Predictor(PredictorConfig(**SMALL))
    z1 = model.hypernet(torch.randn(5, dtype=torch.float64))
    z2 = model.hypernet(torch.randn(5, dtype=torch.float64))
    assert not torch.allclose(z1.z_h, z2.z_h)


def test_encode_deterministic_and_no_leak():
    torch.manual_seed(0)
    model = Predictor(PredictorConfig(**SMALL))
    obs = torch.randn(4, 8, 2, dtype=torch.float64)
    v1, _ = model.encode(obs)
    model.encode(torch.randn(9, 8, 2, dtype=torch.float64))
    v2, _ = model.encode(obs)
    assert torch.equal(v1, v2)
    single, _ = model.encode(obs[2:3])
    torch.testing.assert_close(single[0], v1[2], rtol=0, atol=1e-14)


def test_heads_independent():
    torch.manual_seed(0)
    model = Predictor(PredictorConfig(**SMALL))
    obs = torch.randn(2, 8, 2, dtype=torch.float64)
    with torch.no_grad():
        before = model(obs)[0].clone()
        model.head_W[1] += 0.5
        after = model(obs)[0]
    assert torch.equal(before[:, [0, 2]], after[:, [0, 2]])
    assert not torch.equal(before[:, 1], after[:, 1])


def test_encoder_gradient_check():
    torch.manual_seed(2)
    model = Predictor(PredictorConfig(**SMALL))
    obs = torch.randn(2, 8, 2, dtype=torch.float64)
    assert grad_check(lambda: model.encode(obs)[0].pow(2).sum() + model.encode(obs)[1].sum(),
                      list(model.encoder.parameters()) + list(model.projection.parameters())) < 1e-4


@pytest.mark.parametrize("use_hyper", [True, False])
def test_min_ade_not_above_head0(use_hyper):
    torch.manual_seed(0)
    model = Predictor(PredictorConfig(**SMALL, use_hyper=use_hyper))
    pred, _, _ = model(torch.randn(1, 8, 2, dtype=torch.float64))
    gt = torch.randn(4, 2, dtype=torch.float64)
    ade, _ = head_errors(pred[0], gt)
    assert ade.min() <= ade[0]


def test_ewta_examples():
    gt = torch.randn(5, 2, dtype=torch.float64)
    pred = torch.randn(4, 5, 2, dtype=torch.float64)
    _, mse = head_errors(pred, gt)
    assert ewta_loss(pred, gt, 4).item() == pytest.approx(mse.mean().item(), abs=1e-12)
    pred[2] = gt
    assert ewta_loss(pred, gt, 1).item() == 0.0
    assert ewta_loss(pred, gt, 1) <= ewta_loss(pred, gt, 4)
    with pytest.raises(ContractError):
        ewta_loss(pred, gt, 5)
    with pytest.raises(ContractError):
        ewta_loss(pred, gt, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 5), st.integers(2, 6))
def test_ewta_matches_oracle(seed, K, T):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(K, T, 2)), rng.normal(size=(T, 2))
    k = int(rng.integers(1, K + 1))
    got = ewta_loss(torch.as_tensor(pred), torch.as_tensor(gt), k).item()
    assert got == pytest.approx(oracles.ewta(pred.tolist(), gt.tolist(), k), abs=1e-9)


def test_ewta_gradient_only_to_winners():
    pred = torch.randn(4, 3, 2, dtype=torch.float64, requires_grad=True)
    gt = torch.zeros(3, 2, dtype=torch.float64)
    ewta_loss(pred, gt, 2).backward()
    ade, _ = head_errors(pred.detach(), gt)
    losers = ade.argsort()[2:]
    assert pred.grad[losers].abs().max() == 0.0


def test_ewta_schedule():
    assert [ewta_k(e, 20, 2) for e in range(0, 14, 2)] == [20, 10, 5, 2, 1, 1, 1]
