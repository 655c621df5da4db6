import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import unit_rows
from fend.numeric import grad_check
from fend.pcl import (ContractError, FeatureBank, PCLConfig, Projection, bank_update, loss_instance, loss_proto,
                      protonce)


def t(x, grad=False):
    return torch.tensor(np.asarray(x), dtype=torch.float64, requires_grad=grad)


def random_setup(seed, r=6, d=5, levels=(2, 3)):
    rng = np.random.default_rng(seed)
    feats = unit_rows(rng.normal(size=(r, d)))
    assign = np.stack([rng.integers(0, k, size=r) for k in levels], 1)
    protos = [unit_rows(rng.normal(size=(k, d))) * rng.uniform(0.3, 1.0) for k in levels]
    dens = [rng.uniform(0.05, 0.5, size=k) for k in levels]
    return feats, assign, protos, dens


def test_instance_two_identical_same_cluster():
    f = t([[1.0, 0.0], [1.0, 0.0]])
    assert loss_instance(f, [0, 0], tau=1.0).item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_instance_no_positives():
    f = t([[1.0, 0.0], [0.0, 1.0]])
    assert loss_instance(f, [0, 1], tau=0.1).item() == 0.0


def test_instance_needs_two():
    with pytest.raises(ContractError):
        loss_instance(t([[1.0, 0.0]]), [0])


@pytest.mark.parametrize("r", [2, 3, 5, 8])
def test_instance_collapsed(r):
    f = t(np.tile([0.6, 0.8], (r, 1)))
    assert loss_instance(f, [0] * r, tau=0.1).item() == pytest.approx(r * math.log(r), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 8))
def test_instance_matches_oracle(seed, r):
    rng = np.random.default_rng(seed)
    feats = unit_rows(rng.normal(size=(r, 4)))
    ids = rng.integers(0, 3, size=r)
    active = rng.random(r) < 0.7
    tau = float(rng.uniform(0.05, 1.0))
    got = loss_instance(t(feats), ids, tau, active).item()
    assert got == pytest.approx(oracles.instance_loss(feats.tolist(), ids.tolist(), tau, active.tolist()),
                                abs=1e-9)


def test_proto_orthogonal_example():
    f = t([[1.0, 0.0]])
    protos = [np.array([[1.0, 0.0], [0.0, 1.0]])]
    dens = [np.array([1.0, 1.0])]
    got = loss_proto(f, [[0]], protos, dens).item()
    assert got == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)


def test_proto_equal_logits_scale_free():
    f = t([[0.0, 1.0]])
    protos = [np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])]
    a = loss_proto(f, [[1]], protos, [np.ones(3)]).item()
    b = loss_proto(f, [[1]], protos, [np.full(3, 7.0)]).item()
    assert a == pytest.approx(math.log(3), abs=1e-12) and b == pytest.approx(a, abs=1e-12)


def test_proto_missing_assignment():
    f, assign, protos, dens = random_setup(0)
    assign[2, 1] = -1
    with pytest.raises(ContractError):
        loss_proto(t(f), assign, protos, dens)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 8))
def test_proto_matches_oracle(seed, r):
    f, assign, protos, dens = random_setup(seed, r=r)
    active = np.random.default_rng(seed + 1).random(r) < 0.7
    got = loss_proto(t(f), assign, protos, dens, active).item()
    want = oracles.proto_loss(f.tolist(), assign.tolist(), [p.tolist() for p in protos],
                              [d.tolist() for d in dens], active.tolist())
    assert got == pytest.approx(want, abs=1e-9)


def test_protonce_sum_and_degenerate():
    f, assign, protos, dens = random_setup(3)
    total = protonce(t(f), assign, protos, dens, 0.1).item()
    parts = loss_instance(t(f), assign[:, -1], 0.1).item() + loss_proto(t(f), assign, protos, dens).item()
    assert total == pytest.approx(parts, abs=1e-12)
    f2 = t([[1.0, 0.0], [0.0, 1.0]])
    assert protonce(f2, np.array([[0], [1]]), [], [], 0.1).item() == 0.0


def test_losses_permutation_invariant():
    f, assign, protos, dens = random_setup(7, r=8)
    perm = np.random.default_rng(1).permutation(8)
    a = protonce(t(f), assign, protos, dens).item()
    b = protonce(t(f[perm]), assign[perm], protos, dens).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_protonce_grad_check():
    f, assign, protos, dens = random_setup(11, r=6, levels=(2, 3))
    x = t(np.random.default_rng(2).normal(size=(6, 5)), grad=True)
    err = grad_check(lambda: protonce(x / x.norm(dim=1, keepdim=True), assign, protos, dens, 0.1), [x])
    assert err < 1e-4


def test_projection_unit_norm_and_grad():
    torch.manual_seed(0)
    proj = Projection(7, 4).double()
    v = t(np.random.default_rng(0).normal(size=(5, 7)), grad=True)
    out = proj(v)
    np.testing.assert_allclose(out.norm(dim=1).detach().numpy(), 1.0, atol=1e-9)
    assert grad_check(lambda: (proj(v) * torch.arange(4.0, dtype=torch.float64)).sum(),
                      [v, proj.fc.weight, proj.fc.bias]) < 1e-4
    with torch.no_grad():
        proj.fc.weight.zero_()
        proj.fc.bias.zero_()
    assert torch.isfinite(proj(v)).all()


def make_bank(beta=0.9):
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(10, 3))
    assign = np.stack([np.arange(10) % 2, np.arange(10) % 3], 1)
    return FeatureBank(np.arange(100, 110), feats, assign, [2, 3], PCLConfig(momentum_beta=beta))


def test_bank_norms_and_prototypes():
    bank = make_bank()
    np.testing.assert_allclose(np.linalg.norm(bank.feats, axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(bank.prototypes[0][1], bank.feats[1::2].mean(0), atol=1e-12)
    new = np.random.default_rng(5).normal(size=(3, 3))
    bank_update(bank, [101, 104, 109], new)
    np.testing.assert_allclose(np.linalg.norm(bank.feats, axis=1), 1.0, atol=1e-9)


def test_bank_beta_zero_takes_latest():
    bank = make_bank(beta=0.0)
    new = np.array([[3.0, 0.0, 4.0]])
    bank.update([105], new)
    np.testing.assert_allclose(bank.feats[5], [0.6, 0.0, 0.8], atol=1e-12)


def test_bank_beta_near_one_keeps_old():
    bank = make_bank(beta=0.999999)
    before = bank.feats[2].copy()
    bank.update([102], np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_allclose(bank.feats[2], before, atol=1e-5)


def test_bank_unknown_id():
    with pytest.raises(ContractError):
        make_bank().update([5], np.ones((1, 3)))


def test_bank_csv(tmp_path):
    p = tmp_path / "bank.csv"
    make_bank().write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "sample_id,f0,f1,f2" and len(lines) == 11
