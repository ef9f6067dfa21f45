import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holstein_rnn.datagen import ScalingCoefficients
from holstein_rnn.dynamics import LatticeState, eval_rhs
from holstein_rnn.errors import DegenerateDataError, DivergenceError, InvalidInputError, StorageError
from holstein_rnn.models import (
    Model,
    ModelConfig,
    describe,
    embed_state,
    extract_state,
    load_checkpoint,
    model_step,
    parc_differentiate,
    parc_integrate,
    parc_step,
    rollout,
    rollout_batch,
    save_checkpoint,
    standard_step,
    support_mask,
)
from holstein_rnn.tensor.autograd import Tensor


def _state(rng, L=16):
    A = rng.normal(size=(L, L)) + 1j * rng.normal(size=(L, L))
    return (A + A.conj().T) / (4 * L), rng.normal(size=L), rng.normal(size=L)


def _zero_head(model, net):
    model.nets[net].head_w.data[...] = 0
    model.nets[net].head_b.data[...] = 0


def test_embed_examples():
    L = 6
    t = embed_state(np.eye(L) / 2, np.zeros(L), np.zeros(L))
    assert t.shape == (4, L, L)
    assert np.array_equal(t[0], np.eye(L) / 2) and not t[1:].any()
    t = embed_state(1j * np.ones((L, L)), np.zeros(L), np.zeros(L))
    assert not t[0].any()
    with pytest.raises(InvalidInputError):
        embed_state(np.eye(L), np.zeros(L + 1), np.zeros(L))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 2**31 - 1))
def test_embed_extract_round_trip(L, seed):
    rng = np.random.default_rng(seed)
    rho = rng.normal(size=(L, L)) + 1j * rng.normal(size=(L, L))
    Q, P = rng.normal(size=L), rng.normal(size=L)
    t = embed_state(rho, Q, P)
    assert np.all(t[2][~np.eye(L, dtype=bool)] == 0) and np.all(t[3][~np.eye(L, dtype=bool)] == 0)
    r2, Q2, P2 = extract_state(t)
    assert np.array_equal(r2, rho) and np.array_equal(Q2, Q) and np.array_equal(P2, P)


def test_extract_discards_offdiagonal_and_zero():
    L = 4
    t = embed_state(np.zeros((L, L)), np.arange(4.0), np.ones(4))
    t2 = t.copy()
    t2[2] += 5 * (1 - np.eye(L))
    assert np.array_equal(extract_state(t2)[1], extract_state(t)[1])
    rho, Q, P = extract_state(np.zeros((4, L, L)))
    assert not rho.any() and not Q.any() and not P.any()
    # no Hermitization of the rho channel
    t3 = np.zeros((4, L, L))
    t3[0, 0, 1] = 1.0
    assert extract_state(t3)[0][1, 0] == 0


def test_parameter_counts():
    sc = ScalingCoefficients.ones()
    assert Model(ModelConfig(), sc).n_parameters() == 6232
    assert Model(ModelConfig(variant="parc"), sc).n_parameters() == 12464
    assert 4000 < Model(ModelConfig(), sc).n_parameters() < 8000


def test_config_and_scaling_validation():
    with pytest.raises(InvalidInputError):
        ModelConfig(variant="lstm")
    with pytest.raises(InvalidInputError):
        ModelConfig(kernel=4)
    with pytest.raises(DegenerateDataError):
        Model(ModelConfig(), ScalingCoefficients(1, 1, 0, 1, 1, 1, 1, 1, 1))


def test_zero_head_is_identity_step(rng):
    m = Model(ModelConfig(dtype="float64"), ScalingCoefficients.ones())
    _zero_head(m, "net")
    rho, Q, P = _state(rng)
    r2, Q2, P2 = standard_step(m, rho, Q, P)
    assert np.array_equal(r2, rho) and np.array_equal(Q2, Q) and np.array_equal(P2, P)
    p = Model(ModelConfig(variant="parc", dtype="float64"), ScalingCoefficients.ones())
    _zero_head(p, "integrator")
    r3, _, _ = parc_step(p, rho, Q, P)
    assert np.array_equal(r3, rho)
    _zero_head(p, "differentiator")
    d = parc_differentiate(p, rho, Q, P)
    assert all(not np.any(x) for x in d)


def test_unit_scaling_is_raw_network_path(rng):
    m = Model(ModelConfig(dtype="float64"), ScalingCoefficients.ones())
    rho, Q, P = _state(rng)
    x = embed_state(rho, Q, P)
    raw = m.nets["net"](Tensor(x[None])).data[0] * support_mask(16, np.float64)
    r2, Q2, P2 = standard_step(m, rho, Q, P)
    ref = extract_state(x + raw)
    assert np.array_equal(r2, ref[0]) and np.array_equal(Q2, ref[1]) and np.array_equal(P2, ref[2])


def test_scaling_enters_as_documented(rng):
    sc = ScalingCoefficients(2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 0.5, 0.25, 0.125)
    m = Model(ModelConfig(dtype="float64"), sc)
    rho, Q, P = _state(rng)
    x = embed_state(rho, Q, P)
    inp = x / np.array([2.0, 2.0, 3.0, 5.0])[:, None, None]
    raw = m.nets["net"](Tensor(inp[None])).data[0]
    upd = raw * np.array([0.5, 0.5, 0.25, 0.125])[:, None, None] * support_mask(16, np.float64)
    got = standard_step(m, rho, Q, P)
    ref = extract_state(x + upd)
    for a, b in zip(got, ref):
        assert np.allclose(a, b, atol=1e-14)


def test_parc_operators_compose(rng):
    sc = ScalingCoefficients(2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 0.5, 0.25, 0.125)
    m = Model(ModelConfig(variant="parc", dtype="float64"), sc)
    rho, Q, P = _state(rng)
    d = parc_differentiate(m, rho, Q, P)
    assert d[0].shape == rho.shape and d[1].shape == Q.shape and d[2].shape == P.shape
    u = parc_integrate(m, *d)
    step = parc_step(m, rho, Q, P)
    assert np.allclose(step[0], rho + u[0], atol=1e-14)
    assert np.allclose(step[1], Q + u[1], atol=1e-14)
    assert np.allclose(step[2], P + u[2], atol=1e-14)
    # differentiator output carries the d-coefficients
    inp = embed_state(rho, Q, P) / np.array([2.0, 2.0, 3.0, 5.0])[:, None, None]
    raw = m.nets["differentiator"](Tensor(inp[None])).data[0]
    assert np.allclose(np.diag(raw[2]) * 11.0, d[1], atol=1e-14)


def test_parc_zero_derivative_zero_bias_gives_zero_update():
    m = Model(ModelConfig(variant="parc", dtype="float64"), ScalingCoefficients.ones())
    L = 16
    for p in m.nets["integrator"].parameters():
        if p.name.endswith("bias"):
            p.data[...] = 0
    u = parc_integrate(m, np.zeros((L, L), complex), np.zeros(L), np.zeros(L))
    assert all(not np.any(x) for x in u)


def test_variant_guards(rng):
    rho, Q, P = _state(rng)
    s = Model(ModelConfig(), ScalingCoefficients.ones())
    p = Model(ModelConfig(variant="parc"), ScalingCoefficients.ones())
    with pytest.raises(InvalidInputError):
        parc_step(s, rho, Q, P)
    with pytest.raises(InvalidInputError):
        standard_step(p, rho, Q, P)
    with pytest.raises(InvalidInputError):
        standard_step(s, *_state(rng, L=8))
    assert np.allclose(model_step(p, rho, Q, P)[1], parc_step(p, rho, Q, P)[1])


@pytest.mark.parametrize("variant", ["standard", "parc"])
def test_translation_equivariance_single_precision(variant, rng):
    m = Model(ModelConfig(variant=variant), ScalingCoefficients(0.8, 3.0, 0.6, 0.1, 0.4, 0.2, 0.05, 0.2, 0.1))
    rho, Q, P = _state(rng)
    base = model_step(m, rho, Q, P)
    for s in (1, 5, 11):
        out = model_step(m, np.roll(rho, (s, s), axis=(0, 1)), np.roll(Q, s), np.roll(P, s))
        assert np.max(np.abs(out[0] - np.roll(base[0], (s, s), axis=(0, 1)))) < 1e-4
        assert np.max(np.abs(out[1] - np.roll(base[1], s))) < 1e-4
        assert np.max(np.abs(out[2] - np.roll(base[2], s))) < 1e-4


def test_eval_determinism_and_rollout_composition(rng):
    m = Model(ModelConfig(variant="parc"), ScalingCoefficients(0.8, 3.0, 0.6, 0.1, 0.4, 0.2, 0.05, 0.2, 0.1))
    rho, Q, P = _state(rng)
    a = model_step(m, rho, Q, P)
    b = model_step(m, rho, Q, P)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    full = rollout(m, (rho, Q, P), 7)
    first = rollout(m, (rho, Q, P), 3)
    rest = rollout(m, (first.rho[-1], first.Q[-1], first.P[-1]), 4)
    assert np.array_equal(full.rho[3:], rest.rho) and np.array_equal(full.Q[:4], first.Q)
    assert len(rollout(m, (rho, Q, P), 0)) == 1
    assert np.array_equal(rollout(m, (rho, Q, P), 0).Q[0], Q)


def test_rollout_batch_shapes(rng):
    m = Model(ModelConfig(), ScalingCoefficients.ones())
    states = [_state(rng) for _ in range(3)]
    rhos, Qs, Ps = rollout_batch(m, *(np.stack(x) for x in zip(*states)), 5)
    assert rhos.shape == (3, 6, 16, 16) and Qs.shape == (3, 6, 16)
    with pytest.raises(InvalidInputError):
        rollout_batch(m, *(np.stack(x) for x in zip(*states)), -1)


def test_rollout_divergence_names_step(rng):
    m = Model(ModelConfig(), ScalingCoefficients.ones())
    m.nets["net"].head_b.data[0] = np.nan
    rho, Q, P = _state(rng)
    with pytest.raises(DivergenceError) as exc:
        rollout(m, (rho, Q, P), 50)
    assert exc.value.step == 1 and "step 1" in str(exc.value)


def test_checkpoint_round_trip(tmp_path, rng):
    sc = ScalingCoefficients(0.8, 3.0, 0.6, 0.1, 0.4, 0.2, 0.05, 0.2, 0.1)
    m = Model(ModelConfig(variant="parc", hidden_channels=5, n_blocks=1), sc)
    for p in m.parameters():
        p.data = p.data + rng.normal(size=p.shape).astype(np.float32)
    path = save_checkpoint(m, tmp_path / "m.ckpt", {"note": "x"})
    back, extra = load_checkpoint(path)
    assert extra == {"note": "x"} and back.scaling == sc and back.config == m.config
    for k, v in m.state_dict().items():
        assert np.array_equal(back.state_dict()[k], v)
    rho, Q, P = _state(rng)
    assert np.array_equal(parc_step(m, rho, Q, P)[0], parc_step(back, rho, Q, P)[0])
    assert '"n_parameters"' in describe(m)
    raw = path.read_bytes()
    path.write_bytes(raw[:-20])
    with pytest.raises(StorageError):
        load_checkpoint(path)


def test_load_state_dict_validation():
    m = Model(ModelConfig(), ScalingCoefficients.ones())
    sd = m.state_dict()
    sd.pop(next(iter(sd)))
    with pytest.raises(InvalidInputError):
        m.load_state_dict(sd)


def test_scaled_training_inputs_are_bounded(shallow_small, shallow_scaling):
    m = Model(ModelConfig(dtype="float64"), shallow_scaling)
    for tr in shallow_small.subset("train"):
        h = m.normalize_state(Tensor(embed_state(tr.rho, tr.Q, tr.P))).data
        assert np.max(np.abs(h)) <= 1.0 + 1e-12


def test_midpoint_rule_matches_true_update(deep_small):
    # one prediction step is well approximated by dt times the exact midpoint RHS
    params, dt = deep_small.params, deep_small.delta_t
    for tr in deep_small.trajectories:
        k = len(tr) // 2
        mid = LatticeState(tr.mid_Q[k], tr.mid_P[k], tr.mid_rho[k])
        d = eval_rhs(mid, params)
        for true, der in ((np.diff(tr.Q, axis=0)[k], d.dQ), (np.diff(tr.P, axis=0)[k], d.dP)):
            assert np.linalg.norm(true - dt * der) / np.linalg.norm(true) < 0.2
