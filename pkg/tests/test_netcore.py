import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tce import netcore as nc
from tce.errors import ContractViolation, FormatError, NumericFailure

from conftest import architectures, grad_rel_error, random_batch


def silu_ref(x):
    return x / (1.0 + np.exp(-x))


def test_zero_block_affine_returns_bias(rng):
    spec = nc.MlpSpec(3, 4, 0, 2)
    params = [np.zeros(s) for s in spec.param_shapes()]
    # output layer bias
    params[-1] = np.array([0.7, -1.3])
    out = nc.forward(spec, params, rng.normal(size=(6, 3)))
    assert np.array_equal(out, np.tile([0.7, -1.3], (6, 1)))


def test_residual_block_with_zero_inner_weights_is_identity(rng):
    spec = nc.MlpSpec(2, 3, 1, 2)
    params = list(nc.init_params(spec, rng))
    params[2] = np.zeros((3, 3))
    params[3] = np.zeros(3)
    params[4] = np.zeros((3, 3))
    params[5] = np.zeros(3)
    x = rng.normal(size=(4, 2))
    h = x @ params[0] + params[1]
    assert np.allclose(nc.forward(spec, params, x), h @ params[6] + params[7], rtol=0, atol=1e-14)


def test_forward_matches_hand_evaluation():
    spec = nc.MlpSpec(2, 3, 1, 2)
    p = nc.init_params(spec, np.random.default_rng(7))
    x = np.array([[0.5, -1.0], [2.0, 0.25]])
    h = x @ p[0] + p[1]
    h = h + silu_ref(h @ p[2] + p[3]) @ p[4] + p[5]
    expected = h @ p[6] + p[7]
    assert np.allclose(nc.forward(spec, p, x), expected, rtol=1e-13, atol=1e-14)


def test_embedding_branch_hand_evaluation(rng):
    spec = nc.MlpSpec(2, 3, 0, 1, (nc.EmbedSpec("time", 1, (2,)),))
    p = nc.init_params(spec, rng)
    x = rng.normal(size=(3, 3))
    e = silu_ref(x[:, 2:] @ p[0] + p[1])
    h = np.concatenate([x[:, :2], e], axis=1) @ p[2] + p[3]
    assert np.allclose(nc.forward(spec, p, x), h @ p[4] + p[5], rtol=1e-13, atol=1e-14)


def test_trunk_with_branch_biases_matches_forward(rng):
    spec = architectures()["cond-score"]
    p = nc.init_params(spec, rng)
    x = rng.normal(size=(7, spec.total_input_dim))
    extra = nc.embed_bias(spec, p, 0, x[:, 4:5]) + nc.embed_bias(spec, p, 1, x[:, 5:])
    assert np.allclose(nc.forward_trunk(spec, p, x[:, :4], extra), nc.forward(spec, p, x), atol=1e-12)


def test_shape_mismatch_rejected(rng):
    spec = nc.MlpSpec(3, 4, 1, 2)
    with pytest.raises(ContractViolation):
        nc.forward(spec, nc.init_params(spec, rng), np.zeros((2, 4)))
    with pytest.raises(ContractViolation):
        nc.MlpSpec(0, 4, 1, 2)
    with pytest.raises(ContractViolation):
        nc.MlpSpec(1, 4, -1, 2)


def test_linear_model_loss_and_derivative():
    # y = w x with w = 2, x = 1, target 0: loss 4, dL/dw 4
    spec = nc.MlpSpec(1, 1, 0, 1)
    params = (np.array([[2.0]]), np.array([0.0]), np.array([[1.0]]), np.array([0.0]))
    loss, grads = nc.loss_and_grad(spec, params, {"inputs": np.array([[1.0]]), "targets": np.array([[0.0]])})
    assert loss == 4.0
    assert grads[0][0, 0] == 4.0


def test_stationary_point_of_constant_target(rng):
    spec = nc.MlpSpec(3, 4, 1, 2)
    p = list(nc.init_params(spec, rng))
    p[-2] = np.zeros_like(p[-2])
    p[-1] = np.array([0.3, -0.2])
    batch = {"inputs": rng.normal(size=(8, 3)), "targets": np.tile([0.3, -0.2], (8, 1))}
    loss, grads = nc.loss_and_grad(spec, p, batch)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


@pytest.mark.parametrize("name", sorted(architectures()))
@pytest.mark.parametrize("kind", ["mse", "dsm"])
def test_gradients_match_finite_differences(name, kind):
    spec = architectures()[name]
    rng = np.random.default_rng(hash((name, kind)) % 2**32)
    for _ in range(5):
        params = nc.init_params(spec, rng)
        assert grad_rel_error(spec, params, random_batch(spec, rng, kind), kind) <= 1e-4


def test_dsm_loss_value_hand_computed():
    spec = nc.MlpSpec(1, 1, 0, 1)
    params = (np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)), np.array([0.5]))
    batch = {"inputs": np.zeros((2, 1)), "noise": np.array([[1.0], [-1.0]]),
             "sigma": np.array([[0.5], [0.5]]), "scale": np.array([[2.0], [2.0]])}
    loss, _ = nc.loss_and_grad(spec, params, batch, "dsm")
    # residual sigma*scale*0.5 + z = 0.5 + z
    assert loss == pytest.approx((1.5**2 + 0.5**2) / 2, rel=1e-15)


def test_nonfinite_loss_reports_batch_index(rng):
    spec = nc.MlpSpec(2, 3, 0, 1)
    x = rng.normal(size=(4, 2))
    x[2, 0] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(NumericFailure) as err:
        nc.loss_and_grad(spec, nc.init_params(spec, rng), {"inputs": x, "targets": np.zeros((4, 1))})
    assert err.value.index == 2


def test_unknown_loss_kind_and_empty_batch(rng):
    spec = nc.MlpSpec(2, 3, 0, 1)
    p = nc.init_params(spec, rng)
    with pytest.raises(ContractViolation):
        nc.loss_and_grad(spec, p, {"inputs": np.zeros((1, 2)), "targets": np.zeros((1, 1))}, "huber")
    with pytest.raises(ContractViolation):
        nc.loss_and_grad(spec, p, {"inputs": np.zeros((0, 2)), "targets": np.zeros((0, 1))})


def test_adam_zero_gradient_leaves_params():
    p = (np.array([1.0, -2.0]),)
    st0 = nc.adam_init(p, lr=0.1)
    new, st1 = nc.adam_step(st0, p, (np.zeros(2),))
    assert np.array_equal(new[0], p[0])
    assert st1.t == 1


def test_adam_first_step_hand_values():
    lr, eps = 1e-3, 1e-8
    p = (np.array([0.5]),)
    new, st1 = nc.adam_step(nc.adam_init(p, lr=lr, eps=eps), p, (np.array([1.0]),))
    # m_hat = 1, v_hat = 1
    assert new[0][0] == pytest.approx(0.5 - lr * 1.0 / (1.0 + eps), rel=0, abs=1e-16)
    assert st1.m[0][0] == pytest.approx(0.1) and st1.v[0][0] == pytest.approx(0.001)


def scalar_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / ((v / (1 - b2**t)) ** 0.5 + eps)
    return p


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=6), st.floats(-5, 5))
def test_adam_matches_scalar_reference(gs, p0):
    params = (np.array([p0]),)
    state = nc.adam_init(params, lr=1e-3)
    for g in gs:
        params, state = nc.adam_step(state, params, (np.array([g]),))
    assert params[0][0] == pytest.approx(scalar_adam(p0, gs), rel=1e-12, abs=1e-15)
    assert state.t == len(gs)


def test_adam_shape_mismatch():
    p = (np.zeros(2),)
    with pytest.raises(ContractViolation):
        nc.adam_step(nc.adam_init(p), p, (np.zeros(3),))


def test_train_mse_fits_linear_map(rng):
    spec = nc.MlpSpec(2, 16, 1, 1)
    x = rng.normal(size=(256, 2))
    y = x @ np.array([[1.0], [-0.5]])
    params, losses = nc.train_mse(spec, nc.init_params(spec, rng), x, y, 600, rng, lr=3e-3)
    assert np.mean(losses[-50:]) < 0.1 * np.mean(losses[:50])


@pytest.mark.parametrize("name", sorted(architectures()))
def test_checkpoint_round_trip_bit_exact(tmp_path, name, rng):
    spec = architectures()[name]
    params = nc.init_params(spec, rng)
    path = tmp_path / "net.ckpt"
    nc.save_checkpoint(path, spec, params, seed=3, step=17, extra={"kind": "x"})
    spec2, params2, header = nc.load_checkpoint(path)
    assert spec2 == spec
    assert header["seed"] == 3 and header["step"] == 17 and header["extra"] == {"kind": "x"}
    assert all(a.tobytes() == b.tobytes() for a, b in zip(params, params2))
    assert nc.param_checksum(params) == nc.param_checksum(params2)
    nc.save_checkpoint(tmp_path / "again.ckpt", spec2, params2, seed=3, step=17, extra={"kind": "x"})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope" + b"\0" * 20)
    with pytest.raises(FormatError):
        nc.load_checkpoint(bad)


def test_flatten_round_trip(rng):
    spec = architectures()["cond-score"]
    p = nc.init_params(spec, rng)
    flat = nc.flatten(p)
    assert flat.size == spec.num_params()
    assert all(np.array_equal(a, b) for a, b in zip(p, nc.unflatten(spec, flat)))
    with pytest.raises(ContractViolation):
        nc.unflatten(spec, flat[:-1])
