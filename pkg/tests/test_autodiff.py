import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pcsod import autodiff as ad
from pcsod.autodiff import MlpSpec, SharedMLP, Tensor
from pcsod.gradcheck import check_function


def _leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_backward_of_sum_and_square():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor(np.arange(6.0), requires_grad=True)
    (ad.sum_(ad.mul(y, y)) * 0.5).backward()
    np.testing.assert_array_equal(y.grad, y.data)


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.mul(x, 2.0).backward()


def test_grads_accumulate_across_backward_calls():
    x = Tensor(np.ones(2), requires_grad=True)
    ad.sum_(x).backward()
    ad.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad
    assert ad.is_grad_enabled()


def test_concat_examples():
    rng = np.random.default_rng(0)
    a, b = _leaf(rng, 4, 2), _leaf(rng, 4, 3)
    c = ad.concat([a, b], axis=-1)
    assert c.shape == (4, 5)
    ad.sum_(c).backward()
    np.testing.assert_array_equal(a.grad, np.ones((4, 2)))
    np.testing.assert_array_equal(b.grad, np.ones((4, 3)))
    assert ad.concat([a], axis=-1) is a
    with pytest.raises(ValueError):
        ad.concat([a, _leaf(rng, 3, 2)], axis=-1)


def test_reduce_examples():
    nb = Tensor(np.array([[[1.0, 3.0], [5.0, 1.0]]]))
    np.testing.assert_array_equal(ad.reduce(nb, "mean_max").data, [[5, 3, 3, 2]])
    one = Tensor(np.array([[[2.0, -1.0]]]))
    for mode in ("mean", "max"):
        np.testing.assert_array_equal(ad.reduce(one, mode).data, [[2.0, -1.0]])
    att = ad.AttentiveScores(2, np.random.default_rng(0), np.float64)
    att.weight.data[:] = 0.0  # uniform scores
    np.testing.assert_allclose(ad.reduce(nb, "attentive", att).data, [[3.0, 2.0]], atol=1e-15)
    with pytest.raises(ValueError, match="unknown reduction"):
        ad.reduce(nb, "median")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31))
def test_reduce_ignores_neighbor_order(k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5, k, 4))
    perm = rng.permutation(k)
    att = ad.AttentiveScores(4, rng, np.float64)
    for mode in ad.REDUCTIONS:
        a = ad.reduce(Tensor(x), mode, att).data
        b = ad.reduce(Tensor(x[:, :, perm]), mode, att).data
        if mode == "max":
            np.testing.assert_array_equal(a, b)
        else:
            np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


def test_softmax_examples():
    np.testing.assert_array_equal(ad.softmax(Tensor(np.zeros(2)), axis=0).data, [0.5, 0.5])
    out = ad.softmax(Tensor(np.log([1.0, 2.0, 3.0])), axis=0).data
    np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-9, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_sums_to_one(row):
    x = np.array(row)
    out = ad.softmax(Tensor(x), axis=-1).data
    assert abs(out.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(out, oracles.softmax(row), atol=1e-12)


def test_cross_entropy_examples():
    z = Tensor(np.zeros((5, 2)))
    assert ad.cross_entropy(z, np.array([0, 1, 1, 0, 1])).item() == pytest.approx(math.log(2), abs=1e-15)
    confident = Tensor(np.array([[20.0, -20.0]]))
    assert ad.cross_entropy(confident, np.array([0])).item() == pytest.approx(0.0, abs=1e-15)


def test_cross_entropy_against_scalar_oracle():
    rng = np.random.default_rng(1)
    z = rng.normal(scale=3, size=(2, 64, 2))
    y = rng.integers(0, 2, (2, 64))
    got = ad.cross_entropy(Tensor(z), y).item()
    want = oracles.cross_entropy(z.reshape(-1, 2).tolist(), y.reshape(-1).tolist())
    assert got == pytest.approx(want, abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_cross_entropy_non_negative(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=10, size=(16, 2))
    assert ad.cross_entropy(Tensor(z), rng.integers(0, 2, 16)).item() >= 0.0


def test_identity_linear_layer():
    mlp = SharedMLP(MlpSpec((3, 3), (False,), (False,)), np.random.default_rng(0), np.float64)
    mlp.weights[0].data[:] = np.eye(3)
    mlp.biases[0].data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(7, 3))
    np.testing.assert_array_equal(ad.shared_mlp_forward(mlp.spec, mlp, Tensor(x)).data, x)


def test_shared_mlp_against_matrix_oracle():
    rng = np.random.default_rng(2)
    spec = MlpSpec((4, 6, 3), (False, False), (True, False))
    mlp = SharedMLP(spec, rng, np.float64)
    x = rng.normal(size=(10, 4))
    W1, W2 = (w.data.tolist() for w in mlp.weights)
    b1, b2 = (b.data.tolist() for b in mlp.biases)
    h = [[max(0.0, v + b1[j]) for j, v in enumerate(row)] for row in oracles.matmul(x.tolist(), W1)]
    want = [[v + b2[j] for j, v in enumerate(row)] for row in oracles.matmul(h, W2)]
    np.testing.assert_allclose(mlp(Tensor(x)).data, want, atol=1e-6)


def test_batch_norm_forward_and_running_stats():
    rng = np.random.default_rng(3)
    bn = ad.BatchNorm(4, dtype=np.float64)
    x = rng.normal(loc=2.0, scale=3.0, size=(2, 50, 4))
    out = bn(Tensor(x)).data.reshape(-1, 4)
    np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-4)
    flat = x.reshape(-1, 4)
    np.testing.assert_allclose(bn.running_mean.data, 0.1 * flat.mean(axis=0))
    np.testing.assert_allclose(bn.running_var.data, 0.9 + 0.1 * flat.var(axis=0, ddof=1))
    bn.eval()
    frozen = bn.running_mean.data.copy()
    y = bn(Tensor(x)).data
    np.testing.assert_array_equal(bn.running_mean.data, frozen)
    np.testing.assert_allclose(y, (x - frozen) / np.sqrt(bn.running_var.data + 1e-5))


def test_shared_mlp_rows_equivariant():
    rng = np.random.default_rng(4)
    mlp = SharedMLP(MlpSpec.of(5, 8, 2), rng, np.float64)
    x = rng.normal(size=(1, 40, 5))
    perm = rng.permutation(40)
    a = mlp(Tensor(x)).data
    b = mlp(Tensor(x[:, perm])).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-12, rtol=0)


def test_shared_mlp_width_mismatch():
    mlp = SharedMLP(MlpSpec.of(5, 2), np.random.default_rng(0))
    with pytest.raises(ValueError, match="expects 5 input channels"):
        mlp(Tensor(np.zeros((3, 4), dtype=np.float32)))
    with pytest.raises(ValueError, match="different spec"):
        ad.shared_mlp_forward(MlpSpec.of(5, 3), mlp, Tensor(np.zeros((3, 5), dtype=np.float32)))


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "relu": lambda a, b: ad.relu(a),
    "exp": lambda a, b: ad.exp(a),
    "log": lambda a, b: ad.log(ad.add(ad.mul(a, a), 1.0)),
    "mean": lambda a, b: ad.mean(a, axis=1, keepdims=True),
    "max": lambda a, b: ad.max_(a, axis=1),
    "reshape": lambda a, b: ad.reshape(a, (2, 12)),
    "expand": lambda a, b: ad.expand(ad.reshape(ad.sum_(a, axis=1), (2, 1, 3)), (2, 5, 3)),
    "concat": lambda a, b: ad.concat([a, b], axis=-1),
    "gather": lambda a, b: ad.gather(a, np.array([[[0, 1], [3, 3]], [[2, 2], [0, 1]]])),
    "softmax": lambda a, b: ad.softmax(a, axis=1),
    "linear": lambda a, b: ad.linear(a, ad.reshape(ad.sum_(b, axis=0), (3, 4)), ad.mean(b, axis=(0, 2))),
    "batch_norm": lambda a, b: ad.batch_norm(a, ad.sum_(b, axis=(0, 1)), ad.mean(b, axis=(0, 1)),
                                             np.zeros(3), np.ones(3), training=True),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_each_op_matches_finite_differences(name):
    rng = np.random.default_rng(5)
    a = _leaf(rng, 2, 4, 3)
    b = _leaf(rng, 2, 4, 3)
    R = rng.normal(size=np.shape(OPS[name](a, b).data))
    fn = lambda: ad.sum_(ad.mul(OPS[name](a, b), R))  # noqa: E731
    err, _, _ = check_function(fn, {"a": a, "b": b}, rng, entries=8)
    assert err <= 1e-5


def test_record_branches_sees_kinks():
    x = Tensor(np.array([-1.0, 2.0]))
    with ad.record_branches() as taken:
        ad.relu(x)
        ad.max_(Tensor(np.array([[1.0, 3.0]])), axis=1)
    assert len(taken) == 2
    np.testing.assert_array_equal(taken[0], [False, True])


def test_normalization_switch():
    bn = ad.BatchNorm(2, dtype=np.float64)
    x = Tensor(np.random.default_rng(0).normal(size=(5, 2)))
    with ad.normalization_disabled():
        assert bn(x) is x
    assert bn(x) is not x


def test_adam_zero_grad_no_decay_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st_ = ad.AdamState(lr=0.1, weight_decay=0.0)
    ad.adam_step({"p": p}, {"p": np.zeros(2)}, st_)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    p = Tensor(np.array([0.5]), requires_grad=True)
    st_ = ad.AdamState(lr=0.1, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8)
    ad.adam_step({"p": p}, {"p": np.ones(1)}, st_)
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    assert p.data[0] - 0.5 == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_adam_weight_decay_only():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    st_ = ad.AdamState(lr=0.1, weight_decay=0.1)
    ad.adam_step({"p": p}, {"p": np.zeros(2)}, st_)
    np.testing.assert_allclose(p.data, [2.0 * 0.99, -4.0 * 0.99], rtol=0, atol=1e-15)


def test_adam_multi_step_against_recurrence():
    rng = np.random.default_rng(6)
    p = Tensor(rng.normal(size=3), requires_grad=True)
    ref = p.data.copy()
    m = v = np.zeros(3)
    st_ = ad.AdamState(lr=0.01, weight_decay=0.05)
    for t in range(1, 6):
        g = rng.normal(size=3)
        ad.adam_step({"p": p}, {"p": g}, st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * 0.05 * ref
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=0, atol=1e-14)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError, match="grad shape"):
        ad.adam_step({"p": p}, {"p": np.zeros(2)}, ad.AdamState())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    state = ad.AdamState(lr=0.01, step=12, m={"b": np.ones(5, np.float32)}, v={"b": np.full(5, 2, np.float32)})
    ad.write_checkpoint(tmp_path / "c.bin", tensors, "k=v\n", state)
    ck = ad.read_checkpoint(tmp_path / "c.bin")
    assert ck.config_text == "k=v\n"
    for k in tensors:
        assert ck.tensors[k].tobytes() == tensors[k].tobytes()
    assert ck.adam.step == 12 and ck.adam.lr == 0.01
    np.testing.assert_array_equal(ck.adam.v["b"], state.v["b"])


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.bin"
    ad.write_checkpoint(path, {"x": np.zeros(2, np.float32)})
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ad.CheckpointError, match="bad checkpoint header"):
        ad.read_checkpoint(path)
    path.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ad.CheckpointError, match="version"):
        ad.read_checkpoint(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(ad.CheckpointError, match="truncated"):
        ad.read_checkpoint(path)
