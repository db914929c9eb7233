import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtvl import checkpoint
from mtvl import tensor as tn
from mtvl.tensor import ShapeError, Tape, Tensor, backward, grad_check


def rand(rng, *shape):
    return Tensor(rng.uniform(-1, 1, size=shape), requires_grad=True)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    X = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(tn.matmul(Tensor(np.eye(2)), X).data, X.data)


def test_matmul_hand_example():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_zero_annihilates_and_grad_of_b_is_zero():
    a = Tensor(np.zeros((2, 3)), requires_grad=True)
    b = Tensor(np.ones((3, 2)), requires_grad=True)
    c = a @ b
    assert not c.data.any()
    backward(c.sum())
    assert not b.grad.any()


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    A, B, C = (Tensor(rng.uniform(-1, 1, s)) for s in ((m, k), (k, n), (n, p)))
    left = ((A @ B) @ C).data
    right = (A @ (B @ C)).data
    assert np.max(np.abs(left - right)) <= 1e-6


# ---------------------------------------------------------------- softmax / activations


def test_softmax_examples():
    np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(tn.softmax(Tensor([np.log(2), 0.0])).data, [2 / 3, 1 / 3], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-50, 50)), st.floats(-100, 100), st.integers(0, 1))
def test_softmax_normalized_and_shift_invariant(x, c, axis):
    out = tn.softmax(Tensor(x), axis=axis).data
    assert np.all(out > 0) or np.any(np.ptp(x, axis=axis) > 700)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-6)
    np.testing.assert_allclose(tn.softmax(Tensor(x + c), axis=axis).data, out, atol=1e-12)


def test_softmax_mask_zeroes_exactly():
    out = tn.softmax(Tensor([[3.0, 1.0, 2.0]]), mask=np.array([[1, 0, 1]])).data
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_activations():
    np.testing.assert_array_equal(tn.activate(Tensor([-1.0, 2.0]), "relu").data, [0.0, 2.0])
    assert tn.activate(Tensor(0.0), "sigmoid").item() == 0.5
    assert tn.activate(Tensor(1.0), "sigmoid").item() == pytest.approx(0.7311, abs=1e-4)
    assert tn.activate(Tensor(0.5), "tanh").item() == pytest.approx(np.tanh(0.5))
    with pytest.raises(ValueError):
        tn.activate(Tensor(1.0), "gelu")


def test_sigmoid_extremes_are_finite():
    out = tn.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


# ---------------------------------------------------------------- affine / concat


def test_affine_examples():
    x = Tensor([2.0, 3.0])
    b = Tensor([1.0, -1.0])
    np.testing.assert_array_equal(tn.affine(x, Tensor(np.zeros((2, 2))), b).data, b.data)
    np.testing.assert_array_equal(tn.affine(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x.data)
    np.testing.assert_array_equal(tn.affine(x, Tensor([[1.0, 1.0]]), Tensor([1.0])).data, [6.0])


def test_affine_broadcasts_over_batch():
    rng = np.random.default_rng(0)
    W, b, X = rand(rng, 3, 4), rand(rng, 3), rand(rng, 5, 4)
    batched = tn.affine(X, W, b).data
    for i in range(5):
        np.testing.assert_allclose(batched[i], tn.affine(X[i], W, b).data, atol=1e-14)


def test_affine_shape_error():
    with pytest.raises(ShapeError):
        tn.affine(Tensor(np.ones(3)), Tensor(np.ones((2, 4))), Tensor(np.ones(2)))


def test_concat_examples():
    np.testing.assert_array_equal(tn.concat([Tensor([1.0]), Tensor([2.0])]).data, [1.0, 2.0])
    x = Tensor([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(tn.concat([x, Tensor(np.zeros(0))]).data, x.data)


def test_concat_backward_splits_ones():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0, 5.0], requires_grad=True)
    backward(tn.concat([a, b]).sum())
    np.testing.assert_array_equal(a.grad, np.ones(2))
    np.testing.assert_array_equal(b.grad, np.ones(3))


def test_concat_shape_error():
    with pytest.raises(ShapeError):
        tn.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


# ---------------------------------------------------------------- dropout


def test_dropout_identities():
    x = Tensor(np.random.default_rng(1).normal(size=(4, 5)))
    rng = np.random.default_rng(0)
    assert tn.dropout(x, 0.0, True, rng) is x
    out = tn.dropout(x, 0.7, False, rng)
    np.testing.assert_array_equal(out.data, x.data)


def test_dropout_preserves_expectation():
    out = tn.dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(3))
    assert out.data.mean() == pytest.approx(1.0, abs=0.02)
    assert set(np.unique(out.data)) <= {0.0, 2.0}


def test_dropout_seeded_is_deterministic():
    x = Tensor(np.ones(50))
    a = tn.dropout(x, 0.3, True, tn.stream(7, "dropout")).data
    b = tn.dropout(x, 0.3, True, tn.stream(7, "dropout")).data
    np.testing.assert_array_equal(a, b)


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        tn.dropout(Tensor(np.ones(3)), 1.0, True, np.random.default_rng(0))


def test_named_streams_are_independent():
    a = tn.stream(0, "init").random(4)
    b = tn.stream(0, "dropout").random(4)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, tn.stream(0, "init").random(4))


# ---------------------------------------------------------------- backward / tape


def test_backward_scalar_leaf():
    x = Tensor(3.0, requires_grad=True)
    backward(x)
    assert x.grad == 1.0


def test_backward_linear_map():
    x = Tensor([0.3, -2.0], requires_grad=True)
    backward(tn.affine(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).sum())
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        backward(Tensor(np.ones(2), requires_grad=True))


def test_backward_does_not_double_accumulate_unless_asked():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * x).sum()
    backward(y)
    backward(y)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    backward(y, accumulate=True)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_tape_visits_each_node_once():
    x = Tensor([1.0, -1.0], requires_grad=True)
    h = tn.sigmoid(x)
    y = (h * h + h).sum()  # h reused: a diamond
    tape = Tape.record(y)
    ids = [id(n) for n in tape.nodes]
    assert len(ids) == len(set(ids))
    visited = tape.replay(y)
    assert len(visited) == len({id(n) for n in visited})
    assert x.grad is not None and h.grad is not None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with tn.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


# ---------------------------------------------------------------- grad_check


def test_grad_check_sum():
    theta = Tensor(np.random.default_rng(0).uniform(-1, 1, 6))
    assert grad_check(lambda: theta.sum(), theta) < 1e-8


def test_grad_check_sigmoid_at_zero():
    theta = Tensor(np.zeros(4))
    err = grad_check(lambda: tn.sigmoid(theta).sum(), theta)
    np.testing.assert_allclose(theta.grad, 0.25)
    assert err < 1e-5


def test_grad_check_raises_on_non_finite():
    theta = Tensor(np.array([-1.0]))
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        grad_check(lambda: tn.log(theta).sum(), theta)


def op_cases():
    rng = np.random.default_rng(42)
    w8 = Tensor(rng.uniform(-1, 1, 8))
    mask = np.array([[1, 1, 0, 1]])
    return {
        "add": lambda a, b: (tn.add(a, b) * w8).sum(),
        "sub": lambda a, b: (tn.sub(a, b) * w8).sum(),
        "mul": lambda a, b: (a * b).sum(),
        "div": lambda a, b: (a / (tn.exp(b) + 0.5)).sum(),
        "exp": lambda a, b: tn.exp(a).sum(),
        "log": lambda a, b: tn.log(tn.exp(a) + 1.0).sum(),
        "sigmoid": lambda a, b: (tn.sigmoid(a) * w8).sum(),
        "tanh": lambda a, b: (tn.tanh(a) * w8).sum(),
        "relu": lambda a, b: (tn.relu(a) * w8).sum(),
        "matmul": lambda a, b: (tn.reshape(a, (2, 4)) @ tn.reshape(b, (4, 2)) @ tn.reshape(w8[:2], (2, 1))).sum(),
        "affine": lambda a, b: (tn.affine(a, tn.reshape(tn.concat([b, b * b]), (2, 8)), w8[:2]) * w8[2:4]).sum(),
        "softmax": lambda a, b: (tn.softmax(tn.reshape(a, (2, 4)), axis=-1) * tn.reshape(w8, (2, 4))).sum(),
        "masked_softmax": lambda a, b: (tn.softmax(tn.reshape(a, (2, 4)), axis=-1, mask=mask) * tn.reshape(w8, (2, 4))).sum(),
        "concat": lambda a, b: (tn.concat([a, b]) * tn.concat([w8, w8])).sum(),
        "stack": lambda a, b: (tn.stack([a, b], axis=1) * tn.stack([w8, -w8], axis=1)).sum(),
        "getitem": lambda a, b: (a[2:6] * b[[0, 0, 3, 5]]).sum(),
        "embedding": lambda a, b: (tn.embedding(tn.reshape(a, (4, 2)), [[0, 3], [3, 1]]) * 1.7).sum(),
        "mean_reshape_swap": lambda a, b: (tn.reshape(a, (2, 4)).mT * tn.reshape(b, (4, 2))).mean(axis=0).sum(),
        "clip": lambda a, b: tn.clip(a, -0.5, 0.5).sum(),
    }


@pytest.mark.parametrize("name", list(op_cases()))
def test_every_op_matches_finite_differences(name):
    f = op_cases()[name]
    rng = np.random.default_rng(list(op_cases()).index(name))
    a = Tensor(rng.uniform(-1, 1, 8))
    b = Tensor(rng.uniform(-1, 1, 8))
    assert grad_check(lambda: f(a, b), [a, b], eps=1e-4) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_forward_ops_stay_finite(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.uniform(-1, 1, 8))
    b = Tensor(rng.uniform(-1, 1, 8))
    for f in op_cases().values():
        assert np.all(np.isfinite(f(a, b).data))


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=7), "s": np.array(np.pi)}
    path = tmp_path / "x.cmtl"
    checkpoint.save(path, arrays)
    raw = path.read_bytes()
    assert raw[:4] == b"CMTL"
    back = checkpoint.load(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()
    assert checkpoint.dumps(back) == raw


def test_checkpoint_rejects_bad_magic():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOPE" + bytes(8))
