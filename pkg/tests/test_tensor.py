import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import OP_CASES, gradcheck, weighted_sum
from smolpipe import ops
from smolpipe.ops import EmptyLossError
from smolpipe.tensor import ShapeError, TapeError, Tensor, backward, load_tensor, no_grad, save_tensor

rng = np.random.default_rng(1234)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# --- matmul ------------------------------------------------------------------


def test_matmul_identity():
    out = ops.matmul(t64([[1, 0], [0, 1]]), t64([[5, 6], [7, 8]]))
    assert out.data.tolist() == [[5, 6], [7, 8]]


def test_matmul_hand_arithmetic():
    assert ops.matmul(t64([[1, 2]]), t64([[3], [4]])).data.tolist() == [[11]]


def test_matmul_gradient():
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    assert gradcheck(lambda t: weighted_sum(ops.matmul(t[0], t[1])), [a, b]) < 1e-6


def test_matmul_batch_broadcast_gradient():
    a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
    assert gradcheck(lambda t: weighted_sum(ops.matmul(t[0], t[1])), [a, b]) < 1e-6


def test_matmul_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        ops.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))


def test_elementwise_requires_exact_shapes():
    with pytest.raises(ShapeError):
        ops.add(t64(np.zeros((2, 3))), t64(np.zeros((1, 3))))
    with pytest.raises(ShapeError):
        ops.mul(t64(np.zeros(3)), t64(np.zeros((3, 1))))


# --- softmax -----------------------------------------------------------------


def test_softmax_uniform():
    np.testing.assert_allclose(ops.softmax(t64([0, 0, 0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_no_overflow():
    out = ops.softmax(t64([1000.0, 0.0])).data
    assert abs(out[0] - 1) < 1e-12 and abs(out[1]) < 1e-12


def test_softmax_jacobian():
    assert gradcheck(lambda t: weighted_sum(ops.softmax(t[0])), [rng.standard_normal(5)]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_is_simplex_point(x):
    out = ops.softmax(t64(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


# --- permute_reshape ---------------------------------------------------------


def test_transpose_definition():
    x = np.arange(6.0).reshape(2, 3)
    y = ops.permute_reshape(t64(x), (1, 0), (3, 2)).data
    for i in range(2):
        for j in range(3):
            assert y[j][i] == x[i][j]


def test_identity_permute_is_bitwise():
    x = rng.standard_normal((2, 3, 4))
    assert ops.permute_reshape(t64(x), (0, 1, 2), (2, 3, 4)).data.tobytes() == x.tobytes()


def test_permute_reshape_index_loop_oracle():
    x = np.arange(24.0).reshape(2, 3, 4)
    perm = (2, 0, 1)
    y = ops.permute_reshape(t64(x), perm, (4, 6)).data
    # scalar oracle: walk the permuted index space in row-major order
    moved_shape = [x.shape[p] for p in perm]
    flat = []
    for a in range(moved_shape[0]):
        for b in range(moved_shape[1]):
            for c in range(moved_shape[2]):
                src = [0, 0, 0]
                src[perm[0]], src[perm[1]], src[perm[2]] = a, b, c
                flat.append(x[tuple(src)])
    assert y.reshape(-1).tolist() == flat


def test_permute_reshape_count_mismatch():
    with pytest.raises(ShapeError):
        ops.permute_reshape(t64(np.zeros((2, 3))), (1, 0), (4, 2))


def test_permute_reshape_gradient():
    x = rng.standard_normal((2, 3, 4))
    assert gradcheck(lambda t: weighted_sum(ops.permute_reshape(t[0], (1, 2, 0), (12, 2))), [x]) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_permute_reshape_preserves_multiset(data):
    shape = data.draw(hnp.array_shapes(min_dims=1, max_dims=4, max_side=4))
    perm = data.draw(st.permutations(range(len(shape))))
    x = data.draw(hnp.arrays(np.float64, shape, elements=st.floats(-1e6, 1e6)))
    y = ops.permute_reshape(t64(x), perm, (x.size,)).data
    assert sorted(y.tolist()) == sorted(x.reshape(-1).tolist())


# --- masked cross entropy ----------------------------------------------------


def test_ce_perfect_logits_zero_loss():
    logits = np.full((3, 4), -1e4)
    logits[np.arange(3), [1, 2, 3]] = 0.0
    loss = ops.cross_entropy_masked(t64(logits), [1, 2, 3], [True, True, True])
    assert float(loss.data) == 0.0


def test_ce_uniform_is_log_v():
    loss = ops.cross_entropy_masked(t64(np.zeros((3, 4))), [0, 1, 2], [True, True, True])
    assert abs(float(loss.data) - math.log(4)) < 1e-15


def test_ce_masked_target_flip_is_bitwise_invariant():
    logits = rng.standard_normal((5, 7))
    mask = [True, False, True, False, True]
    a = ops.cross_entropy_masked(t64(logits), [1, 2, 3, 4, 5], mask).data
    b = ops.cross_entropy_masked(t64(logits), [1, 6, 3, 0, 5], mask).data
    assert a.tobytes() == b.tobytes()


def test_ce_all_masked_raises():
    with pytest.raises(EmptyLossError):
        ops.cross_entropy_masked(t64(np.zeros((2, 3))), [0, 1], [False, False])


def test_ce_gradient():
    logits = rng.standard_normal((6, 5))
    mask = [True, False, True, True, False, True]
    tg = [0, 1, 2, 3, 4, 0]
    assert gradcheck(lambda t: ops.cross_entropy_masked(t[0], tg, mask), [logits]) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_ce_invariant_to_masked_targets(data):
    T, V = data.draw(st.integers(1, 6)), data.draw(st.integers(2, 6))
    mask = data.draw(st.lists(st.booleans(), min_size=T, max_size=T).filter(any))
    tg = data.draw(st.lists(st.integers(0, V - 1), min_size=T, max_size=T))
    other = [t if m else data.draw(st.integers(0, V - 1)) for t, m in zip(tg, mask)]
    logits = np.random.default_rng(T * 31 + V).standard_normal((T, V))
    a = ops.cross_entropy_masked(t64(logits), tg, mask).data
    b = ops.cross_entropy_masked(t64(logits), other, mask).data
    assert a.tobytes() == b.tobytes()


# --- every differentiable op -------------------------------------------------------


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients(name):
    build, shapes = OP_CASES[name]
    arrays = [rng.standard_normal(s) for s in shapes]
    assert gradcheck(build, arrays) < 1e-6, name


# --- tape semantics ------------------------------------------------------------


def test_sum_gradient_all_ones():
    x = t64(rng.standard_normal((2, 3)), grad=True)
    backward(ops.sum_all(x))
    assert (x.grad == 1).all()


def test_square_gradient_is_2x():
    xv = rng.standard_normal(5)
    x = t64(xv, grad=True)
    backward(ops.sum_all(x * x))
    np.testing.assert_allclose(x.grad, 2 * xv, rtol=0, atol=1e-15)


def test_shared_leaf_accumulates_once_per_use():
    x = t64([1.0, 2.0], grad=True)
    y = ops.add(ops.mul(x, x), x)
    backward(ops.sum_all(y))
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_second_backward_is_error():
    x = t64([1.0, 2.0], grad=True)
    loss = ops.sum_all(ops.mul(x, x))
    backward(loss)
    with pytest.raises(TapeError):
        backward(loss)


def test_non_scalar_root_is_error():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(TapeError):
        backward(ops.mul(x, x))


def test_detached_root_is_error():
    with pytest.raises(TapeError):
        backward(ops.sum_all(t64([1.0, 2.0])))


def test_no_grad_builds_no_tape():
    x = t64([1.0, 2.0], grad=True)
    with no_grad():
        y = ops.sum_all(ops.mul(x, x))
    assert not y.requires_grad


# --- serialization -------------------------------------------------------------


def test_smt1_roundtrip(tmp_path):
    x = rng.standard_normal((3, 1, 4))
    save_tensor(t64(x), tmp_path / "x.smt")
    raw = (tmp_path / "x.smt").read_bytes()
    assert raw[:4] == b"SMT1"
    assert int.from_bytes(raw[4:8], "little") == 3
    assert [int.from_bytes(raw[8 + 8 * i:16 + 8 * i], "little") for i in range(3)] == [3, 1, 4]
    assert len(raw) == 8 + 24 + 8 * x.size
    assert load_tensor(tmp_path / "x.smt").data.tobytes() == x.tobytes()


def test_smt1_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.smt").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ValueError):
        load_tensor(tmp_path / "bad.smt")
