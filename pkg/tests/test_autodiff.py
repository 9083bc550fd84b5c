"""Tape and operator tests: every backward rule against central differences."""
import numpy as np
import pytest

from jumpfilter import autodiff as ad
from jumpfilter.autodiff import Node, Tape, value_of
from oracles import fd_gradients, gradient_mismatch, gru_reference


def _taped_grads(arrays, build):
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in arrays.items()}
    loss = tape_loss = build(tape, leaves)
    tape.backward(loss)
    return {k: leaves[k].grad for k in arrays}, float(value_of(tape_loss))


def _fd_grads(arrays, build):
    work = {k: np.asarray(v, dtype=float) for k, v in arrays.items()}

    def loss_fn():
        tape = Tape()
        leaves = {k: tape.leaf(work[k]) for k in work}
        return float(value_of(build(tape, leaves)))

    return fd_gradients(loss_fn, work)


def _check_op(arrays, build, tol=1e-5):
    got, _ = _taped_grads(arrays, build)
    want = _fd_grads(arrays, build)
    for k in arrays:
        assert got[k] is not None, f"no gradient reached {k}"
        assert gradient_mismatch({k: want[k]}, {k: got[k]}) < tol, k


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("activation",
                         ["identity", "relu", "tanh", "sigmoid", "softmax"])
def test_dense_gradients(activation):
    rng = np.random.default_rng(0)
    arrays = {
        "x": rng.normal(size=(3, 4)),
        "W": rng.normal(size=(4, 5)),
        "b": rng.normal(size=5),
        "t": rng.normal(size=(3, 5)),
    }
    # Keep relu pre-activations away from the kink.
    if activation == "relu":
        arrays["b"] = arrays["b"] + 0.5

    def build(tape, leaves):
        out = ad.dense(tape, leaves["x"], leaves["W"], leaves["b"], activation)
        err = ad.sub(tape, out, leaves["t"])
        return ad.sum_squares(tape, [err])

    _check_op(arrays, build)


def test_dense_softmax_properties():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    W = rng.normal(size=(3, 6))
    b = rng.normal(size=6)
    out = ad.dense(None, x, W, b, "softmax")
    assert np.allclose(out.sum(axis=1), 1.0)
    assert np.all(out > 0.0)
    # Shift invariance: a constant added to every logit changes nothing.
    shifted = ad.dense(None, x, W, b + 500.0, "softmax")
    assert np.abs(out - shifted).max() < 1e-12


def test_dense_unknown_activation():
    with pytest.raises(ValueError, match="unknown activation"):
        ad.dense(None, np.zeros((1, 2)), np.zeros((2, 2)), np.zeros(2), "gelu")


def test_dense_constant_weights_skip_gradient():
    # Only x is a leaf; the constant W and b stay plain arrays.
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    arrays = {"x": rng.normal(size=(2, 3))}

    def build(tape, leaves):
        out = ad.dense(tape, leaves["x"], W, b, "tanh")
        return ad.sum_squares(tape, [out])

    _check_op(arrays, build)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def test_gru_step_hand_values():
    # Scalar cell, all-ones weights, zero biases, h=0, x=1:
    # z = r = sigmoid(1), cand = tanh(1), h' = z * cand.
    h = np.zeros((1, 1))
    x = np.ones((1, 1))
    out = ad.gru_step(None, h, x, np.ones((2, 2)), np.ones((2, 1)),
                      np.zeros(2), np.zeros(1))
    assert out[0, 0] == pytest.approx(0.5567699411459397, abs=1e-15)


def test_gru_step_matches_reference():
    rng = np.random.default_rng(3)
    B, H, I = 4, 5, 3
    h = rng.normal(size=(B, H))
    x = rng.normal(size=(B, I))
    Wg = rng.normal(size=(H + I, 2 * H))
    Wc = rng.normal(size=(H + I, H))
    bg = rng.normal(size=2 * H)
    bc = rng.normal(size=H)
    out = ad.gru_step(None, h, x, Wg, Wc, bg, bc)
    ref = gru_reference(h, x, Wg[:, :H], Wg[:, H:], Wc, bg[:H], bg[H:], bc)
    assert np.abs(out - ref).max() < 1e-12


def test_gru_closed_update_gate_keeps_hidden_state():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(2, 3))
    x = rng.normal(size=(2, 2))
    bg = np.zeros(6)
    bg[:3] = -50.0   # z = sigmoid(-50) ~ 2e-22
    out = ad.gru_step(None, h, x, rng.normal(size=(5, 6)),
                      rng.normal(size=(5, 3)), bg, np.zeros(3))
    assert np.abs(out - h).max() < 1e-15


def test_gru_step_gradients():
    rng = np.random.default_rng(5)
    B, H, I = 3, 4, 2
    arrays = {
        "h": rng.normal(size=(B, H)),
        "x": rng.normal(size=(B, I)),
        "Wg": rng.normal(size=(H + I, 2 * H)),
        "Wc": rng.normal(size=(H + I, H)),
        "bg": rng.normal(size=2 * H),
        "bc": rng.normal(size=H),
    }

    def build(tape, leaves):
        out = ad.gru_step(tape, leaves["h"], leaves["x"], leaves["Wg"],
                          leaves["Wc"], leaves["bg"], leaves["bc"])
        return ad.sum_squares(tape, [out])

    _check_op(arrays, build)


def test_gru_two_step_chain_gradients():
    # Gradients must flow through the recurrent h -> h' dependency.
    rng = np.random.default_rng(6)
    H, I = 3, 2
    arrays = {
        "h": rng.normal(size=(2, H)),
        "x1": rng.normal(size=(2, I)),
        "x2": rng.normal(size=(2, I)),
        "Wg": rng.normal(size=(H + I, 2 * H)),
        "Wc": rng.normal(size=(H + I, H)),
    }

    def build(tape, leaves):
        h1 = ad.gru_step(tape, leaves["h"], leaves["x1"], leaves["Wg"],
                         leaves["Wc"], np.zeros(2 * H), np.zeros(H))
        h2 = ad.gru_step(tape, h1, leaves["x2"], leaves["Wg"],
                         leaves["Wc"], np.zeros(2 * H), np.zeros(H))
        return ad.sum_squares(tape, [h2])

    _check_op(arrays, build)


# ---------------------------------------------------------------------------
# Glue ops
# ---------------------------------------------------------------------------

def test_add_sub_concat_gradients():
    rng = np.random.default_rng(7)
    arrays = {
        "a": rng.normal(size=(3, 2)),
        "b": rng.normal(size=(3, 2)),
        "c": rng.normal(size=(3, 4)),
    }

    def build(tape, leaves):
        s = ad.add(tape, leaves["a"], leaves["b"])
        d = ad.sub(tape, leaves["a"], leaves["b"])
        cat = ad.concat(tape, [s, d, leaves["c"]])
        return ad.sum_squares(tape, [cat])

    _check_op(arrays, build)


def test_sub_constant_right_operand():
    tape = Tape()
    a = tape.leaf(np.array([[1.0, 2.0]]))
    out = ad.sub(tape, a, np.array([[0.5, 0.5]]))
    loss = ad.sum_squares(tape, [out])
    tape.backward(loss)
    assert np.allclose(a.grad, [[1.0, 3.0]])


def test_row_stack_gradients():
    rng = np.random.default_rng(8)
    arrays = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}
    scale = np.arange(12, dtype=float).reshape(4, 3)

    def build(tape, leaves):
        stacked = ad.row_stack(tape, [leaves["a"], leaves["b"]])
        weighted = ad.affine_const(tape, stacked, scale, 0.0)
        return ad.sum_squares(tape, [weighted])

    _check_op(arrays, build)
    out = ad.row_stack(None, [np.zeros((2, 3)), np.ones((2, 3))])
    assert out.shape == (4, 3)
    assert np.all(out[:2] == 0.0) and np.all(out[2:] == 1.0)


def test_mode_fuse_hand_values():
    mu = np.array([[0.3, 0.7]])
    stacked = np.array([[1.0], [2.0]])
    out = ad.mode_fuse(None, mu, stacked)
    assert out[0, 0] == pytest.approx(1.7)


def test_mode_fuse_gradients():
    rng = np.random.default_rng(9)
    B, M, s = 3, 4, 2
    arrays = {
        "mu": rng.dirichlet(np.ones(M), size=B),
        "stacked": rng.normal(size=(M * B, s)),
        "t": rng.normal(size=(B, s)),
    }

    def build(tape, leaves):
        fused = ad.mode_fuse(tape, leaves["mu"], leaves["stacked"])
        err = ad.sub(tape, fused, leaves["t"])
        return ad.sum_squares(tape, [err])

    _check_op(arrays, build)


def test_gain_update_hand_values():
    prior = np.array([[1.0, 2.0]])
    k_flat = np.array([[2.0, 5.0]])   # K = [[2], [5]]
    innovation = np.array([[1.0]])
    out = ad.gain_update(None, prior, k_flat, innovation, 2, 1)
    assert np.allclose(out, [[3.0, 7.0]])


def test_gain_update_gradients():
    rng = np.random.default_rng(10)
    B, s, o = 3, 4, 2
    arrays = {
        "prior": rng.normal(size=(B, s)),
        "k_flat": rng.normal(size=(B, s * o)),
        "innovation": rng.normal(size=(B, o)),
    }

    def build(tape, leaves):
        out = ad.gain_update(tape, leaves["prior"], leaves["k_flat"],
                             leaves["innovation"], s, o)
        return ad.sum_squares(tape, [out])

    _check_op(arrays, build)


def test_affine_const_gradients():
    rng = np.random.default_rng(11)
    arrays = {"x": rng.normal(size=(2, 3))}
    scale = np.array([2.0, -1.0, 0.5])

    def build(tape, leaves):
        out = ad.affine_const(tape, leaves["x"], scale, 1.0)
        return ad.sum_squares(tape, [out])

    _check_op(arrays, build)
    assert np.allclose(ad.affine_const(None, np.ones((1, 3)), scale, 1.0),
                       [[3.0, 0.0, 1.5]])


def test_sum_squares_hand_values():
    out = ad.sum_squares(None, [np.array([[1.0, 0.0]]),
                                np.array([[2.0], [1.0]])])
    assert float(out) == pytest.approx(6.0)
    assert isinstance(out, np.float64)


def test_sum_squares_multi_block_gradients():
    rng = np.random.default_rng(12)
    arrays = {"a": rng.normal(size=(2, 2)), "b": rng.normal(size=(3, 1))}

    def build(tape, leaves):
        return ad.sum_squares(tape, [leaves["a"], leaves["b"]])

    _check_op(arrays, build)


# ---------------------------------------------------------------------------
# Model-map ops
# ---------------------------------------------------------------------------

def _sin_map(x, t):
    return np.sin(x)


def _sin_jac(x, t):
    B, d = x.shape
    J = np.zeros((B, d, d))
    idx = np.arange(d)
    J[:, idx, idx] = np.cos(x)
    return J


_LIN = np.array([[0.8, 0.2], [-0.1, 1.1]])


def _lin_map(x, t):
    return x @ _LIN.T


def _lin_jac(x, t):
    return _LIN   # shared (out, in) Jacobian exercises the 2-D branch


def test_apply_map_gradients_batched_jacobian():
    rng = np.random.default_rng(13)
    arrays = {"x": rng.normal(size=(3, 2))}

    def build(tape, leaves):
        out = ad.apply_map(tape, _sin_map, _sin_jac, leaves["x"], 1)
        return ad.sum_squares(tape, [out])

    _check_op(arrays, build)


def test_apply_map_gradients_shared_jacobian():
    rng = np.random.default_rng(14)
    arrays = {"x": rng.normal(size=(3, 2))}

    def build(tape, leaves):
        out = ad.apply_map(tape, _lin_map, _lin_jac, leaves["x"], 1)
        return ad.sum_squares(tape, [out])

    _check_op(arrays, build)


def test_apply_map_passes_time_index():
    seen = []

    def f(x, t):
        seen.append(t)
        return x

    ad.apply_map(None, f, lambda x, t: np.eye(2), np.zeros((1, 2)), 7)
    assert seen == [7]


def test_fanout_maps_values_and_gradients():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(3, 2))
    out = ad.fanout_maps(None, [_sin_map, _lin_map], [_sin_jac, _lin_jac],
                         x, 1)
    assert out.shape == (6, 2)
    assert np.allclose(out[:3], np.sin(x))
    assert np.allclose(out[3:], x @ _LIN.T)

    arrays = {"x": x}

    def build(tape, leaves):
        stacked = ad.fanout_maps(tape, [_sin_map, _lin_map],
                                 [_sin_jac, _lin_jac], leaves["x"], 1)
        return ad.sum_squares(tape, [stacked])

    _check_op(arrays, build)


def test_blockwise_maps_values_and_gradients():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(6, 2))
    out = ad.blockwise_maps(None, [_sin_map, _lin_map], [_sin_jac, _lin_jac],
                            x, 1)
    assert np.allclose(out[:3], np.sin(x[:3]))
    assert np.allclose(out[3:], x[3:] @ _LIN.T)

    arrays = {"x": x}

    def build(tape, leaves):
        stacked = ad.blockwise_maps(tape, [_sin_map, _lin_map],
                                    [_sin_jac, _lin_jac], leaves["x"], 1)
        return ad.sum_squares(tape, [stacked])

    _check_op(arrays, build)


# ---------------------------------------------------------------------------
# Tape mechanics
# ---------------------------------------------------------------------------

def test_untaped_ops_return_plain_arrays():
    x = np.ones((1, 2))
    assert type(ad.add(None, x, x)) is np.ndarray
    assert type(ad.dense(None, x, np.ones((2, 2)), np.zeros(2))) is np.ndarray


def test_constant_parents_stay_off_the_tape():
    tape = Tape()
    out = ad.add(tape, np.ones((1, 2)), np.ones((1, 2)))
    assert type(out) is np.ndarray   # no Node parents, nothing recorded
    assert tape.nodes == []


def test_diamond_graph_accumulates():
    # x feeds the loss along two paths; gradients must add.
    rng = np.random.default_rng(17)
    arrays = {"x": rng.normal(size=(2, 3))}
    W = rng.normal(size=(3, 3))

    def build(tape, leaves):
        y = ad.dense(tape, leaves["x"], W, np.zeros(3), "tanh")
        z = ad.add(tape, y, leaves["x"])
        return ad.sum_squares(tape, [z, leaves["x"]])

    _check_op(arrays, build)


def test_backward_resets_gradients_between_calls():
    tape = Tape()
    x = tape.leaf(np.array([[2.0]]))
    loss = ad.sum_squares(tape, [x])
    tape.backward(loss)
    first = x.grad.copy()
    tape.backward(loss)
    assert np.array_equal(x.grad, first)   # reset, not doubled


def test_backward_seed_scales_gradients():
    tape = Tape()
    x = tape.leaf(np.array([[3.0]]))
    loss = ad.sum_squares(tape, [x])
    tape.backward(loss, seed=2.0)
    assert np.allclose(x.grad, [[12.0]])


def test_unused_leaf_has_no_gradient():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1)))
    unused = tape.leaf(np.ones((1, 1)))
    loss = ad.sum_squares(tape, [x])
    tape.backward(loss)
    assert unused.grad is None


def test_value_of():
    tape = Tape()
    n = tape.leaf(np.array([1.0]))
    assert value_of(n) is n.value
    raw = np.array([2.0])
    assert value_of(raw) is raw
