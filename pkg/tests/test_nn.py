"""Layer, optimizer, segmentation, and checkpoint tests."""
import numpy as np
import pytest

from jumpfilter import autodiff as ad
from jumpfilter.nn import (AdamState, DenseLayer, GRUCell, Segment, adam_init,
                           adam_step, bind_params, clip_gradients,
                           collect_gradients, config_hash, gru_forward,
                           load_checkpoint, save_checkpoint,
                           segment_for_tbptt)
from oracles import adam_reference, gru_reference


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def test_dense_layer_init_and_items():
    layer = DenseLayer.init(np.random.default_rng(0), 16, 4, "tanh")
    assert layer.weight.shape == (16, 4)
    assert np.abs(layer.weight).max() <= 1.0 / 4.0   # uniform(+-1/sqrt(16))
    assert np.all(layer.bias == 0.0)
    names = [name for name, _ in layer.items("net.out")]
    assert names == ["net.out.weight", "net.out.bias"]


def test_dense_layer_apply():
    layer = DenseLayer.init(np.random.default_rng(1), 3, 2)
    p = dict(layer.items("lin"))
    x = np.random.default_rng(2).normal(size=(4, 3))
    out = layer.apply(None, p, "lin", x)
    assert np.allclose(out, x @ layer.weight + layer.bias)


def test_gru_cell_init_and_shapes():
    cell = GRUCell.init(np.random.default_rng(3), input_size=5, hidden_size=7)
    assert cell.w_gates.shape == (12, 14)
    assert cell.w_candidate.shape == (12, 7)
    assert cell.hidden_size == 7
    assert cell.input_size == 5
    assert np.abs(cell.w_gates).max() <= 1.0 / np.sqrt(12)
    names = [name for name, _ in cell.items("g")]
    assert names == ["g.w_gates", "g.w_candidate", "g.b_gates", "g.b_candidate"]


def test_gru_forward_matches_reference():
    rng = np.random.default_rng(4)
    cell = GRUCell.init(rng, input_size=3, hidden_size=4)
    p = dict(cell.items("g"))
    xs = rng.normal(size=(2, 6, 3))
    hs = gru_forward(cell, p, "g", xs, np.zeros((2, 4)))
    assert len(hs) == 6
    h = np.zeros((2, 4))
    H = 4
    for t in range(6):
        h = gru_reference(h, xs[:, t], cell.w_gates[:, :H], cell.w_gates[:, H:],
                          cell.w_candidate, cell.b_gates[:H], cell.b_gates[H:],
                          cell.b_candidate)
        assert np.abs(hs[t] - h).max() < 1e-12


def test_bind_and_collect():
    tape = ad.Tape()
    params = {"a": np.array([1.0, 2.0]), "b": np.array([[3.0]])}
    leaves = bind_params(tape, params)
    loss = ad.sum_squares(tape, [leaves["b"]])
    tape.backward(loss)
    grads = collect_gradients(leaves)
    assert np.allclose(grads["b"], [[6.0]])
    assert np.array_equal(grads["a"], np.zeros(2))   # unused leaf reads as 0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_first_step_magnitude():
    # With bias correction, step 1 moves each entry by ~lr regardless of the
    # gradient's scale (eps aside).
    params = {"w": np.zeros(3)}
    state = adam_init(params, learning_rate=0.01)
    adam_step(state, params, {"w": np.array([1e-3, 1.0, 1e3])})
    assert np.allclose(params["w"], -0.01, rtol=1e-4)
    assert state.count == 1


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(5)
    init = {"w": rng.normal(size=(2, 3)), "b": rng.normal(size=3)}
    grads_seq = [{k: rng.normal(size=v.shape) for k, v in init.items()}
                 for _ in range(5)]
    params = {k: v.copy() for k, v in init.items()}
    state = adam_init(params, learning_rate=0.05)
    for grads in grads_seq:
        adam_step(state, params, grads)
    want = adam_reference(init, grads_seq, lr=0.05)
    for k in init:
        assert np.abs(params[k] - want[k]).max() < 1e-12


def test_adam_updates_in_place():
    params = {"w": np.zeros(1)}
    ref = params["w"]
    state = adam_init(params)
    adam_step(state, params, {"w": np.ones(1)})
    assert params["w"] is ref   # same buffer, mutated in place


# ---------------------------------------------------------------------------
# Gradient clipping
# ---------------------------------------------------------------------------

def test_clip_gradients_scales_large_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([0.0, 4.0])}
    out, norm = clip_gradients(grads, 2.5)
    assert norm == pytest.approx(5.0)
    total = np.sqrt(sum(float(np.sum(g * g)) for g in out.values()))
    assert total == pytest.approx(2.5)
    assert np.allclose(out["a"], [1.5, 0.0])   # direction preserved


def test_clip_gradients_no_op_below_threshold():
    grads = {"a": np.array([0.3, 0.4])}
    buf = grads["a"]
    out, norm = clip_gradients(grads, 2.5)
    assert norm == pytest.approx(0.5)
    assert out["a"] is buf
    assert np.array_equal(out["a"], [0.3, 0.4])


# ---------------------------------------------------------------------------
# TBPTT segmentation
# ---------------------------------------------------------------------------

def test_segments_single_trajectory_exact_fit():
    assert segment_for_tbptt([50], 50) == [Segment(0, 0, 50)]


def test_segments_divide_evenly():
    segs = segment_for_tbptt([2000], 20)
    assert len(segs) == 100
    assert segs[0] == Segment(0, 0, 20)
    assert segs[-1] == Segment(0, 1980, 20)
    assert all(s.length == 20 for s in segs)


def test_segments_final_remainder_shorter():
    segs = segment_for_tbptt([45], 20)
    assert [s.length for s in segs] == [20, 20, 5]
    assert [s.offset for s in segs] == [0, 20, 40]


def test_segments_multiple_trajectories():
    segs = segment_for_tbptt([30, 10], 20)
    assert segs == [Segment(0, 0, 20), Segment(0, 20, 10), Segment(1, 0, 10)]


def test_segments_validation():
    with pytest.raises(ValueError):
        segment_for_tbptt([10], 0)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    params = {"net.w": rng.normal(size=(3, 2)), "net.b": rng.normal(size=2)}
    config = {"lr": 5e-4, "modes": 2, "name": "demo"}
    state = adam_init(params, learning_rate=5e-4)
    adam_step(state, params, {k: rng.normal(size=v.shape)
                              for k, v in params.items()})
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params, config, state)
    loaded, cfg, adam, stored = load_checkpoint(path)
    assert set(loaded) == set(params)
    for k in params:
        assert np.array_equal(loaded[k], params[k])   # bitwise
    assert cfg == config
    assert stored == config_hash(config)
    assert adam.count == 1
    assert adam.learning_rate == 5e-4
    for k in params:
        assert np.array_equal(adam.m[k], state.m[k])
        assert np.array_equal(adam.v[k], state.v[k])


def test_checkpoint_without_optimizer(tmp_path):
    path = tmp_path / "bare.npz"
    save_checkpoint(path, {"w": np.ones(2)}, {"x": 1})
    params, config, adam, _ = load_checkpoint(path)
    assert adam is None
    assert config == {"x": 1}


def test_checkpoint_hash_mismatch(tmp_path):
    path = tmp_path / "tampered.npz"
    save_checkpoint(path, {"w": np.ones(1)}, {"x": 1})
    with np.load(path) as data:
        payload = {k: data[k] for k in data.files}
    import json
    blob = json.loads(bytes(payload["config_json"]).decode())
    blob["config"]["x"] = 2   # edit config, keep stale hash
    payload["config_json"] = np.frombuffer(json.dumps(blob).encode(),
                                           dtype=np.uint8)
    np.savez(path, **payload)
    with pytest.raises(ValueError, match="hash mismatch"):
        load_checkpoint(path)


def test_config_hash_key_order_invariant():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
