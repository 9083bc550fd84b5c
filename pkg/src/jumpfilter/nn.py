"""Neural building blocks: layers, Adam, gradient clipping, TBPTT segments,
and checkpoint persistence. Forward passes run through the ops in
``autodiff``; parameters are float64 numpy arrays addressed by dotted names.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad

Array = np.ndarray


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass
class DenseLayer:
    """Affine layer; the weight is stored (in, out) to keep the forward
    matmul on contiguous operands."""

    weight: Array
    bias: Array
    activation: str = "identity"

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int,
             activation: str = "identity") -> "DenseLayer":
        bound = 1.0 / np.sqrt(in_dim)
        weight = rng.uniform(-bound, bound, (in_dim, out_dim))
        return cls(weight, np.zeros(out_dim), activation)

    def items(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def apply(self, tape, p, prefix: str, x):
        return ad.dense(tape, x, p[f"{prefix}.weight"], p[f"{prefix}.bias"],
                        self.activation)


@dataclass
class GRUCell:
    """Gated recurrent unit; gate matrices act on the concatenation [h, x].

    The update and reset gates live stacked in ``w_gates`` (update columns
    first), matching the fused ``gru_step`` op; the candidate matrix is
    separate because its input runs through the reset gate. Weights are
    stored (in, out) like the dense layers.
    """

    w_gates: Array
    w_candidate: Array
    b_gates: Array
    b_candidate: Array

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int,
             hidden_size: int) -> "GRUCell":
        fan_in = hidden_size + input_size
        bound = 1.0 / np.sqrt(fan_in)
        return cls(rng.uniform(-bound, bound, (fan_in, 2 * hidden_size)),
                   rng.uniform(-bound, bound, (fan_in, hidden_size)),
                   np.zeros(2 * hidden_size), np.zeros(hidden_size))

    @property
    def hidden_size(self) -> int:
        return self.w_candidate.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_candidate.shape[0] - self.w_candidate.shape[1]

    def items(self, prefix: str):
        yield f"{prefix}.w_gates", self.w_gates
        yield f"{prefix}.w_candidate", self.w_candidate
        yield f"{prefix}.b_gates", self.b_gates
        yield f"{prefix}.b_candidate", self.b_candidate

    def apply(self, tape, p, prefix: str, h, x):
        return ad.gru_step(tape, h, x,
                           p[f"{prefix}.w_gates"], p[f"{prefix}.w_candidate"],
                           p[f"{prefix}.b_gates"], p[f"{prefix}.b_candidate"])


def gru_forward(cell: GRUCell, p, prefix: str, xs: Array, h0: Array,
                tape=None) -> list:
    """Run a GRU over a (B, T, in) sequence; returns the per-step hidden states."""
    h = h0
    out = []
    for t in range(xs.shape[1]):
        h = cell.apply(tape, p, prefix, h, xs[:, t])
        out.append(h)
    return out


def bind_params(tape, params: dict) -> dict:
    """Wrap every parameter array in a tape leaf; returns name -> Node."""
    return {name: tape.leaf(arr) for name, arr in params.items()}


def collect_gradients(leaves: dict) -> dict:
    """Gradients accumulated on bound leaves (zeros where a leaf was unused)."""
    return {name: (node.grad if node.grad is not None else np.zeros_like(node.value))
            for name, node in leaves.items()}


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    count: int = 0


def adam_init(params: dict, learning_rate: float = 5e-4) -> AdamState:
    state = AdamState(learning_rate=learning_rate)
    for name, arr in params.items():
        state.m[name] = np.zeros_like(arr)
        state.v[name] = np.zeros_like(arr)
    return state


def adam_step(state: AdamState, params: dict, grads: dict):
    """One Adam update, in place on the parameter arrays."""
    state.count += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.count
    bc2 = 1.0 - b2**state.count
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_gradients(grads: dict, max_norm: float):
    """Scale the whole gradient down to max_norm if its global L2 norm exceeds
    it; direction is preserved. Returns (grads, pre-clip norm)."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return grads, norm


# ---------------------------------------------------------------------------
# Truncated backpropagation-through-time segmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """Half-open step range [offset, offset + length) of one trajectory."""

    trajectory: int
    offset: int
    length: int


def segment_for_tbptt(horizons: Sequence[int], segment_length: int) -> list:
    """Cut each trajectory into contiguous segments of the given length (the
    final segment of a trajectory may be shorter). Order is deterministic:
    by trajectory, then offset."""
    if segment_length < 1:
        raise ValueError("segment_length must be positive")
    out = []
    for i, T in enumerate(horizons):
        offset = 0
        while offset < T:
            length = min(segment_length, T - offset)
            out.append(Segment(i, offset, length))
            offset += length
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, params: dict, config: dict, adam: AdamState | None = None):
    """Weights (+ optional optimizer moments) and config, bitwise exact."""
    payload = {f"param/{k}": v for k, v in params.items()}
    if adam is not None:
        payload.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        payload.update({f"adam_v/{k}": v for k, v in adam.v.items()})
        payload["adam_meta"] = np.array([adam.count, adam.learning_rate,
                                         adam.beta1, adam.beta2, adam.eps])
    blob = json.dumps({"config": config, "hash": config_hash(config)})
    payload["config_json"] = np.frombuffer(blob.encode(), dtype=np.uint8)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Returns (params, config, adam or None, config hash)."""
    with np.load(path) as data:
        blob = json.loads(bytes(data["config_json"]).decode())
        config = blob["config"]
        stored_hash = blob["hash"]
        if config_hash(config) != stored_hash:
            raise ValueError("checkpoint config hash mismatch")
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        adam = None
        if "adam_meta" in data.files:
            meta = data["adam_meta"]
            adam = AdamState(learning_rate=float(meta[1]), beta1=float(meta[2]),
                             beta2=float(meta[3]), eps=float(meta[4]))
            adam.count = int(meta[0])
            adam.m = {k[len("adam_m/"):]: data[k] for k in data.files if k.startswith("adam_m/")}
            adam.v = {k[len("adam_v/"):]: data[k] for k in data.files if k.startswith("adam_v/")}
    return params, config, adam, stored_hash
