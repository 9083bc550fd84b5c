"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tape records Nodes in creation order (which is a topological order), and
``backward`` walks them in reverse, calling one hand-written vector-Jacobian
product per node. Primitives are fused at the layer level (a dense layer or a
GRU step is a single node) so taped filtering stays fast in pure Python.

Every op accepts Nodes or plain ndarrays for any input, and all array values
carry a leading batch axis: vectors are (B, d), per-sample scalars (B,).
When ``tape`` is None, or no input is a Node, ops return the plain ndarray
value, so the same forward code serves training and evaluation.

Weight matrices are stored (in, out) so the forward matmul runs on two
C-contiguous operands; backward input gradients use (W @ g.T).T for the
same reason. At filter-sized batches this halves the matmul cost.
"""
from __future__ import annotations

import numpy as np

Array = np.ndarray


def _sigmoid(x: Array) -> Array:
    # In-place chain; measurably cheaper than scipy's expit at small sizes.
    # The floor keeps exp() in range; below -700 the result underflows to 0
    # exactly as it should.
    out = np.maximum(x, -700.0)
    np.negative(out, out=out)
    np.exp(out, out=out)
    out += 1.0
    np.reciprocal(out, out=out)
    return out

__all__ = [
    "Node", "Tape", "value_of", "dense", "gru_step", "add", "sub", "concat",
    "row_stack", "mode_fuse", "gain_update", "apply_map", "fanout_maps",
    "blockwise_maps", "affine_const", "sum_squares",
]


class Node:
    """One recorded value: payload, accumulated gradient, and its VJP."""

    __slots__ = ("value", "grad", "parents", "op", "aux")

    def __init__(self, value, parents, op, aux):
        self.value = value
        self.grad = None
        self.parents = parents
        self.op = op
        self.aux = aux


def value_of(x):
    return x.value if type(x) is Node else x


def _acc(parent, g):
    if type(parent) is Node:
        parent.grad = g if parent.grad is None else parent.grad + g


class Tape:
    """Ordered record of Nodes for one backward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def leaf(self, value) -> Node:
        node = Node(np.asarray(value, dtype=float), (), None, None)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node, seed: float = 1.0):
        """Accumulate d(loss)/d(node) into every node reachable from loss."""
        for node in self.nodes:
            node.grad = None
        loss.grad = np.float64(seed)
        for node in reversed(self.nodes):
            if node.grad is not None and node.op is not None:
                node.op(node, node.grad)


def _emit(tape, value, parents, op, aux):
    if tape is not None:
        for p in parents:
            if type(p) is Node:
                node = Node(value, parents, op, aux)
                tape.nodes.append(node)
                return node
    return value


# ---------------------------------------------------------------------------
# Dense layer (activation fused in)
# ---------------------------------------------------------------------------

def _dense_bwd(node, g):
    # Gradient pieces for non-leaf parents are skipped, not just discarded:
    # in alternating training most weight gradients belong to a frozen group.
    xv, Wv, act, cache = node.aux
    if act == "identity":
        gp = g
    elif act == "relu":
        gp = g * cache
    elif act == "tanh":
        gp = g * (1.0 - cache**2)
    elif act == "sigmoid":
        gp = g * cache * (1.0 - cache)
    else:  # softmax: rows are probability vectors
        gp = cache * (g - np.sum(g * cache, axis=1, keepdims=True))
    x, W, b = node.parents
    if type(x) is Node:
        _acc(x, (Wv @ gp.T).T)
    if type(W) is Node:
        _acc(W, xv.T @ gp)
    if type(b) is Node:
        _acc(b, gp.sum(axis=0))


def dense(tape, x, W, b, activation: str = "identity"):
    """x @ W + b (W stored (in, out)) followed by the named activation."""
    xv, Wv, bv = value_of(x), value_of(W), value_of(b)
    pre = xv @ Wv
    pre += bv
    if activation == "identity":
        out, cache = pre, None
    elif activation == "relu":
        mask = pre > 0.0
        out, cache = pre * mask, mask
    elif activation == "tanh":
        out = np.tanh(pre)
        cache = out
    elif activation == "sigmoid":
        out = _sigmoid(pre)
        cache = out
    elif activation == "softmax":
        shifted = pre - pre.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=1, keepdims=True)
        cache = out
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return _emit(tape, out, (x, W, b), _dense_bwd, (xv, Wv, activation, cache))


# ---------------------------------------------------------------------------
# GRU step
# ---------------------------------------------------------------------------
# Convention: z = sig(Wz [h, x] + bz), r = sig(Wr [h, x] + br),
# cand = tanh(Wc [r*h, x] + bc), h' = (1 - z) * h + z * cand.
# The z and r gates share one stacked matrix Wg = [Wz, Wr] (and bias) so the
# step costs two matmuls instead of three; columns [0:H] are the update gate.

def _gru_bwd(node, g):
    # Weight-gradient GEMMs are skipped for non-leaf parents: in alternating
    # training a whole parameter group at a time sits frozen on the tape.
    hv, hx, zr, cand, rhx, Wgv, Wcv = node.aux
    H = hv.shape[1]
    z = zr[:, :H]
    r = zr[:, H:]
    h, x, Wg, Wc, bg, bc = node.parents

    d_pre_c = np.square(cand)
    np.subtract(1.0, d_pre_c, out=d_pre_c)
    d_pre_c *= z
    d_pre_c *= g
    d_rhx = (Wcv @ d_pre_c.T).T
    d_rh = d_rhx[:, :H]

    d_pre_g = np.empty_like(zr)
    d_pre_g[:, :H] = g * (cand - hv)
    d_pre_g[:, H:] = d_rh * hv
    d_pre_g *= zr
    d_pre_g *= 1.0 - zr

    need_h = type(h) is Node
    need_x = type(x) is Node
    if need_h or need_x:
        d_hx = (Wgv @ d_pre_g.T).T
        if need_h:
            d_h = g * (1.0 - z)
            d_h += d_rh * r
            d_h += d_hx[:, :H]
            _acc(h, d_h)
        if need_x:
            d_x = np.ascontiguousarray(d_rhx[:, H:])
            d_x += d_hx[:, H:]
            _acc(x, d_x)
    if type(Wg) is Node:
        _acc(Wg, hx.T @ d_pre_g)
    if type(Wc) is Node:
        _acc(Wc, rhx.T @ d_pre_c)
    if type(bg) is Node:
        _acc(bg, d_pre_g.sum(axis=0))
    if type(bc) is Node:
        _acc(bc, d_pre_c.sum(axis=0))


def gru_step(tape, h, x, Wg, Wc, bg, bc):
    """One GRU cell update as a single node; returns the new hidden state."""
    hv, xv = value_of(h), value_of(x)
    Wgv, Wcv = value_of(Wg), value_of(Wc)
    H = hv.shape[1]
    hx = np.concatenate([hv, xv], axis=1)
    pre = hx @ Wgv
    pre += value_of(bg)
    zr = _sigmoid(pre)
    z = zr[:, :H]
    r = zr[:, H:]
    rhx = np.concatenate([r * hv, xv], axis=1)
    pre_c = rhx @ Wcv
    pre_c += value_of(bc)
    cand = np.tanh(pre_c, out=pre_c)
    out = cand - hv
    out *= z
    out += hv
    return _emit(tape, out, (h, x, Wg, Wc, bg, bc), _gru_bwd,
                 (hv, hx, zr, cand, rhx, Wgv, Wcv))


# ---------------------------------------------------------------------------
# Glue ops
# ---------------------------------------------------------------------------

def _add_bwd(node, g):
    a, b = node.parents
    _acc(a, g)
    _acc(b, g)


def add(tape, a, b):
    return _emit(tape, value_of(a) + value_of(b), (a, b), _add_bwd, None)


def _sub_bwd(node, g):
    a, b = node.parents
    _acc(a, g)
    if type(b) is Node:
        _acc(b, -g)


def sub(tape, a, b):
    return _emit(tape, value_of(a) - value_of(b), (a, b), _sub_bwd, None)


def _concat_bwd(node, g):
    offsets = node.aux
    for parent, lo, hi in offsets:
        _acc(parent, g[:, lo:hi])


def concat(tape, parts):
    """Concatenate (B, d_i) blocks along axis 1."""
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=1)
    offsets, lo = [], 0
    for p, v in zip(parts, values):
        hi = lo + v.shape[1]
        offsets.append((p, lo, hi))
        lo = hi
    return _emit(tape, out, tuple(parts), _concat_bwd, offsets)


def _row_stack_bwd(node, g):
    B = node.aux
    for j, parent in enumerate(node.parents):
        _acc(parent, g[j * B:(j + 1) * B])


def row_stack(tape, parts):
    """Stack (B, d) blocks along axis 0 into (len(parts)*B, d), block-major."""
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=0)
    return _emit(tape, out, tuple(parts), _row_stack_bwd, values[0].shape[0])


def _mode_fuse_bwd(node, g):
    stacked_v, muv = node.aux
    mu, stacked = node.parents
    M = muv.shape[1]
    B = g.shape[0]
    S3 = stacked_v.reshape(M, B, -1)
    if type(mu) is Node:
        _acc(mu, np.einsum("bs,jbs->bj", g, S3))
    if type(stacked) is Node:
        d_S = np.einsum("bj,bs->jbs", muv, g)
        _acc(stacked, d_S.reshape(M * B, -1))


def mode_fuse(tape, mu, stacked):
    """Probability-weighted sum over the M blocks of a (M*B, d) stacked value:
    out[b] = sum_j mu[b, j] * stacked[j*B + b]."""
    muv = value_of(mu)
    stacked_v = value_of(stacked)
    M = muv.shape[1]
    B = stacked_v.shape[0] // M
    out = np.einsum("bj,jbs->bs", muv, stacked_v.reshape(M, B, -1))
    return _emit(tape, out, (mu, stacked), _mode_fuse_bwd, (stacked_v, muv))


def _gain_update_bwd(node, g):
    K, innov = node.aux
    prior, k_flat, innovation = node.parents
    _acc(prior, g)
    if type(k_flat) is Node:
        dK = np.einsum("bs,bo->bso", g, innov)
        _acc(k_flat, dK.reshape(g.shape[0], -1))
    if type(innovation) is Node:
        _acc(innovation, np.einsum("bso,bs->bo", K, g))


def gain_update(tape, prior, k_flat, innovation, state_dim, obs_dim):
    """prior + reshape(k_flat, (B, s, o)) @ innovation, as one node."""
    Kv = value_of(k_flat).reshape(-1, state_dim, obs_dim)
    innov = value_of(innovation)
    out = value_of(prior) + np.einsum("bso,bo->bs", Kv, innov)
    return _emit(tape, out, (prior, k_flat, innovation), _gain_update_bwd,
                 (Kv, innov))


def _jvp_t(J, g):
    # J(x)^T g for one block; J is (B, out, in), or (out, in) shared.
    if J.ndim == 2:
        return g @ J
    return np.einsum("boi,bo->bi", J, g)


def _apply_map_bwd(node, g):
    fn_jac, xv, t = node.aux
    _acc(node.parents[0], _jvp_t(fn_jac(xv, t), g))


def apply_map(tape, fn, fn_jacobian, x, t):
    """Apply a model map with a known Jacobian; backward uses J(x)^T g.

    ``fn`` and ``fn_jacobian`` follow the batched dynamics conventions
    ((B, in) -> (B, out) and (B, out, in)); the Jacobian is evaluated lazily
    during the backward pass.
    """
    xv = value_of(x)
    out = fn(xv, t)
    return _emit(tape, out, (x,), _apply_map_bwd, (fn_jacobian, xv, t))


def _fanout_maps_bwd(node, g):
    jacs, xv, t = node.aux
    B = xv.shape[0]
    total = _jvp_t(jacs[0](xv, t), g[:B])
    for j in range(1, len(jacs)):
        total += _jvp_t(jacs[j](xv, t), g[j * B:(j + 1) * B])
    _acc(node.parents[0], total)


def fanout_maps(tape, fns, jacs, x, t):
    """Apply every map to one shared (B, in) input and stack the results
    mode-major into (M*B, out), as a single node."""
    xv = value_of(x)
    out = np.concatenate([fn(xv, t) for fn in fns], axis=0)
    return _emit(tape, out, (x,), _fanout_maps_bwd, (jacs, xv, t))


def _blockwise_maps_bwd(node, g):
    jacs, xv, B, t = node.aux
    d_x = np.empty_like(xv)
    for j, jac in enumerate(jacs):
        rows = slice(j * B, (j + 1) * B)
        d_x[rows] = _jvp_t(jac(xv[rows], t), g[rows])
    _acc(node.parents[0], d_x)


def blockwise_maps(tape, fns, jacs, x, t):
    """Apply map j to rows [j*B, (j+1)*B) of a mode-major (M*B, in) stack,
    as a single node."""
    xv = value_of(x)
    B = xv.shape[0] // len(fns)
    out = np.concatenate(
        [fn(xv[j * B:(j + 1) * B], t) for j, fn in enumerate(fns)], axis=0)
    return _emit(tape, out, (x,), _blockwise_maps_bwd, (jacs, xv, B, t))


def _affine_const_bwd(node, g):
    _acc(node.parents[0], g * node.aux)


def affine_const(tape, x, scale, shift):
    """x * scale + shift for constant scale/shift (no gradient into them)."""
    return _emit(tape, value_of(x) * scale + shift, (x,), _affine_const_bwd, scale)


def _sum_squares_bwd(node, g):
    for parent, ev in zip(node.parents, node.aux):
        _acc(parent, (2.0 * g) * ev)


def sum_squares(tape, errors):
    """Scalar sum of squared entries over a list of (B, d) error blocks."""
    evals = [value_of(e) for e in errors]
    total = 0.0
    for ev in evals:
        total += float(np.sum(ev * ev))
    return _emit(tape, np.float64(total), tuple(errors), _sum_squares_bwd, evals)
