"""Hybrid neural filter for mode-switching systems, plus learned baselines.

The filter keeps one estimate branch per candidate mode. Every branch
predicts from the shared fused estimate through its own (known) dynamics,
corrects with a learned Kalman-style gain, and the branch posteriors are
fused under mode probabilities from a learned mode predictor:

    mu_t                = softmax head over a GRU fed the raw observation
    prior_j             = f_j(fused_{t-1})
    post_j              = prior_j + K_j(features_j) (y_t - h_j(prior_j))
    fused_t             = sum_j mu_t[j] * post_j

No covariances appear anywhere; the gain network's recurrence carries that
role implicitly. Training alternates least-squares style between the two
parameter groups: each epoch first fits the mode predictor with the gain
network frozen, then the gain network with the mode predictor frozen, both
against the squared error of the fused estimate.
"""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, value_of
from .nn import (AdamState, DenseLayer, GRUCell, adam_init, adam_step,
                 bind_params, clip_gradients, collect_gradients,
                 segment_for_tbptt)

Array = np.ndarray


class FilterDivergence(RuntimeError):
    """The fused estimate stopped being finite during a taped pass."""

    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite fused estimate at step {step}")


class TrainingAborted(RuntimeError):
    """Too many skipped batches in one epoch; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


# ---------------------------------------------------------------------------
# Branch models: uniform (f, h, Jacobians) view over filter-visible models
# ---------------------------------------------------------------------------

class BranchModel:
    """Adapter giving every model t-uniform callables for the taped ops."""

    __slots__ = ("f", "f_jacobian", "h", "h_jacobian", "state_dim", "obs_dim")

    def __init__(self, model):
        self.f = model.apply_f
        self.f_jacobian = model.jac_f
        self.h = lambda x, t, _m=model: _m.apply_h(x)
        self.h_jacobian = lambda x, t, _m=model: _m.jac_h(x)
        self.state_dim = model.state_dim
        self.obs_dim = model.obs_dim


def as_branch_models(models: Sequence) -> list:
    return [m if isinstance(m, BranchModel) else BranchModel(m) for m in models]


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class ModePredictorNet:
    """Observation -> mode probabilities: dense, two stacked GRUs, softmax head.

    Raw observations are standardized by affine constants frozen from the
    training split (they are part of the saved artifact, not trained).
    """

    def __init__(self, obs_dim: int, num_modes: int, rng: np.random.Generator,
                 hidden_size: int = 64, num_layers: int = 2):
        self.obs_dim = obs_dim
        self.num_modes = num_modes
        self.hidden_size = hidden_size
        self.input = DenseLayer.init(rng, obs_dim, hidden_size, "relu")
        self.cells = [GRUCell.init(rng, hidden_size, hidden_size)
                      for _ in range(num_layers)]
        self.output = DenseLayer.init(rng, hidden_size, num_modes, "softmax")
        self.obs_mean = np.zeros(obs_dim)
        self.obs_scale = np.ones(obs_dim)

    @property
    def num_layers(self) -> int:
        return len(self.cells)

    def params(self) -> dict:
        out = dict(self.input.items("mode.input"))
        for i, cell in enumerate(self.cells):
            out.update(cell.items(f"mode.gru{i}"))
        out.update(self.output.items("mode.output"))
        return out

    def step(self, tape, p, y: Array, hidden: list):
        """One recurrent update; returns (mode probabilities, new hidden list)."""
        x = ad.dense(tape, (y - self.obs_mean) / self.obs_scale,
                     p["mode.input.weight"], p["mode.input.bias"], "relu")
        new_hidden = []
        for i, cell in enumerate(self.cells):
            x = cell.apply(tape, p, f"mode.gru{i}", hidden[i], x)
            new_hidden.append(x)
        mu = self.output.apply(tape, p, "mode.output", x)
        return mu, new_hidden


class GainNet:
    """Branch features -> flattened gain matrix, one shared parameter set.

    Input per branch: observation difference (o), innovation (o), previous
    state-update difference (s), one-hot mode tag (M); dense widens it 4x,
    a single GRU (6x the feature width) carries the recurrent stream, and a
    linear head emits the s*o gain entries. The head starts near zero: a
    random initial gain closes an unstable feedback loop through the
    innovation, so the filter opens as a pure predictor and the gain grows
    with training.
    """

    def __init__(self, state_dim: int, obs_dim: int, num_modes: int,
                 rng: np.random.Generator, input_mult: int = 4,
                 hidden_mult: int = 6):
        self.state_dim = state_dim
        self.obs_dim = obs_dim
        self.num_modes = num_modes
        self.feature_dim = 2 * obs_dim + state_dim + num_modes
        self.hidden_size = hidden_mult * self.feature_dim
        widened = input_mult * self.feature_dim
        self.input = DenseLayer.init(rng, self.feature_dim, widened, "relu")
        self.cell = GRUCell.init(rng, widened, self.hidden_size)
        self.output = DenseLayer.init(rng, self.hidden_size,
                                      state_dim * obs_dim, "identity")
        self.output.weight *= 1e-2

    def params(self) -> dict:
        out = dict(self.input.items("gain.input"))
        out.update(self.cell.items("gain.gru"))
        out.update(self.output.items("gain.output"))
        return out

    def step(self, tape, p, features, hidden):
        """One recurrent update; returns (flattened gain, new hidden state)."""
        x = self.input.apply(tape, p, "gain.input", features)
        h = self.cell.apply(tape, p, "gain.gru", hidden, x)
        k_flat = self.output.apply(tape, p, "gain.output", h)
        return k_flat, h


def predict_modes(net: ModePredictorNet, y: Array, hidden: list, p=None,
                  tape=None):
    """Standalone mode-probability step (see ModePredictorNet.step)."""
    return net.step(tape, p if p is not None else net.params(), y, hidden)


def estimate_gain(net: GainNet, features: Array, hidden: Array, p=None,
                  tape=None):
    """Standalone gain step (see GainNet.step)."""
    return net.step(tape, p if p is not None else net.params(), features, hidden)


def branch_predict(model, fused_prev, t: int, tape=None):
    """Propagate the shared fused estimate through one branch's dynamics;
    returns (state prior, predicted observation)."""
    branch = as_branch_models([model])[0]
    prior = ad.apply_map(tape, branch.f, branch.f_jacobian, fused_prev, t)
    y_pred = ad.apply_map(tape, branch.h, branch.h_jacobian, prior, t)
    return prior, y_pred


class JumpFilterNet:
    """The trainable artifact: a gain network plus (optionally) a mode
    predictor. With ``mode_net=None`` and a single branch this is the
    mode-agnostic learned filter (KalmanNet recursion)."""

    def __init__(self, mode_net: ModePredictorNet | None, gain_net: GainNet):
        self.mode_net = mode_net
        self.gain_net = gain_net
        if mode_net is not None and mode_net.num_modes != gain_net.num_modes:
            raise ValueError("mode and gain networks disagree on mode count")

    @classmethod
    def build(cls, state_dim: int, obs_dim: int, num_modes: int,
              rng: np.random.Generator, with_mode_net: bool = True,
              mode_hidden: int = 64, mode_layers: int = 2,
              gain_input_mult: int = 4, gain_hidden_mult: int = 6):
        mode_net = None
        if with_mode_net:
            mode_net = ModePredictorNet(obs_dim, num_modes, rng, mode_hidden,
                                        mode_layers)
        gain_net = GainNet(state_dim, obs_dim, num_modes, rng,
                           gain_input_mult, gain_hidden_mult)
        return cls(mode_net, gain_net)

    @property
    def num_modes(self) -> int:
        return self.gain_net.num_modes

    @property
    def state_dim(self) -> int:
        return self.gain_net.state_dim

    @property
    def obs_dim(self) -> int:
        return self.gain_net.obs_dim

    def params(self) -> dict:
        out = {} if self.mode_net is None else self.mode_net.params()
        out.update(self.gain_net.params())
        return out

    def mode_params(self) -> dict:
        return {} if self.mode_net is None else self.mode_net.params()

    def gain_params(self) -> dict:
        return self.gain_net.params()

    def set_params(self, new: dict):
        params = self.params()
        if set(new) != set(params):
            raise ValueError("parameter name sets disagree")
        for name, arr in params.items():
            arr[...] = new[name]

    def config(self) -> dict:
        cfg = {
            "state_dim": self.state_dim,
            "obs_dim": self.obs_dim,
            "num_modes": self.num_modes,
            "with_mode_net": self.mode_net is not None,
            "gain_hidden": self.gain_net.hidden_size,
        }
        if self.mode_net is not None:
            cfg["mode_hidden"] = self.mode_net.hidden_size
            cfg["mode_layers"] = self.mode_net.num_layers
            cfg["obs_mean"] = self.mode_net.obs_mean.tolist()
            cfg["obs_scale"] = self.mode_net.obs_scale.tolist()
        return cfg

    def set_normalization(self, mean: Array, scale: Array):
        if self.mode_net is not None:
            self.mode_net.obs_mean = np.asarray(mean, dtype=float)
            self.mode_net.obs_scale = np.asarray(scale, dtype=float)


# ---------------------------------------------------------------------------
# Filter state and recursion
# ---------------------------------------------------------------------------

@dataclass
class FilterState:
    """Everything carried between steps. Mean-like vectors and recurrent
    hidden states only; the recursion keeps no covariance of any kind.

    Per-branch entries are stacked block-major along axis 0, mode j owning
    rows [j*B, (j+1)*B); the whole branch bank then runs through the shared
    gain network as one batch.
    """

    fused: object                 # (B, s)
    branch_posts: object          # (M*B, s): posteriors at t-1, stacked
    branch_priors: object         # (M*B, s): priors at t-1, stacked
    mode_hidden: list             # per mode-net layer, (B, H_m)
    gain_hidden: object           # (M*B, H_k), stacked
    prev_obs: Array               # (B, o), always a plain array
    step: int                     # next step index to process (1-based)


def init_filter_state(net: JumpFilterNet, x0: Array) -> FilterState:
    """Fresh state at t=1: every estimate starts at x0 and hidden states at
    zero. prev_obs is a placeholder; the first step substitutes the incoming
    observation for it, so the initial observation difference is zero."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    B = x0.shape[0]
    M = net.num_modes
    mode_hidden = []
    if net.mode_net is not None:
        mode_hidden = [np.zeros((B, net.mode_net.hidden_size))
                       for _ in range(net.mode_net.num_layers)]
    return FilterState(
        fused=x0,
        branch_posts=np.tile(x0, (M, 1)),
        branch_priors=np.tile(x0, (M, 1)),
        mode_hidden=mode_hidden,
        gain_hidden=np.zeros((M * B, net.gain_net.hidden_size)),
        prev_obs=np.zeros((B, net.obs_dim)),
        step=1,
    )


def detach_state(state: FilterState) -> FilterState:
    """Copy of the state with every entry reduced to its plain value."""
    return FilterState(
        fused=np.array(value_of(state.fused)),
        branch_posts=np.array(value_of(state.branch_posts)),
        branch_priors=np.array(value_of(state.branch_priors)),
        mode_hidden=[np.array(value_of(h)) for h in state.mode_hidden],
        gain_hidden=np.array(value_of(state.gain_hidden)),
        prev_obs=np.array(state.prev_obs),
        step=state.step,
    )


_onehot_cache: dict = {}


def _mode_onehot(num_modes: int, batch: int) -> Array:
    """Constant (M*B, M) block tagging each mode-major row group; cached
    because it only depends on the two sizes. Callers must not mutate it."""
    key = (num_modes, batch)
    out = _onehot_cache.get(key)
    if out is None:
        out = np.zeros((num_modes * batch, num_modes))
        for j in range(num_modes):
            out[j * batch:(j + 1) * batch, j] = 1.0
        _onehot_cache[key] = out
    return out


def jmfnet_step(tape, net: JumpFilterNet, p, branches: list,
                state: FilterState, y_t: Array, mu_fixed: Array | None = None):
    """One filter step. Returns (new state, fused estimate, stacked branch
    posteriors, mode probabilities).

    ``mu_fixed`` substitutes precomputed mode probabilities for the mode-net
    step. The mode stream depends only on the observations, so a pass that
    does not differentiate the mode parameters can treat it as data.
    """
    B = np.shape(value_of(state.fused))[0]
    M = net.num_modes
    s, o = net.state_dim, net.obs_dim
    t = state.step
    y_t = np.asarray(y_t, dtype=float)

    if mu_fixed is not None:
        mu, mode_hidden = mu_fixed, state.mode_hidden
    elif net.mode_net is not None:
        mu, mode_hidden = net.mode_net.step(tape, p, y_t, state.mode_hidden)
    else:
        mu, mode_hidden = np.ones((B, 1)), []

    if M > 1:
        prior_stack = ad.fanout_maps(tape, [br.f for br in branches],
                                     [br.f_jacobian for br in branches],
                                     state.fused, t)
        y_pred_stack = ad.blockwise_maps(tape, [br.h for br in branches],
                                         [br.h_jacobian for br in branches],
                                         prior_stack, t)
    else:
        br = branches[0]
        prior_stack = ad.apply_map(tape, br.f, br.f_jacobian, state.fused, t)
        y_pred_stack = ad.apply_map(tape, br.h, br.h_jacobian, prior_stack, t)

    # Plain arithmetic: both operands are data. At t=1 the previous
    # observation is defined as y_1 itself, so the difference is zero.
    obs_diff = y_t - state.prev_obs if t > 1 else np.zeros_like(y_t)
    y_rep = y_t
    if M > 1:
        y_rep = np.concatenate([y_t] * M, axis=0)
        obs_diff = np.concatenate([obs_diff] * M, axis=0)
    innovation = ad.sub(tape, y_rep, y_pred_stack)
    update_diff = ad.sub(tape, state.branch_posts, state.branch_priors)
    features = ad.concat(tape, [obs_diff, innovation, update_diff,
                                _mode_onehot(M, B)])
    k_flat, gain_hidden = net.gain_net.step(tape, p, features,
                                            state.gain_hidden)
    posts = ad.gain_update(tape, prior_stack, k_flat, innovation, s, o)

    fused = ad.mode_fuse(tape, mu, posts) if M > 1 else posts
    new_state = FilterState(fused, posts, prior_stack, mode_hidden,
                            gain_hidden, y_t, t + 1)
    return new_state, fused, posts, mu


@dataclass
class FilterRun:
    """Output of a whole-sequence (or segment) pass."""

    estimates: Array | None       # (B, T, s) values, NaN after divergence
    mode_probs: Array | None      # (B, T, M) values
    loss: object | None           # Node during taped passes, else float
    state: FilterState
    diverged: Array               # (B,) bool
    diverged_step: Array          # (B,) int, 0 where still healthy


def run_filter(net: JumpFilterNet, models: Sequence, observations: Array,
               x0: Array | None = None, targets: Array | None = None,
               state: FilterState | None = None,
               snapshot_offsets: Sequence[int] = (),
               divergence_norm: float = 1e8):
    """Drive the filter across a (B, T, o) observation block, untaped.

    Rows whose fused estimate stops being finite are marked, frozen at zero
    and kept in the batch; their estimates read NaN from the divergence step
    onward. ``snapshot_offsets`` collects detached states before those local
    step indices (used to seed truncated-BPTT segments). Differentiated
    passes run inside the training loop, not through this entry point.
    """
    observations = np.asarray(observations, dtype=float)
    if observations.ndim == 2:
        observations = observations[None]
    B, T, o = observations.shape
    branches = as_branch_models(models)
    if state is None:
        if x0 is None:
            raise ValueError("need either an initial state or x0")
        state = init_filter_state(net, x0)
    return _drive(net, net.params(), branches, observations, targets, None,
                  state, snapshot_offsets, divergence_norm)


def _drive(net, p, branches, observations, targets, tape, state,
           snapshot_offsets=(), divergence_norm=1e8, mu_seq=None):
    B, T, _ = observations.shape
    s = net.state_dim
    M = net.num_modes
    collect = tape is None
    estimates = np.full((B, T, s), np.nan) if collect else None
    mode_probs = np.full((B, T, M), np.nan) if collect else None
    diverged = np.zeros(B, dtype=bool)
    diverged_step = np.zeros(B, dtype=np.int64)
    snapshots = {}
    errors = []
    for k in range(T):
        if k in snapshot_offsets:
            snapshots[k] = detach_state(state)
        t_global = state.step
        state, fused, _, mu = jmfnet_step(
            tape, net, p, branches, state, observations[:, k],
            mu_fixed=None if mu_seq is None else mu_seq[:, k])
        fused_v = value_of(fused)
        # One comparison catches both failure modes: it is False for NaN and
        # for squared norms past the threshold (inf included).
        sq = np.einsum("bi,bi->b", fused_v, fused_v)
        bad = ~(sq <= divergence_norm * divergence_norm)
        if bad.any():
            if not collect:
                raise FilterDivergence(t_global)
            fresh = bad & ~diverged
            diverged |= bad
            diverged_step[fresh] = t_global
            # Freeze broken rows at zero so the healthy rows keep filtering.
            bad_stacked = np.tile(bad, M)
            for arr in (state.branch_posts, state.branch_priors,
                        state.gain_hidden):
                arr[bad_stacked] = 0.0
            for arr in state.mode_hidden:
                arr[bad] = 0.0
            state.fused[bad] = 0.0
            state.prev_obs[bad] = 0.0
        if collect:
            alive = ~diverged
            estimates[alive, k] = fused_v[alive]
            mode_probs[alive, k] = value_of(mu)[alive] if M > 1 else 1.0
        if targets is not None:
            errors.append(ad.sub(tape, fused, targets[:, k]))
    loss = ad.sum_squares(tape, errors) if targets is not None else None
    run = FilterRun(estimates, mode_probs, loss, state, diverged, diverged_step)
    if snapshot_offsets:
        return run, snapshots
    return run


def trajectory_loss(net: JumpFilterNet, models: Sequence, trajectory,
                    state_init: str = "truth") -> float:
    """Summed squared error of the fused estimate over one trajectory."""
    x0 = _initial_estimate(trajectory.x0[None], state_init, None)
    run = run_filter(net, models, trajectory.observations[None], x0=x0,
                     targets=trajectory.states[None])
    return float(value_of(run.loss))


def mode_prob_sequence(net: JumpFilterNet, observations: Array) -> Array:
    """Mode probabilities over a (B, T, o) block, untaped, whole batch at once.

    The mode net sees only the observations, never the filter state, so its
    output stream is fixed data to any pass that does not train it.
    """
    B, T, _ = observations.shape
    p = net.mode_net.params()
    hidden = [np.zeros((B, net.mode_net.hidden_size))
              for _ in range(net.mode_net.num_layers)]
    out = np.empty((B, T, net.num_modes))
    for k in range(T):
        mu, hidden = net.mode_net.step(None, p, observations[:, k], hidden)
        out[:, k] = mu
    return out


def _initial_estimate(x0: Array, how: str, rng, noise_scale: float = 1.0):
    if how == "truth":
        return x0
    if how == "zero":
        return np.zeros_like(x0)
    if how == "noisy":
        return x0 + noise_scale * rng.standard_normal(x0.shape)
    raise ValueError(f"unknown state_init {how!r}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 5e-4
    clip_norm: float = 2.5
    segment_length: int | None = None
    state_init: str = "truth"
    init_noise_scale: float = 1.0
    skip_limit: float = 0.1
    divergence_norm: float = 1e8


@dataclass
class TrainResult:
    curves: list
    best_val: float
    best_epoch: int
    epochs_run: int
    diagnostics: dict


def _pack(dataset) -> tuple:
    dataset = [tr.hide_modes() for tr in dataset]
    horizons = {tr.horizon for tr in dataset}
    if len(horizons) != 1:
        raise ValueError("training requires a fixed horizon across the dataset")
    X = np.stack([tr.states for tr in dataset])
    Y = np.stack([tr.observations for tr in dataset])
    x0 = np.stack([tr.x0 for tr in dataset])
    return X, Y, x0


def _state_from_snapshot(snapshots_per_traj, rows, offset):
    """Assemble a batched FilterState from per-trajectory snapshot arrays."""
    proto = snapshots_per_traj[offset]

    def stacked(a):  # (M, N, d) -> (M*B, d), keeping blocks mode-major
        return a[:, rows].reshape(-1, a.shape[-1])

    return FilterState(
        fused=proto["fused"][rows],
        branch_posts=stacked(proto["branch_posts"]),
        branch_priors=stacked(proto["branch_priors"]),
        mode_hidden=[a[rows] for a in proto["mode_hidden"]],
        gain_hidden=stacked(proto["gain_hidden"]),
        prev_obs=proto["prev_obs"][rows],
        step=offset + 1,
    )


def _snapshot_arrays(state: FilterState, num_modes: int) -> dict:
    B = value_of(state.fused).shape[0]
    return {
        "fused": value_of(state.fused),
        "branch_posts": value_of(state.branch_posts).reshape(num_modes, B, -1),
        "branch_priors": value_of(state.branch_priors).reshape(num_modes, B, -1),
        "mode_hidden": [value_of(a) for a in state.mode_hidden],
        "gain_hidden": value_of(state.gain_hidden).reshape(num_modes, B, -1),
        "prev_obs": value_of(state.prev_obs),
    }


def _boundary_states(net, branches, Y, x0, offsets, state_init, rng,
                     noise_scale, eval_batch=512, mu_seq=None):
    """Forward-only pass recording detached states at segment boundaries.

    Per-branch entries are stored (M, N, d); everything else (N, d)."""
    N = Y.shape[0]
    out = {}
    for lo in range(0, N, eval_batch):
        rows = slice(lo, min(lo + eval_batch, N))
        init = _initial_estimate(x0[rows], state_init, rng, noise_scale)
        state = init_filter_state(net, init)
        p = net.params()
        _, snaps = _drive(net, p, branches, Y[rows], None, None, state,
                          snapshot_offsets=tuple(offsets),
                          mu_seq=None if mu_seq is None else mu_seq[rows])
        for off, st in snaps.items():
            arrs = _snapshot_arrays(st, net.num_modes)
            if off not in out:
                dest = {}
                for key, v in arrs.items():
                    if key == "mode_hidden":
                        dest[key] = [np.empty((N,) + a.shape[1:]) for a in v]
                    elif v.ndim == 3:
                        dest[key] = np.empty((v.shape[0], N) + v.shape[2:])
                    else:
                        dest[key] = np.empty((N,) + v.shape[1:])
                out[off] = dest
            dest = out[off]
            for key, v in arrs.items():
                if key == "mode_hidden":
                    for d, a in zip(dest[key], v):
                        d[rows] = a
                elif v.ndim == 3:
                    dest[key][:, rows] = v
                else:
                    dest[key][rows] = v
    return out


def _eval_loss(net, branches, X, Y, x0, state_init, rng, noise_scale,
               divergence_norm, eval_batch=512):
    """(mean per-trajectory loss over healthy rows, diverged count)."""
    N = Y.shape[0]
    total, healthy, bad = 0.0, 0, 0
    p = net.params()
    for lo in range(0, N, eval_batch):
        rows = slice(lo, min(lo + eval_batch, N))
        init = _initial_estimate(x0[rows], state_init, rng, noise_scale)
        state = init_filter_state(net, init)
        run = _drive(net, p, branches, Y[rows], None, None, state,
                     divergence_norm=divergence_norm)
        err = run.estimates - X[rows]
        alive = ~run.diverged
        bad += int(run.diverged.sum())
        healthy += int(alive.sum())
        if alive.any():
            total += float(np.nansum(err[alive] ** 2))
    mean = total / healthy if healthy else np.inf
    return mean, bad


def als_train(net: JumpFilterNet, models: Sequence, train_set, val_set,
              config: TrainConfig, rng: np.random.Generator):
    """Alternating training of the mode predictor and the gain network.

    Each epoch runs one full pass over the batches per parameter group
    (mode predictor first, with the gain frozen; then the reverse), both
    phases minimizing the fused squared error. Validation after each phase;
    the best-validation parameters are restored into ``net`` at the end.
    Batches whose loss comes back non-finite are skipped and counted; more
    than ``skip_limit`` of an epoch's batches aborts training.
    """
    branches = as_branch_models(models)
    X, Y, x0 = _pack(train_set)
    Xv, Yv, x0v = _pack(val_set)
    N, T, _ = Y.shape

    if net.mode_net is not None:
        mean = Y.reshape(-1, Y.shape[-1]).mean(axis=0)
        scale = Y.reshape(-1, Y.shape[-1]).std(axis=0)
        net.set_normalization(mean, np.where(scale > 1e-12, scale, 1.0))

    phases = []
    if net.mode_net is not None:
        phases.append(("mode", net.mode_params(), adam_init(net.mode_params(),
                                                            config.learning_rate)))
    phases.append(("gain", net.gain_params(), adam_init(net.gain_params(),
                                                        config.learning_rate)))

    L = config.segment_length
    use_segments = L is not None and L < T
    segments = segment_for_tbptt([T] * N, L) if use_segments else None
    offsets = sorted({seg.offset for seg in segments}) if use_segments else None

    curves = []
    best = (np.inf, np.inf)
    best_epoch = -1
    best_params = copy.deepcopy(net.params())
    skipped_total = 0
    start = time.perf_counter()

    for epoch in range(config.epochs):
        for phase_name, params, adam in phases:
            phase_rng_perm = rng.permutation
            losses = []
            skipped = 0
            # The gain phase never differentiates the mode parameters, and
            # the mode stream never sees the filter state, so it can be run
            # once over the whole split and fed back in as data.
            mu_train = None
            if phase_name == "gain" and net.mode_net is not None:
                mu_train = mode_prob_sequence(net, Y)
            if use_segments:
                boundary = _boundary_states(net, branches, Y, x0, offsets,
                                            config.state_init, rng,
                                            config.init_noise_scale,
                                            mu_seq=mu_train)
                order = phase_rng_perm(len(segments))
                # Group shuffled segments by start offset: every batch then
                # shares one global clock, which keeps time-varying dynamics
                # exact, and equal horizons make the lengths match for free.
                by_off = {}
                for idx in order:
                    seg = segments[idx]
                    by_off.setdefault(seg.offset, []).append(seg)
                batches = []
                for off in sorted(by_off):
                    segs = by_off[off]
                    for lo in range(0, len(segs), config.batch_size):
                        batches.append(segs[lo:lo + config.batch_size])
                batches = [batches[i] for i in phase_rng_perm(len(batches))]
            else:
                order = phase_rng_perm(N)
                batches = [order[lo:lo + config.batch_size]
                           for lo in range(0, N, config.batch_size)]

            for batch in batches:
                tape = Tape()
                leaves = bind_params(tape, params)
                p = dict(net.params())
                p.update(leaves)
                try:
                    if use_segments:
                        segs = batch
                        rows = np.array([sg.trajectory for sg in segs])
                        off = segs[0].offset
                        state = _state_from_snapshot(boundary, rows, off)
                        stop = off + segs[0].length
                        run = _drive(net, p, branches, Y[rows, off:stop],
                                     X[rows, off:stop], tape, state,
                                     divergence_norm=config.divergence_norm,
                                     mu_seq=None if mu_train is None
                                     else mu_train[rows, off:stop])
                    else:
                        rows = np.asarray(batch)
                        init = _initial_estimate(x0[rows], config.state_init,
                                                 rng, config.init_noise_scale)
                        state = init_filter_state(net, init)
                        run = _drive(net, p, branches, Y[rows], X[rows], tape,
                                     state,
                                     divergence_norm=config.divergence_norm,
                                     mu_seq=None if mu_train is None
                                     else mu_train[rows])
                    loss_value = float(value_of(run.loss))
                    if not np.isfinite(loss_value):
                        raise FilterDivergence(-1)
                except FilterDivergence:
                    skipped += 1
                    continue
                tape.backward(run.loss)
                grads = collect_gradients(leaves)
                clip_gradients(grads, config.clip_norm)
                adam_step(adam, params, grads)
                losses.append(loss_value)

            if batches and skipped > config.skip_limit * len(batches):
                raise TrainingAborted(
                    f"{skipped}/{len(batches)} batches skipped in epoch "
                    f"{epoch} ({phase_name} phase)",
                    {"epoch": epoch, "phase": phase_name, "skipped": skipped,
                     "batches": len(batches), "curves": curves})
            skipped_total += skipped

            val_loss, val_diverged = _eval_loss(net, branches, Xv, Yv, x0v,
                                                config.state_init, rng,
                                                config.init_noise_scale,
                                                config.divergence_norm)
            curves.append({
                "epoch": epoch,
                "phase": phase_name,
                "train_loss": float(np.mean(losses)) if losses else np.nan,
                "val_loss": val_loss,
                "val_diverged": val_diverged,
                "skipped": skipped,
                "wall_time_s": time.perf_counter() - start,
            })
            score = (val_diverged, val_loss)
            if score < best:
                best = score
                best_epoch = epoch
                best_params = copy.deepcopy(net.params())

    net.set_params(best_params)
    return TrainResult(curves, best[1], best_epoch, config.epochs,
                       {"skipped_batches": skipped_total})


def switch_agnostic_baseline(state_dim: int, obs_dim: int,
                             rng: np.random.Generator) -> JumpFilterNet:
    """Single-branch learned filter that assumes one (the first) mode."""
    return JumpFilterNet.build(state_dim, obs_dim, num_modes=1, rng=rng,
                               with_mode_net=False)


# ---------------------------------------------------------------------------
# Model-free GRU baseline
# ---------------------------------------------------------------------------

class SequenceRegressor:
    """Observations -> states with no model knowledge: dense, two GRUs, a
    linear head. Inputs and targets are standardized by frozen constants."""

    def __init__(self, obs_dim: int, state_dim: int, rng: np.random.Generator,
                 hidden_size: int = 128, num_layers: int = 2):
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.hidden_size = hidden_size
        self.input = DenseLayer.init(rng, obs_dim, hidden_size, "relu")
        self.cells = [GRUCell.init(rng, hidden_size, hidden_size)
                      for _ in range(num_layers)]
        self.output = DenseLayer.init(rng, hidden_size, state_dim, "identity")
        self.obs_mean = np.zeros(obs_dim)
        self.obs_scale = np.ones(obs_dim)
        self.state_mean = np.zeros(state_dim)
        self.state_scale = np.ones(state_dim)

    def params(self) -> dict:
        out = dict(self.input.items("seq.input"))
        for i, cell in enumerate(self.cells):
            out.update(cell.items(f"seq.gru{i}"))
        out.update(self.output.items("seq.output"))
        return out

    def set_params(self, new: dict):
        params = self.params()
        for name, arr in params.items():
            arr[...] = new[name]

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "state_dim": self.state_dim,
                "hidden_size": self.hidden_size, "num_layers": len(self.cells),
                "obs_mean": self.obs_mean.tolist(),
                "obs_scale": self.obs_scale.tolist(),
                "state_mean": self.state_mean.tolist(),
                "state_scale": self.state_scale.tolist()}

    def forward(self, Y: Array, tape=None, p=None, targets: Array | None = None):
        """(B, T, o) observations -> ((B, T, s) estimates or None, loss)."""
        if p is None:
            p = self.params()
        B, T, _ = Y.shape
        hidden = [np.zeros((B, self.hidden_size)) for _ in self.cells]
        collect = tape is None
        out = np.empty((B, T, self.state_dim)) if collect else None
        errors = []
        for k in range(T):
            x = ad.dense(tape, (Y[:, k] - self.obs_mean) / self.obs_scale,
                         p["seq.input.weight"], p["seq.input.bias"], "relu")
            for i, cell in enumerate(self.cells):
                x = cell.apply(tape, p, f"seq.gru{i}", hidden[i], x)
                hidden[i] = x
            pred = self.output.apply(tape, p, "seq.output", x)
            pred = ad.affine_const(tape, pred, self.state_scale, self.state_mean)
            if collect:
                out[:, k] = value_of(pred)
            if targets is not None:
                errors.append(ad.sub(tape, pred, targets[:, k]))
        loss = ad.sum_squares(tape, errors) if targets is not None else None
        return out, loss


def mf_gru_baseline(obs_dim: int, state_dim: int,
                    rng: np.random.Generator) -> SequenceRegressor:
    return SequenceRegressor(obs_dim, state_dim, rng)


def train_sequence_regressor(net: SequenceRegressor, train_set, val_set,
                             config: TrainConfig, rng: np.random.Generator):
    """Single-phase Adam training of the model-free baseline (it gets twice
    the epochs of the alternating scheme, one parameter group)."""
    X, Y, _ = _pack(train_set)
    Xv, Yv, _ = _pack(val_set)
    N = Y.shape[0]
    obs_flat = Y.reshape(-1, Y.shape[-1])
    st_flat = X.reshape(-1, X.shape[-1])
    net.obs_mean = obs_flat.mean(axis=0)
    net.obs_scale = np.where(obs_flat.std(axis=0) > 1e-12,
                             obs_flat.std(axis=0), 1.0)
    net.state_mean = st_flat.mean(axis=0)
    net.state_scale = np.where(st_flat.std(axis=0) > 1e-12,
                               st_flat.std(axis=0), 1.0)

    params = net.params()
    adam = adam_init(params, config.learning_rate)
    curves = []
    best = np.inf
    best_epoch = -1
    best_params = copy.deepcopy(params)
    start = time.perf_counter()
    for epoch in range(2 * config.epochs):
        order = rng.permutation(N)
        losses = []
        for lo in range(0, N, config.batch_size):
            rows = order[lo:lo + config.batch_size]
            tape = Tape()
            leaves = bind_params(tape, params)
            _, loss = net.forward(Y[rows], tape, leaves, X[rows])
            loss_value = float(value_of(loss))
            if not np.isfinite(loss_value):
                continue
            tape.backward(loss)
            grads = collect_gradients(leaves)
            clip_gradients(grads, config.clip_norm)
            adam_step(adam, params, grads)
            losses.append(loss_value)
        pred, _ = net.forward(Yv)
        val = float(np.mean(np.sum((pred - Xv) ** 2, axis=(1, 2))))
        curves.append({"epoch": epoch, "phase": "seq",
                       "train_loss": float(np.mean(losses)) if losses else np.nan,
                       "val_loss": val, "val_diverged": 0,
                       "skipped": 0,
                       "wall_time_s": time.perf_counter() - start})
        if val < best:
            best, best_epoch = val, epoch
            best_params = copy.deepcopy(params)
    net.set_params(best_params)
    return TrainResult(curves, best, best_epoch, 2 * config.epochs, {})
