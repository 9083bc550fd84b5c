"""Mode-switching state-space models and trajectory simulation.

A system is a finite collection of per-mode dynamics (transition map,
observation map, noise models) plus a mode process that selects which
dynamics act at each step:

    x_t = f^{(j_t)}(x_{t-1}) + w_t,    y_t = h^{(j_t)}(x_t) + v_t,

with j_t in {1..M}. Everything here is plain numpy; dynamics callables are
vectorized over a leading batch axis so large datasets simulate in a few
array operations per step.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_SYM_TOL = 1e-9
_PSD_TOL = 1e-9
_ROW_SUM_TOL = 1e-12


class SimulationError(RuntimeError):
    """A simulated quantity stopped being finite."""

    def __init__(self, step: int, trajectory: int | None = None, what: str = "state"):
        self.step = step
        self.trajectory = trajectory
        where = f"step {step}" if trajectory is None else f"step {step}, trajectory {trajectory}"
        super().__init__(f"non-finite {what} at {where}")


class ModeLabelsHidden(RuntimeError):
    """Mode labels were requested on a trajectory that has them hidden."""


def _check_psd(name: str, cov: Array) -> Array:
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {cov.shape}")
    if not np.isfinite(cov).all():
        raise ValueError(f"{name} has non-finite entries")
    if np.abs(cov - cov.T).max(initial=0.0) > _SYM_TOL:
        raise ValueError(f"{name} is not symmetric")
    cov = 0.5 * (cov + cov.T)
    if cov.shape[0] and np.linalg.eigvalsh(cov).min() < -_PSD_TOL:
        raise ValueError(f"{name} is not positive semi-definite")
    return cov


def _psd_factor(cov: Array) -> Array:
    """Matrix L with L L^T = cov; tolerates semi-definite covariances."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


# ---------------------------------------------------------------------------
# Noise models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian noise with a fixed covariance."""

    covariance: Array

    def __post_init__(self):
        cov = _check_psd("covariance", self.covariance)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_factor", _psd_factor(cov))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        shape = (self.dim,) if n is None else (n, self.dim)
        return rng.standard_normal(shape) @ self._factor.T

    def total_variance(self) -> Array:
        """Per-component variance (diagonal of the covariance)."""
        return np.diag(self.covariance).copy()


@dataclass(frozen=True)
class LaplacianNoise:
    """Independent zero-mean Laplace noise, one scale per component."""

    scales: Array

    def __post_init__(self):
        scales = np.atleast_1d(np.asarray(self.scales, dtype=float))
        if scales.ndim != 1 or (scales < 0).any() or not np.isfinite(scales).all():
            raise ValueError("scales must be a 1-D array of non-negative finite values")
        object.__setattr__(self, "scales", scales)

    @property
    def dim(self) -> int:
        return self.scales.shape[0]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        shape = (self.dim,) if n is None else (n, self.dim)
        return rng.laplace(0.0, 1.0, shape) * self.scales

    def total_variance(self) -> Array:
        # Laplace(b) has variance 2 b^2
        return 2.0 * self.scales**2


@dataclass(frozen=True)
class GaussianMixtureNoise:
    """Finite mixture of Gaussians; component drawn fresh for every sample."""

    weights: Array
    means: Array        # (K, dim)
    covariances: Array  # (K, dim, dim)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covariances, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        if w.ndim != 1 or len(w) != means.shape[0] or len(w) != covs.shape[0]:
            raise ValueError("weights, means and covariances must agree on component count")
        if (w < 0).any() or abs(w.sum() - 1.0) > _ROW_SUM_TOL:
            raise ValueError("weights must be non-negative and sum to 1")
        factors = np.stack([_psd_factor(_check_psd(f"component {k} covariance", covs[k]))
                            for k in range(len(w))])
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "_factors", factors)
        object.__setattr__(self, "_cum_weights", np.cumsum(w))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        count = 1 if n is None else n
        u = rng.random(count)
        comp = np.minimum(np.searchsorted(self._cum_weights, u, side="right"),
                          len(self.weights) - 1)
        z = rng.standard_normal((count, self.dim))
        out = np.einsum("nij,nj->ni", self._factors[comp], z) + self.means[comp]
        return out[0] if n is None else out

    def total_variance(self) -> Array:
        """Per-component variance of the mixture (law of total variance)."""
        second = np.einsum("k,kij->ij", self.weights, self.covariances).diagonal().copy()
        second += self.weights @ self.means**2
        mean = self.weights @ self.means
        return second - mean**2


@dataclass(frozen=True)
class ImpulseNoise:
    """Occasional Gaussian impulse on one component: with probability p,
    add N(0, sigma^2) to component ``component``; otherwise zero."""

    dim: int
    probability: float
    sigma: float
    component: int = -1

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not -self.dim <= self.component < self.dim:
            raise ValueError("component index out of range")

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        count = 1 if n is None else n
        fired = rng.random(count) < self.probability
        magnitude = rng.normal(0.0, self.sigma, count)
        out = np.zeros((count, self.dim))
        out[:, self.component] = fired * magnitude
        return out[0] if n is None else out

    def total_variance(self) -> Array:
        var = np.zeros(self.dim)
        var[self.component] = self.probability * self.sigma**2
        return var


@dataclass(frozen=True)
class NoNoise:
    """Deterministic zero noise (draws nothing from the generator)."""

    dim: int

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        shape = (self.dim,) if n is None else (n, self.dim)
        return np.zeros(shape)

    def total_variance(self) -> Array:
        return np.zeros(self.dim)


@dataclass(frozen=True)
class SumNoise:
    """Sum of independent noise terms (e.g. background Gaussian + impulses)."""

    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise ValueError("SumNoise needs at least one part")
        if len({p.dim for p in parts}) != 1:
            raise ValueError("all parts must share a dimension")
        object.__setattr__(self, "parts", parts)

    @property
    def dim(self) -> int:
        return self.parts[0].dim

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        out = self.parts[0].sample(rng, n)
        for part in self.parts[1:]:
            out = out + part.sample(rng, n)
        return out

    def total_variance(self) -> Array:
        return sum(p.total_variance() for p in self.parts)


def laplacian_matched(variance: float, dim: int) -> LaplacianNoise:
    """Laplace noise whose per-component variance equals ``variance``."""
    return LaplacianNoise(np.full(dim, np.sqrt(variance / 2.0)))


def gmm_matched(variance: float, dim: int) -> GaussianMixtureNoise:
    """Two-component zero-mean mixture (weights 0.8/0.2, variances 0.5v/3v)
    whose per-component variance equals ``variance``."""
    eye = np.eye(dim)
    return GaussianMixtureNoise(
        weights=np.array([0.8, 0.2]),
        means=np.zeros((2, dim)),
        covariances=np.stack([0.5 * variance * eye, 3.0 * variance * eye]),
    )


def sample_noise(model, rng: np.random.Generator, n: int | None = None) -> Array:
    """Draw from a noise model (see the model classes for per-variant law)."""
    return model.sample(rng, n)


# ---------------------------------------------------------------------------
# Initial-state samplers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedInitialState:
    value: Array

    def __post_init__(self):
        object.__setattr__(self, "value", np.asarray(self.value, dtype=float))

    @property
    def dim(self) -> int:
        return self.value.shape[0]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        if n is None:
            return self.value.copy()
        return np.broadcast_to(self.value, (n, self.dim)).copy()


@dataclass(frozen=True)
class GaussianInitialState:
    mean: Array
    covariance: Array

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = _check_psd("covariance", self.covariance)
        if cov.shape[0] != mean.shape[0]:
            raise ValueError("mean and covariance dimensions disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "_factor", _psd_factor(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, rng: np.random.Generator, n: int | None = None) -> Array:
        shape = (self.dim,) if n is None else (n, self.dim)
        return self.mean + rng.standard_normal(shape) @ self._factor.T


# ---------------------------------------------------------------------------
# Mode processes
# ---------------------------------------------------------------------------

def check_transition_matrix(transition: Array) -> Array:
    """Validate a row-stochastic matrix (rows sum to 1 within 1e-12)."""
    T = np.asarray(transition, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"transition matrix must be square, got shape {T.shape}")
    if (T < 0).any() or (T > 1).any():
        raise ValueError("transition probabilities must lie in [0, 1]")
    if np.abs(T.sum(axis=1) - 1.0).max() > _ROW_SUM_TOL:
        raise ValueError("transition matrix rows must sum to 1")
    return T


@dataclass(frozen=True)
class MarkovChainProcess:
    """First-order Markov chain over modes 1..M."""

    transition: Array
    initial: Array | None = None

    def __post_init__(self):
        T = check_transition_matrix(self.transition)
        init = self.initial
        if init is None:
            init = np.full(T.shape[0], 1.0 / T.shape[0])
        init = np.asarray(init, dtype=float)
        if init.shape != (T.shape[0],) or (init < 0).any() or abs(init.sum() - 1.0) > _ROW_SUM_TOL:
            raise ValueError("initial distribution must be a probability vector over the modes")
        object.__setattr__(self, "transition", T)
        object.__setattr__(self, "initial", init)

    @property
    def num_modes(self) -> int:
        return self.transition.shape[0]

    def sample_batch(self, horizon: int, count: int, rng: np.random.Generator) -> Array:
        M = self.num_modes
        cum_rows = np.cumsum(self.transition, axis=1)
        out = np.empty((count, horizon), dtype=np.int64)
        u0 = rng.random(count)
        out[:, 0] = np.minimum(np.searchsorted(np.cumsum(self.initial), u0, side="right"), M - 1)
        u = rng.random((count, horizon - 1)) if horizon > 1 else None
        for t in range(1, horizon):
            rows = cum_rows[out[:, t - 1]]
            out[:, t] = np.minimum((rows < u[:, t - 1, None]).sum(axis=1), M - 1)
        return out + 1

    def sample(self, horizon: int, rng: np.random.Generator) -> Array:
        return self.sample_batch(horizon, 1, rng)[0]


@dataclass(frozen=True)
class ScheduleProcess:
    """Deterministic mode schedule (1-based), replayed for every trajectory."""

    modes: Array

    def __post_init__(self):
        modes = np.asarray(self.modes, dtype=np.int64)
        if modes.ndim != 1 or (modes < 1).any():
            raise ValueError("schedule must be a 1-D array of 1-based mode indices")
        object.__setattr__(self, "modes", modes)

    @property
    def num_modes(self) -> int:
        return int(self.modes.max())

    def sample(self, horizon: int, rng: np.random.Generator) -> Array:
        if len(self.modes) < horizon:
            raise ValueError(f"schedule of length {len(self.modes)} is shorter than horizon {horizon}")
        return self.modes[:horizon].copy()

    def sample_batch(self, horizon: int, count: int, rng: np.random.Generator) -> Array:
        row = self.sample(horizon, rng)
        return np.tile(row, (count, 1))


@dataclass(frozen=True)
class SegmentedUniformProcess:
    """Uniform mode held for a uniformly drawn segment length, repeated."""

    num_modes: int
    min_segment: int
    max_segment: int

    def __post_init__(self):
        if self.num_modes < 1 or self.min_segment < 1 or self.max_segment < self.min_segment:
            raise ValueError("need num_modes >= 1 and 1 <= min_segment <= max_segment")

    def sample(self, horizon: int, rng: np.random.Generator) -> Array:
        out = np.empty(horizon, dtype=np.int64)
        filled = 0
        while filled < horizon:
            length = int(rng.integers(self.min_segment, self.max_segment + 1))
            mode = int(rng.integers(1, self.num_modes + 1))
            out[filled:filled + length] = mode
            filled += length
        return out

    def sample_batch(self, horizon: int, count: int, rng: np.random.Generator) -> Array:
        return np.stack([self.sample(horizon, rng) for _ in range(count)])


def sample_mode_sequence(process, horizon: int, rng: np.random.Generator) -> Array:
    """Length-``horizon`` array of 1-based mode indices."""
    return process.sample(horizon, rng)


# ---------------------------------------------------------------------------
# Dynamics, systems, trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeDynamics:
    """One mode's transition/observation maps with Jacobians and noise.

    ``f(x, t)`` maps states at step t-1 to (noise-free) states at step t and
    must be vectorized over a leading batch axis; ``t`` is the index of the
    step being produced (first simulated step has t = 1). ``f_jacobian(x, t)``
    returns d f / d x with shape (..., s, s); ``h(x)`` and ``h_jacobian(x)``
    behave the same way for the observation map.
    """

    state_dim: int
    obs_dim: int
    f: Callable[[Array, int], Array]
    h: Callable[[Array], Array]
    f_jacobian: Callable[[Array, int], Array]
    h_jacobian: Callable[[Array], Array]
    process_noise: object
    obs_noise: object


def linear_mode(F: Array, H: Array, process_noise, obs_noise) -> ModeDynamics:
    """ModeDynamics for x' = F x, y = H x."""
    F = np.asarray(F, dtype=float)
    H = np.asarray(H, dtype=float)
    s, o = F.shape[0], H.shape[0]
    if F.shape != (s, s) or H.shape != (o, s):
        raise ValueError("F must be (s, s) and H (o, s)")

    def f(x, t, _F=F):
        return x @ _F.T

    def h(x, _H=H):
        return x @ _H.T

    def f_jac(x, t, _F=F):
        return np.broadcast_to(_F, x.shape[:-1] + _F.shape).copy() if np.ndim(x) > 1 else _F.copy()

    def h_jac(x, _H=H):
        return np.broadcast_to(_H, x.shape[:-1] + _H.shape).copy() if np.ndim(x) > 1 else _H.copy()

    return ModeDynamics(s, o, f, h, f_jac, h_jac, process_noise, obs_noise)


@dataclass(frozen=True)
class ModeSystem:
    """A mode process plus per-mode dynamics; the generative model."""

    modes: tuple
    mode_process: object
    initial_state: object

    def __post_init__(self):
        modes = tuple(self.modes)
        if not modes:
            raise ValueError("a system needs at least one mode")
        if len({(m.state_dim, m.obs_dim) for m in modes}) != 1:
            raise ValueError("all modes must share state and observation dimensions")
        for m in modes:
            if m.process_noise.dim != m.state_dim:
                raise ValueError("process noise dimension must equal the state dimension")
            if m.obs_noise.dim != m.obs_dim:
                raise ValueError("observation noise dimension must equal the observation dimension")
        if self.initial_state.dim != modes[0].state_dim:
            raise ValueError("initial state dimension must equal the state dimension")
        object.__setattr__(self, "modes", modes)

    @property
    def num_modes(self) -> int:
        return len(self.modes)

    @property
    def state_dim(self) -> int:
        return self.modes[0].state_dim

    @property
    def obs_dim(self) -> int:
        return self.modes[0].obs_dim


class Trajectory:
    """One simulated rollout: initial state, states, observations, mode labels.

    ``hide_modes()`` returns a view whose labels cannot be read; training
    code receives trajectories in that form so mode supervision is
    structurally impossible rather than merely avoided.
    """

    __slots__ = ("x0", "states", "observations", "_mode_labels", "labels_visible")

    def __init__(self, x0, states, observations, mode_labels, labels_visible=True):
        self.x0 = np.asarray(x0, dtype=float)
        self.states = np.asarray(states, dtype=float)
        self.observations = np.asarray(observations, dtype=float)
        self._mode_labels = None if mode_labels is None else np.asarray(mode_labels, dtype=np.int64)
        self.labels_visible = bool(labels_visible)
        if self.states.shape[0] != self.observations.shape[0]:
            raise ValueError("states and observations must cover the same horizon")
        if self._mode_labels is not None and self._mode_labels.shape[0] != self.states.shape[0]:
            raise ValueError("mode labels must cover the same horizon as the states")

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    def __len__(self) -> int:
        return self.horizon

    @property
    def mode_labels(self) -> Array:
        if not self.labels_visible:
            raise ModeLabelsHidden("mode labels are hidden on this trajectory")
        if self._mode_labels is None:
            raise ModeLabelsHidden("this trajectory carries no mode labels")
        return self._mode_labels

    def hide_modes(self) -> "Trajectory":
        out = Trajectory.__new__(Trajectory)
        out.x0 = self.x0
        out.states = self.states
        out.observations = self.observations
        out._mode_labels = None
        out.labels_visible = False
        return out


def simulate_dataset(system: ModeSystem, horizon: int, count: int,
                     rng: np.random.Generator) -> list[Trajectory]:
    """Simulate ``count`` independent trajectories of length ``horizon``.

    All trajectories advance in lockstep: at each step the batch is split by
    active mode and each mode's dynamics and noise are applied to its group
    (ascending mode order), which keeps the draw order deterministic.
    """
    if horizon < 1 or count < 1:
        raise ValueError("horizon and count must be positive")
    s, o, M = system.state_dim, system.obs_dim, system.num_modes
    modes = system.mode_process.sample_batch(horizon, count, rng)
    if modes.max() > M:
        raise ValueError("mode process produced an index beyond the system's modes")
    x0 = system.initial_state.sample(rng, count)
    states = np.empty((count, horizon, s))
    obs = np.empty((count, horizon, o))
    x_prev = x0
    for t in range(1, horizon + 1):
        active = modes[:, t - 1] - 1
        x_t = np.empty((count, s))
        for j in range(M):
            group = np.flatnonzero(active == j)
            if group.size == 0:
                continue
            mode = system.modes[j]
            x_t[group] = mode.f(x_prev[group], t) + mode.process_noise.sample(rng, group.size)
        if not np.isfinite(x_t).all():
            bad = np.flatnonzero(~np.isfinite(x_t).all(axis=1))[0]
            raise SimulationError(t, int(bad), "state")
        y_t = np.empty((count, o))
        for j in range(M):
            group = np.flatnonzero(active == j)
            if group.size == 0:
                continue
            mode = system.modes[j]
            y_t[group] = mode.h(x_t[group]) + mode.obs_noise.sample(rng, group.size)
        if not np.isfinite(y_t).all():
            bad = np.flatnonzero(~np.isfinite(y_t).all(axis=1))[0]
            raise SimulationError(t, int(bad), "observation")
        states[:, t - 1] = x_t
        obs[:, t - 1] = y_t
        x_prev = x_t
    return [Trajectory(x0[i], states[i], obs[i], modes[i]) for i in range(count)]


def simulate_trajectory(system: ModeSystem, horizon: int,
                        rng: np.random.Generator) -> Trajectory:
    """Simulate a single trajectory (count-1 dataset)."""
    return simulate_dataset(system, horizon, 1, rng)[0]


def finite_difference_jacobian(fn: Callable[[Array], Array], x: Array,
                               eps: float = 1e-6) -> Array:
    """Central-difference Jacobian of ``fn`` at ``x``; entry (i, k) is
    (fn(x + eps e_k)_i - fn(x - eps e_k)_i) / (2 eps)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    J = np.empty((f0.size, x.size))
    for k in range(x.size):
        step = np.zeros_like(x)
        step.flat[k] = eps
        hi = np.asarray(fn(x + step), dtype=float)
        lo = np.asarray(fn(x - step), dtype=float)
        J[:, k] = (hi - lo).ravel() / (2.0 * eps)
    if not np.isfinite(J).all():
        raise ValueError("finite-difference Jacobian has non-finite entries")
    return J
