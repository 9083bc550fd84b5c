"""Classical filters for mode-switching systems: KF, EKF, IMM, bootstrap PF.

All filters consume *filter-visible* models (transition/observation maps plus
assumed noise covariances Q, R); they never touch a generative system's noise
samplers. Likelihood arithmetic runs in log space and every innovation
covariance is factorized through a shared jitter policy.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .ssm import _check_psd, _psd_factor, check_transition_matrix

Array = np.ndarray

_LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(RuntimeError):
    """A covariance stayed non-factorizable after the full jitter ladder."""


def symmetrize(A: Array) -> Array:
    return 0.5 * (A + A.T)


def chol_with_jitter(A: Array, base: float = 1e-9, ceiling: float = 1e-3):
    """Cholesky factor of a symmetric matrix, adding jitter*I on failure.

    Jitter starts at ``base`` and escalates tenfold up to ``ceiling``; if the
    matrix still fails to factorize a NumericalError reports the condition
    estimate. Returns (lower factor, jitter actually used).
    """
    A = symmetrize(np.asarray(A, dtype=float))
    jitter = 0.0
    eye = np.eye(A.shape[0])
    while True:
        try:
            return np.linalg.cholesky(A + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter = base if jitter == 0.0 else jitter * 10.0
            if jitter > ceiling:
                try:
                    cond = np.linalg.cond(A)
                except np.linalg.LinAlgError:
                    cond = np.inf
                raise NumericalError(
                    f"covariance not factorizable after jitter up to {ceiling:g} "
                    f"(condition estimate {cond:.3e})"
                ) from None


def _chol_solve(L: Array, B: Array) -> Array:
    """Solve (L L^T) X = B given the lower factor L."""
    Y = scipy.linalg.solve_triangular(L, B, lower=True)
    return scipy.linalg.solve_triangular(L.T, Y, lower=False)


def gaussian_logpdf(y: Array, mean: Array, cov: Array) -> float:
    """log N(y; mean, cov), factorizing cov through the jitter policy."""
    L, _ = chol_with_jitter(cov)
    resid = np.asarray(y, dtype=float) - np.asarray(mean, dtype=float)
    z = scipy.linalg.solve_triangular(L, resid, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return float(-0.5 * (resid.size * _LOG_2PI + logdet + z @ z))


# ---------------------------------------------------------------------------
# Beliefs and filter-visible models
# ---------------------------------------------------------------------------

@dataclass
class GaussianBelief:
    """Mean and covariance of a Gaussian state estimate."""

    mean: Array
    covariance: Array

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.covariance = np.asarray(self.covariance, dtype=float)

    def validate(self, tol: float = 1e-9):
        if np.abs(self.covariance - self.covariance.T).max(initial=0.0) > tol:
            raise ValueError("belief covariance is not symmetric")
        if np.linalg.eigvalsh(symmetrize(self.covariance)).min() < -tol:
            raise ValueError("belief covariance has negative eigenvalues")

    def copy(self) -> "GaussianBelief":
        return GaussianBelief(self.mean.copy(), self.covariance.copy())


@dataclass
class IMMBelief:
    """Per-mode Gaussian beliefs plus a mode probability vector."""

    branches: list
    mode_probs: Array

    def __post_init__(self):
        self.mode_probs = np.asarray(self.mode_probs, dtype=float)

    def validate(self, tol: float = 1e-9):
        if len(self.branches) != len(self.mode_probs):
            raise ValueError("branch count and mode probability length disagree")
        if (self.mode_probs < -tol).any() or abs(self.mode_probs.sum() - 1.0) > tol:
            raise ValueError("mode probabilities must form a simplex vector")
        for b in self.branches:
            b.validate(tol)

    def fused(self) -> GaussianBelief:
        return fuse_gaussians(self.mode_probs,
                              [b.mean for b in self.branches],
                              [b.covariance for b in self.branches])


@dataclass
class ParticleEnsemble:
    """Weighted particles, each a (state, mode) pair; mode indices 0-based."""

    states: Array   # (N, s)
    modes: Array    # (N,)
    weights: Array  # (N,)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.modes = np.asarray(self.modes, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)

    @property
    def size(self) -> int:
        return self.states.shape[0]

    def validate(self, tol: float = 1e-9):
        if not (self.states.shape[0] == self.modes.shape[0] == self.weights.shape[0]):
            raise ValueError("particle arrays disagree on count")
        if (self.weights < -tol).any() or abs(self.weights.sum() - 1.0) > tol:
            raise ValueError("weights must be non-negative and sum to 1")

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def fused_mean(self) -> Array:
        return self.weights @ self.states

    def mode_probs(self, num_modes: int) -> Array:
        return np.bincount(self.modes, weights=self.weights, minlength=num_modes)


@dataclass(frozen=True)
class LinearFilterModel:
    """Filter-visible linear-Gaussian mode: x' = F x + w, y = H x + v."""

    F: Array
    H: Array
    Q: Array
    R: Array

    def __post_init__(self):
        object.__setattr__(self, "F", np.asarray(self.F, dtype=float))
        object.__setattr__(self, "H", np.asarray(self.H, dtype=float))
        object.__setattr__(self, "Q", _check_psd("Q", self.Q))
        object.__setattr__(self, "R", _check_psd("R", self.R))
        object.__setattr__(self, "_q_factor", _psd_factor(self.Q))

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]

    def apply_f(self, x: Array, t: int) -> Array:
        return x @ self.F.T

    def apply_h(self, x: Array) -> Array:
        return x @ self.H.T

    def jac_f(self, x: Array, t: int) -> Array:
        return self.F

    def jac_h(self, x: Array) -> Array:
        return self.H


@dataclass(frozen=True)
class NonlinearFilterModel:
    """Filter-visible nonlinear mode with Jacobian callables.

    ``f``/``h`` and the Jacobians follow the same batched conventions as
    ModeDynamics; Q and R are the covariances the filter assumes.
    """

    f: Callable[[Array, int], Array]
    h: Callable[[Array], Array]
    f_jacobian: Callable[[Array, int], Array]
    h_jacobian: Callable[[Array], Array]
    Q: Array
    R: Array

    def __post_init__(self):
        object.__setattr__(self, "Q", _check_psd("Q", self.Q))
        object.__setattr__(self, "R", _check_psd("R", self.R))
        object.__setattr__(self, "_q_factor", _psd_factor(self.Q))

    @property
    def state_dim(self) -> int:
        return self.Q.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.R.shape[0]

    def apply_f(self, x: Array, t: int) -> Array:
        return self.f(x, t)

    def apply_h(self, x: Array) -> Array:
        return self.h(x)

    def jac_f(self, x: Array, t: int) -> Array:
        return self.f_jacobian(x, t)

    def jac_h(self, x: Array) -> Array:
        return self.h_jacobian(x)


@dataclass
class StepDiagnostics:
    """Per-step internals of a (E)KF update."""

    gain: Array
    innovation: Array
    innovation_cov: Array
    log_likelihood: float
    prior_mean: Array
    prior_cov: Array
    jitter: float = 0.0


# ---------------------------------------------------------------------------
# Kalman filter and extended Kalman filter
# ---------------------------------------------------------------------------

def _gaussian_update(prior_mean, prior_cov, y, y_pred, H_mat, R):
    S = symmetrize(H_mat @ prior_cov @ H_mat.T + R)
    L, jitter = chol_with_jitter(S)
    if jitter:
        S = S + jitter * np.eye(S.shape[0])
    K = _chol_solve(L, H_mat @ prior_cov).T
    innovation = y - y_pred
    mean = prior_mean + K @ innovation
    cov = symmetrize(prior_cov - K @ S @ K.T)
    z = scipy.linalg.solve_triangular(L, innovation, lower=True)
    loglik = float(-0.5 * (innovation.size * _LOG_2PI
                           + 2.0 * np.sum(np.log(np.diag(L))) + z @ z))
    diag = StepDiagnostics(K, innovation, S, loglik, prior_mean, prior_cov, jitter)
    return GaussianBelief(mean, cov), diag


def kf_step(belief: GaussianBelief, y: Array, model: LinearFilterModel):
    """One Kalman predict/update cycle. Returns (posterior, diagnostics)."""
    F, H, Q, R = model.F, model.H, model.Q, model.R
    prior_mean = F @ belief.mean
    prior_cov = symmetrize(F @ belief.covariance @ F.T + Q)
    return _gaussian_update(prior_mean, prior_cov, np.asarray(y, dtype=float),
                            H @ prior_mean, H, R)


def ekf_step(belief: GaussianBelief, y: Array, model, t: int = 0):
    """One extended-Kalman cycle: Jacobians of f and h stand in for F and H.

    On a LinearFilterModel this reduces to ``kf_step`` exactly.
    """
    x = belief.mean
    F_lin = model.jac_f(x, t)
    prior_mean = model.apply_f(x, t)
    prior_cov = symmetrize(F_lin @ belief.covariance @ F_lin.T + model.Q)
    H_lin = model.jac_h(prior_mean)
    return _gaussian_update(prior_mean, prior_cov, np.asarray(y, dtype=float),
                            model.apply_h(prior_mean), H_lin, model.R)


def _step_for(model, belief, y, t):
    if isinstance(model, LinearFilterModel):
        return kf_step(belief, y, model)
    return ekf_step(belief, y, model, t)


# ---------------------------------------------------------------------------
# Interacting multiple model filter
# ---------------------------------------------------------------------------

def fuse_gaussians(weights: Array, means: Sequence[Array],
                   covs: Sequence[Array]) -> GaussianBelief:
    """Moment-matched convex combination of Gaussians (spread-of-means law)."""
    weights = np.asarray(weights, dtype=float)
    mean = sum(w * m for w, m in zip(weights, means))
    cov = np.zeros_like(covs[0])
    for w, m, P in zip(weights, means, covs):
        d = m - mean
        cov = cov + w * (P + np.outer(d, d))
    return GaussianBelief(mean, symmetrize(cov))


@dataclass
class IMMDiagnostics:
    branch_diagnostics: list
    predicted_probs: Array   # c_j = sum_i Pi_ij mu_i
    mode_logliks: Array
    underflow_fallback: bool = False


def imm_step(belief: IMMBelief, y: Array, models: Sequence, transition: Array,
             t: int = 0):
    """One interacting-multiple-model cycle.

    Mixes branch beliefs under the transition prior, runs one (E)KF per mode
    from its mixed initial condition, reweights modes by observation
    likelihood (in log space), and fuses. Returns
    (posterior IMMBelief, fused GaussianBelief, IMMDiagnostics).
    """
    M = len(models)
    Pi = np.asarray(transition, dtype=float)
    mu = belief.mode_probs
    y = np.asarray(y, dtype=float)

    # Mixing: mu_{i|j} = Pi_ij mu_i / c_j with c_j the predicted mode prob.
    c = Pi.T @ mu
    mixed = []
    for j in range(M):
        if c[j] > 0.0:
            w = Pi[:, j] * mu / c[j]
        else:
            # Unreachable branch this step: mix uniformly so its (weight-zero)
            # estimate stays finite instead of propagating 0/0.
            w = np.full(M, 1.0 / M)
        mixed.append(fuse_gaussians(w, [b.mean for b in belief.branches],
                                    [b.covariance for b in belief.branches]))

    posts, diags = [], []
    for j in range(M):
        post, diag = _step_for(models[j], mixed[j], y, t)
        posts.append(post)
        diags.append(diag)

    logliks = np.array([d.log_likelihood for d in diags])
    with np.errstate(divide="ignore"):
        log_post = logliks + np.log(c)
    finite = np.isfinite(log_post)
    underflow = False
    if finite.any():
        shifted = np.where(finite, log_post - log_post[finite].max(), -np.inf)
        post_mu = np.exp(shifted)
        total = post_mu.sum()
        if total > 0.0 and np.isfinite(total):
            post_mu = post_mu / total
        else:
            underflow = True
            post_mu = c / c.sum()
    else:
        # Every branch underflowed: fall back to the predicted probabilities.
        underflow = True
        post_mu = c / c.sum()

    new_belief = IMMBelief(posts, post_mu)
    fused = new_belief.fused()
    return new_belief, fused, IMMDiagnostics(diags, c, logliks, underflow)


# ---------------------------------------------------------------------------
# Bootstrap particle filter
# ---------------------------------------------------------------------------

@dataclass
class PFDiagnostics:
    ess: float
    resampled: bool
    fused_mean: Array        # estimate under the post-update (pre-resample) weights
    standard_error: Array    # weighted-mean MC standard error, per component
    mode_probs: Array
    weight_underflow: bool = False


def init_particle_ensemble(n: int, initial_state, mode_probs: Array,
                           rng: np.random.Generator) -> ParticleEnsemble:
    """Draw n particles from the initial-state sampler and mode prior."""
    mode_probs = np.asarray(mode_probs, dtype=float)
    states = initial_state.sample(rng, n)
    u = rng.random(n)
    modes = np.minimum(np.searchsorted(np.cumsum(mode_probs), u, side="right"),
                       len(mode_probs) - 1)
    return ParticleEnsemble(states, modes, np.full(n, 1.0 / n))


def systematic_resample(weights: Array, rng: np.random.Generator) -> Array:
    """Systematic resampling: one uniform offset, N evenly spaced positions."""
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(np.cumsum(weights), positions), n - 1)


def pf_step(ensemble: ParticleEnsemble, y: Array, models: Sequence,
            transition: Array, rng: np.random.Generator, t: int = 0,
            resample_threshold: float = 0.5):
    """One bootstrap-PF cycle for a switching system.

    Each particle's mode jumps under the transition matrix, its state
    propagates through that mode's dynamics plus assumed process noise, and
    weights update by the observation likelihood (log space). The fused
    estimate and its Monte-Carlo standard error are taken under the updated
    weights; systematic resampling runs afterwards when ESS < threshold * N.
    """
    n = ensemble.size
    M = len(models)
    y = np.asarray(y, dtype=float)
    cum_rows = np.cumsum(np.asarray(transition, dtype=float), axis=1)

    u = rng.random(n)
    modes = np.minimum((cum_rows[ensemble.modes] < u[:, None]).sum(axis=1), M - 1)

    states = np.empty_like(ensemble.states)
    groups = [np.flatnonzero(modes == j) for j in range(M)]
    for j, group in enumerate(groups):
        if group.size == 0:
            continue
        model = models[j]
        z = rng.standard_normal((group.size, model.state_dim))
        states[group] = model.apply_f(ensemble.states[group], t) + z @ model._q_factor.T

    if not np.isfinite(states).all():
        raise NumericalError(f"non-finite particle state at step {t}")

    log_w = np.log(np.maximum(ensemble.weights, 1e-300))
    for j, group in enumerate(groups):
        if group.size == 0:
            continue
        model = models[j]
        resid = y - model.apply_h(states[group])
        L, _ = chol_with_jitter(model.R)
        sol = scipy.linalg.solve_triangular(L, resid.T, lower=True)
        quad = np.sum(sol**2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        log_w[group] += -0.5 * (y.size * _LOG_2PI + logdet + quad)

    underflow = False
    log_w = log_w - log_w.max()
    w = np.exp(log_w)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        underflow = True
        w = np.full(n, 1.0 / n)
    else:
        w = w / total

    fused = w @ states
    # Standard error of the weighted mean: sqrt(sum_i w_i^2 (x_i - m)^2).
    dev = states - fused
    se = np.sqrt(np.sum((w[:, None] * dev) ** 2, axis=0))
    ess = float(1.0 / np.sum(w**2))
    mode_probs = np.bincount(modes, weights=w, minlength=M)

    resampled = ess < resample_threshold * n
    if resampled:
        idx = systematic_resample(w, rng)
        states, modes = states[idx], modes[idx]
        w = np.full(n, 1.0 / n)

    out = ParticleEnsemble(states, modes, w)
    return out, PFDiagnostics(ess, resampled, fused, se, mode_probs, underflow)


# ---------------------------------------------------------------------------
# Whole-trajectory drivers
# ---------------------------------------------------------------------------

def run_kf(model: LinearFilterModel, observations: Array, belief: GaussianBelief):
    """Filter a full observation sequence; returns (means, covs, diagnostics)."""
    T = observations.shape[0]
    means = np.empty((T, model.state_dim))
    covs = np.empty((T, model.state_dim, model.state_dim))
    diags = []
    for t in range(1, T + 1):
        belief, d = kf_step(belief, observations[t - 1], model)
        means[t - 1], covs[t - 1] = belief.mean, belief.covariance
        diags.append(d)
    return means, covs, diags


def run_ekf(model, observations: Array, belief: GaussianBelief):
    T = observations.shape[0]
    s = model.state_dim
    means = np.empty((T, s))
    covs = np.empty((T, s, s))
    diags = []
    for t in range(1, T + 1):
        belief, d = ekf_step(belief, observations[t - 1], model, t)
        means[t - 1], covs[t - 1] = belief.mean, belief.covariance
        diags.append(d)
    return means, covs, diags


def run_imm(models: Sequence, transition: Array, observations: Array,
            belief: IMMBelief):
    """Returns (fused means, fused covs, mode probabilities, final belief, diags)."""
    T = observations.shape[0]
    s = models[0].state_dim
    means = np.empty((T, s))
    covs = np.empty((T, s, s))
    probs = np.empty((T, len(models)))
    diags = []
    for t in range(1, T + 1):
        belief, fused, d = imm_step(belief, observations[t - 1], models, transition, t)
        means[t - 1], covs[t - 1] = fused.mean, fused.covariance
        probs[t - 1] = belief.mode_probs
        diags.append(d)
    return means, covs, probs, belief, diags


def run_pf(models: Sequence, transition: Array, observations: Array,
           ensemble: ParticleEnsemble, rng: np.random.Generator):
    """Returns (fused means, final ensemble, per-step diagnostics)."""
    T = observations.shape[0]
    means = np.empty((T, models[0].state_dim))
    diags = []
    for t in range(1, T + 1):
        ensemble, d = pf_step(ensemble, observations[t - 1], models, transition, rng, t)
        means[t - 1] = d.fused_mean
        diags.append(d)
    return means, ensemble, diags
