"""Benchmark scenarios: generative systems plus filter-visible models.

Each builder returns a Scenario carrying the generative ModeSystem, the
per-mode models a filter is allowed to see (true maps with true noise
covariances), the transition matrix, and every constant that produced them,
so a serialized scenario is a complete, diffable record of the experiment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .filters import LinearFilterModel, NonlinearFilterModel
from .ssm import (FixedInitialState, GaussianMixtureNoise, GaussianNoise,
                  ImpulseNoise, LaplacianNoise, MarkovChainProcess,
                  ModeDynamics, ModeSystem, NoNoise, SumNoise,
                  gmm_matched, laplacian_matched, linear_mode)

Array = np.ndarray

# Count of spherical-coordinate evaluations that hit the radius clamp.
spherical_clamp_count = 0


@dataclass
class Scenario:
    name: str
    system: ModeSystem
    filter_models: list
    transition: Array
    initial_mode_probs: Array
    horizon: int
    dt: float
    params: dict
    observation_lift: Callable[[Array], Array]
    segment_length: int | None = None

    @property
    def num_modes(self) -> int:
        return len(self.filter_models)

    @property
    def state_dim(self) -> int:
        return self.system.state_dim

    @property
    def obs_dim(self) -> int:
        return self.system.obs_dim

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "params": self.params},
                          indent=2, sort_keys=True)


def scenario_from_json(text: str) -> Scenario:
    blob = json.loads(text)
    return build_scenario(blob["name"], blob.get("params", {}))


def _vec(fn):
    """Lift a batched (n, d) map so it also accepts a single (d,) vector."""

    def wrapped(x, *args):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return fn(x[None], *args)[0]
        return fn(x, *args)

    return wrapped


def _noise_covariance(model) -> Array:
    """Covariance a filter should assume for a (possibly non-Gaussian) noise."""
    if isinstance(model, GaussianNoise):
        return model.covariance.copy()
    return np.diag(model.total_variance())


def _obs_noise(kind: str, variance: float, dim: int):
    if kind == "gauss":
        return GaussianNoise(variance * np.eye(dim))
    if kind == "laplace":
        return laplacian_matched(variance, dim)
    if kind == "gmm":
        return gmm_matched(variance, dim)
    raise ValueError(f"unknown observation noise family {kind!r}")


def _pinv_lift(H: Array) -> Callable[[Array], Array]:
    pinv = np.linalg.pinv(H)

    def lift(y, _P=pinv):
        return y @ _P.T

    return lift


# ---------------------------------------------------------------------------
# Linear tracking (2 and 4 modes)
# ---------------------------------------------------------------------------

def _f_cv(dt: float) -> Array:
    return np.array([[1.0, dt, 0.0, 0.0],
                     [0.0, 1.0, 0.0, 0.0],
                     [0.0, 0.0, 1.0, dt],
                     [0.0, 0.0, 0.0, 1.0]])


def _f_ct(omega: float, dt: float) -> Array:
    # Coordinated turn at rate omega; reduces to _f_cv as omega -> 0.
    wt = omega * dt
    s, c = np.sin(wt), np.cos(wt)
    return np.array([[1.0, s / omega, 0.0, -(1.0 - c) / omega],
                     [0.0, c, 0.0, -s],
                     [0.0, (1.0 - c) / omega, 1.0, s / omega],
                     [0.0, s, 0.0, c]])


_H_POS = np.array([[1.0, 0.0, 0.0, 0.0],
                   [0.0, 0.0, 1.0, 0.0]])


def linear2_tracking(q_cv: float = 0.5, q_ct: float = 2.0, r: float = 5.0,
                     omega: float = 0.1, dt: float = 1.0, horizon: int = 50,
                     obs_noise: str = "gauss") -> Scenario:
    """Two-mode planar tracking: constant velocity vs constant turn.

    State (px, vx, py, vy); positions observed. Mode hold/switch
    probabilities 0.9/0.1 from CV, 0.8/0.2 from CT.
    """
    params = dict(q_cv=q_cv, q_ct=q_ct, r=r, omega=omega, dt=dt,
                  horizon=horizon, obs_noise=obs_noise,
                  transition=[[0.9, 0.1], [0.2, 0.8]],
                  initial_mode_probs=[0.5, 0.5], x0=[0.0, 10.0, 0.0, 10.0])
    Pi = np.array(params["transition"])
    Fs = [_f_cv(dt), _f_ct(omega, dt)]
    Qs = [q_cv * np.eye(4), q_ct * np.eye(4)]
    R = r * np.eye(2)
    noise = [_obs_noise(obs_noise, r, 2) for _ in Fs]
    modes = tuple(linear_mode(F, _H_POS, GaussianNoise(Q), n)
                  for F, Q, n in zip(Fs, Qs, noise))
    system = ModeSystem(modes, MarkovChainProcess(Pi, params["initial_mode_probs"]),
                        FixedInitialState(params["x0"]))
    models = [LinearFilterModel(F, _H_POS, Q, R) for F, Q in zip(Fs, Qs)]
    return Scenario("linear2", system, models, Pi,
                    np.array(params["initial_mode_probs"]), horizon, dt,
                    params, _pinv_lift(_H_POS))


def linear4_long(q_cv: float = 0.5, q_ct: float = 2.0, r: float = 5.0,
                 omega: float = 0.1, dt: float = 0.01, horizon: int = 2000,
                 obs_noise: str = "gauss", diag: float = 0.7,
                 off: float = 0.1, segment_length: int = 20) -> Scenario:
    """Four-mode long-horizon tracking: CV, CT, backward CV, inverse turn."""
    params = dict(q_cv=q_cv, q_ct=q_ct, r=r, omega=omega, dt=dt,
                  horizon=horizon, obs_noise=obs_noise, diag=diag, off=off,
                  segment_length=segment_length,
                  initial_mode_probs=[0.25] * 4, x0=[0.0, 10.0, 0.0, 10.0])
    Pi = np.full((4, 4), off)
    np.fill_diagonal(Pi, diag)
    Fs = [_f_cv(dt), _f_ct(omega, dt), _f_cv(-dt), _f_ct(-omega, dt)]
    Qs = [q_cv * np.eye(4), q_ct * np.eye(4), q_cv * np.eye(4), q_ct * np.eye(4)]
    R = r * np.eye(2)
    modes = tuple(linear_mode(F, _H_POS, GaussianNoise(Q),
                              _obs_noise(obs_noise, r, 2))
                  for F, Q in zip(Fs, Qs))
    system = ModeSystem(modes, MarkovChainProcess(Pi, params["initial_mode_probs"]),
                        FixedInitialState(params["x0"]))
    models = [LinearFilterModel(F, _H_POS, Q, R) for F, Q in zip(Fs, Qs)]
    return Scenario("linear4", system, models, Pi,
                    np.array(params["initial_mode_probs"]), horizon, dt,
                    params, _pinv_lift(_H_POS), segment_length=segment_length)


# ---------------------------------------------------------------------------
# Quadratic motion with optional filter-model mismatch
# ---------------------------------------------------------------------------

def _kinematic_step(p, v, a, dt, gain=1.0):
    """p <- p + v dt + a dt^2 / 2, v <- v + a dt, with the velocity and
    acceleration terms scaled by ``gain`` (1 + m_q on mismatched models)."""
    p_new = p + gain * (v * dt + 0.5 * a * dt * dt)
    v_new = v + gain * a * dt
    return p_new, v_new


def _quadratic_mode_maps(kind: str, dt: float, coeffs, cap: float, gain: float):
    a_c, b_c, c_c = coeffs

    def accel(p):
        if kind == "const":
            return np.ones_like(p), np.zeros_like(p)
        raw = a_c * p * p + b_c * p + c_c
        inside = np.abs(raw) < cap
        return np.clip(raw, -cap, cap), np.where(inside, 2.0 * a_c * p + b_c, 0.0)

    def f(x, t):
        px, vx, py, vy = x[:, 0], x[:, 1], x[:, 2], x[:, 3]
        ax, _ = accel(px)
        ay, _ = accel(py)
        px, vx = _kinematic_step(px, vx, ax, dt, gain)
        py, vy = _kinematic_step(py, vy, ay, dt, gain)
        return np.stack([px, vx, py, vy], axis=1)

    def f_jac(x, t):
        n = x.shape[0]
        J = np.zeros((n, 4, 4))
        for pi, vi in ((0, 1), (2, 3)):
            _, da = accel(x[:, pi])
            J[:, pi, pi] = 1.0 + gain * 0.5 * dt * dt * da
            J[:, pi, vi] = gain * dt
            J[:, vi, pi] = gain * dt * da
            J[:, vi, vi] = 1.0
        return J

    def h(x):
        return x @ _H_POS.T

    def h_jac(x):
        # shared across the batch
        return _H_POS

    return _vec(f), _vec(f_jac), h, h_jac


def quadratic_motion(m_q: float = 0.0, q1: float = 0.5, q2: float = 2.0,
                     r: float = 5.0, dt: float = 1.0, horizon: int = 50,
                     coeffs: Sequence[float] = (1e-4, 1e-2, 1.0),
                     accel_cap: float = 10.0,
                     obs_noise: str = "gauss") -> Scenario:
    """Two accelerating modes: constant (a_x = a_y = 1) and quadratic-in-
    position acceleration, saturated at ``accel_cap``. ``m_q`` >= 0 biases the
    filter-visible kinematics by (1 + m_q) on the velocity and acceleration
    terms; the generative system is always unbiased."""
    if m_q < 0:
        raise ValueError("m_q must be non-negative")
    params = dict(m_q=m_q, q1=q1, q2=q2, r=r, dt=dt, horizon=horizon,
                  coeffs=list(coeffs), accel_cap=accel_cap,
                  obs_noise=obs_noise, transition=[[0.9, 0.1], [0.2, 0.8]],
                  initial_mode_probs=[0.5, 0.5], x0=[0.0, 10.0, 0.0, 10.0])
    Pi = np.array(params["transition"])
    R = r * np.eye(2)
    Qs = [q1 * np.eye(4), q2 * np.eye(4)]
    modes, models = [], []
    for kind, Q in zip(("const", "quad"), Qs):
        f, f_jac, h, h_jac = _quadratic_mode_maps(kind, dt, coeffs, accel_cap, 1.0)
        modes.append(ModeDynamics(4, 2, f, h, f_jac, h_jac, GaussianNoise(Q),
                                  _obs_noise(obs_noise, r, 2)))
        bf, bf_jac, bh, bh_jac = _quadratic_mode_maps(kind, dt, coeffs,
                                                      accel_cap, 1.0 + m_q)
        models.append(NonlinearFilterModel(bf, bh, bf_jac, bh_jac, Q, R))
    system = ModeSystem(tuple(modes),
                        MarkovChainProcess(Pi, params["initial_mode_probs"]),
                        FixedInitialState(params["x0"]))
    return Scenario("quadratic", system, models, Pi,
                    np.array(params["initial_mode_probs"]), horizon, dt,
                    params, _pinv_lift(_H_POS))


# ---------------------------------------------------------------------------
# Switching pendulum
# ---------------------------------------------------------------------------

def _pendulum_mode_maps(kind: str, dt: float, g: float, L: float,
                        gamma: float, a_ext: float, omega_ext: float):
    """Sequential (in-place) Euler update: the angular velocity advances with
    the stored acceleration, the angle with the *new* velocity, and the
    acceleration is refreshed from the mode law at the new sample. This
    in-place reading keeps the free mode's energy bounded."""

    def law(theta, theta_dot, t):
        acc = -(g / L) * np.sin(theta)
        if kind == "damped":
            acc = acc - gamma * theta_dot
        elif kind == "driven":
            acc = acc + a_ext * np.cos(omega_ext * t * dt)
        return acc

    def f(x, t):
        theta, theta_dot, theta_ddot = x[:, 0], x[:, 1], x[:, 2]
        new_dot = theta_dot + dt * theta_ddot
        new_theta = theta + dt * new_dot
        new_ddot = law(new_theta, new_dot, t)
        return np.stack([new_theta, new_dot, new_ddot], axis=1)

    def f_jac(x, t):
        n = x.shape[0]
        new_dot = x[:, 1] + dt * x[:, 2]
        new_theta = x[:, 0] + dt * new_dot
        J = np.zeros((n, 3, 3))
        J[:, 0] = [1.0, dt, dt * dt]
        J[:, 1] = [0.0, 1.0, dt]
        a_theta = -(g / L) * np.cos(new_theta)
        a_dot = -gamma if kind == "damped" else 0.0
        J[:, 2, 0] = a_theta
        J[:, 2, 1] = a_theta * dt + a_dot
        J[:, 2, 2] = a_theta * dt * dt + a_dot * dt
        return J

    return _vec(f), _vec(f_jac), law


_H_ANGLE = np.array([[1.0, 0.0, 0.0]])


def pendulum_switching(sigma_pend: float = 0.1, dt: float = 0.1,
                       horizon: int = 1000, g: float = 9.81, L: float = 10.0,
                       gamma: float = 0.2, a_ext: float = 1.0,
                       omega_ext: float = 2.0, kick_prob: float = 0.01,
                       kick_sigma: float = 1.0, obs_var: float = 10.0,
                       diag: float = 0.7, off: float = 0.1) -> Scenario:
    """Four pendulum modes (free, damped, driven, random kicks), noisy angle
    observations. State noise is N(0, sigma_pend I3); the kick mode adds a
    Bernoulli(kick_prob) Gaussian impulse on the acceleration."""
    params = dict(sigma_pend=sigma_pend, dt=dt, horizon=horizon, g=g, L=L,
                  gamma=gamma, a_ext=a_ext, omega_ext=omega_ext,
                  kick_prob=kick_prob, kick_sigma=kick_sigma, obs_var=obs_var,
                  diag=diag, off=off, initial_mode_probs=[0.25] * 4,
                  x0=[0.5, 0.0, -(g / L) * float(np.sin(0.5))])
    Pi = np.full((4, 4), off)
    np.fill_diagonal(Pi, diag)
    base_noise = (GaussianNoise(sigma_pend * np.eye(3)) if sigma_pend > 0
                  else NoNoise(3))
    R = np.array([[obs_var]])
    modes, models = [], []
    for kind in ("free", "damped", "driven", "free"):
        f, f_jac, _ = _pendulum_mode_maps(kind, dt, g, L, gamma, a_ext, omega_ext)
        if len(modes) == 3:  # kick mode: impulses on the acceleration
            noise = SumNoise((base_noise,
                              ImpulseNoise(3, kick_prob, kick_sigma, component=2)))
        else:
            noise = base_noise
        modes.append(ModeDynamics(3, 1, f, lambda x: x @ _H_ANGLE.T,
                                  f_jac, lambda x: _H_ANGLE,
                                  noise, GaussianNoise(R)))
        models.append(NonlinearFilterModel(
            f, modes[-1].h, f_jac, modes[-1].h_jacobian,
            _noise_covariance(noise), R))
    system = ModeSystem(tuple(modes),
                        MarkovChainProcess(Pi, params["initial_mode_probs"]),
                        FixedInitialState(params["x0"]))
    return Scenario("pendulum", system, models, Pi,
                    np.array(params["initial_mode_probs"]), horizon, dt,
                    params, _pinv_lift(_H_ANGLE))


# ---------------------------------------------------------------------------
# Switching Lorenz attractor
# ---------------------------------------------------------------------------

_LORENZ_B = np.array([[0.0, 0.0, 0.0],
                      [0.0, 0.0, -1.0],
                      [0.0, 1.0, 0.0]])


def _lorenz_A(x: Array) -> Array:
    n = x.shape[0]
    A = np.zeros((n, 3, 3))
    A[:, 0, 0], A[:, 0, 1] = -10.0, 10.0
    A[:, 1, 0], A[:, 1, 1] = 28.0, -1.0
    A[:, 1, 2] = -x[:, 0]
    A[:, 2, 1] = x[:, 0]
    A[:, 2, 2] = -8.0 / 3.0
    return A


def _lorenz_taylor(x: Array, order: int, dt: float) -> Array:
    """F_J(x) = sum_{k<=J} (A(x) dt)^k / k!, batched."""
    M = _lorenz_A(x) * dt
    F = np.broadcast_to(np.eye(3), M.shape).copy()
    P = F.copy()
    for k in range(1, order + 1):
        P = P @ M / k
        F = F + P
    return F


def _lorenz_mode_maps(order: int, dt: float):
    def f(x, t):
        return np.einsum("nij,nj->ni", _lorenz_taylor(x, order, dt), x)

    def f_jac(x, t):
        M = _lorenz_A(x) * dt
        Bdt = _LORENZ_B * dt
        # A depends on the state only through x1, so dF/dx1 is the product
        # rule over each power: d(M^k)/dx1 = sum_i M^i (B dt) M^(k-1-i).
        powers = [np.broadcast_to(np.eye(3), M.shape).copy()]
        for _ in range(order - 1):
            powers.append(powers[-1] @ M)
        inv_fact = 1.0
        dF = np.zeros_like(M)
        Fsum = powers[0].copy()
        P = powers[0].copy()
        for k in range(1, order + 1):
            P = P @ M / k
            Fsum = Fsum + P
            inv_fact /= k
            for i in range(k):
                dF = dF + inv_fact * (powers[i] @ Bdt @ powers[k - 1 - i])
        J = Fsum
        J[:, :, 0] += np.einsum("nij,nj->ni", dF, x)
        return J

    return _vec(f), _vec(f_jac)


def spherical_transform(x: Array) -> Array:
    """(radius, inclination from the x3 axis, azimuth); r clamped at 1e-9."""
    global spherical_clamp_count
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    r = np.linalg.norm(xb, axis=1)
    clamped = r < 1e-9
    if clamped.any():
        spherical_clamp_count += int(clamped.sum())
    r_safe = np.maximum(r, 1e-9)
    incl = np.arccos(np.clip(xb[:, 2] / r_safe, -1.0, 1.0))
    azim = np.arctan2(xb[:, 1], xb[:, 0])
    out = np.stack([r, incl, azim], axis=1)
    return out[0] if single else out


def _spherical_jacobian(x: Array) -> Array:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    n = xb.shape[0]
    r = np.maximum(np.linalg.norm(xb, axis=1), 1e-9)
    J = np.zeros((n, 3, 3))
    J[:, 0] = xb / r[:, None]
    u = np.clip(xb[:, 2] / r, -1.0 + 1e-12, 1.0 - 1e-12)
    du = (np.eye(3)[2] / r[:, None]) - xb * (xb[:, 2] / r**3)[:, None]
    J[:, 1] = -du / np.sqrt(1.0 - u * u)[:, None]
    planar = np.maximum(xb[:, 0] ** 2 + xb[:, 1] ** 2, 1e-18)
    J[:, 2, 0] = -xb[:, 1] / planar
    J[:, 2, 1] = xb[:, 0] / planar
    return J[0] if single else J


def lorenz_switching(noise_db: float = -10.0, dt: float = 0.02,
                     horizon: int = 100, q: float = 0.1,
                     orders: Sequence[int] = (2, 4, 5), diag: float = 0.6,
                     off: float = 0.2) -> Scenario:
    """Lorenz attractor discretized by per-mode Taylor orders; modes 1-2
    observe the full state, mode 3 observes spherical coordinates. The
    per-component observation-noise variance is 10^(noise_db / 10)."""
    params = dict(noise_db=noise_db, dt=dt, horizon=horizon, q=q,
                  orders=list(orders), diag=diag, off=off,
                  initial_mode_probs=[1.0 / 3] * 3, x0=[1.0, 1.0, 1.0])
    M = len(orders)
    Pi = np.full((M, M), off)
    np.fill_diagonal(Pi, diag)
    obs_var = 10.0 ** (noise_db / 10.0)
    Q = q * np.eye(3)
    R = obs_var * np.eye(3)
    eye = np.eye(3)
    identity_h = lambda x: np.asarray(x, dtype=float).copy()
    identity_h_jac = lambda x: eye
    modes, models = [], []
    for i, order in enumerate(orders):
        f, f_jac = _lorenz_mode_maps(order, dt)
        if i == len(orders) - 1:
            h, h_jac = _vec(spherical_transform), _vec(_spherical_jacobian)
        else:
            h, h_jac = identity_h, identity_h_jac
        modes.append(ModeDynamics(3, 3, f, h, f_jac, h_jac,
                                  GaussianNoise(Q), GaussianNoise(R)))
        models.append(NonlinearFilterModel(f, h, f_jac, h_jac, Q, R))
    system = ModeSystem(tuple(modes),
                        MarkovChainProcess(Pi, params["initial_mode_probs"]),
                        FixedInitialState(params["x0"]))
    return Scenario("lorenz", system, models, Pi,
                    np.array(params["initial_mode_probs"]), horizon, dt,
                    params, lambda y: np.array(y, dtype=float))


SCENARIOS = {
    "linear2": linear2_tracking,
    "linear4": linear4_long,
    "quadratic": quadratic_motion,
    "pendulum": pendulum_switching,
    "lorenz": lorenz_switching,
}


def build_scenario(name: str, overrides: dict | None = None) -> Scenario:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SCENARIOS[name](**(overrides or {}))


def csv_ingest(path, state_dim: int, obs_dim: int,
               columns: dict | None = None):
    """Read a dataset of trajectories from CSV (see storage.export_dataset_csv
    for the schema); mode labels are optional in the file."""
    from .storage import ingest_dataset_csv
    return ingest_dataset_csv(path, state_dim, obs_dim, columns)
