"""Independent reference implementations used as test oracles.

Everything here is written from first principles in plain numpy, without
importing the library's filters or autodiff, so agreement between the two
is evidence rather than tautology.
"""
import numpy as np


def batch_kf_posterior(F, H, Q, R, m0, P0, ys):
    """Posterior mean and covariance of x_t given y_{1:t}, for every t, by
    Gaussian conditioning on the jointly Gaussian stacked vector.

    The model is x_t = F x_{t-1} + w_t, y_t = H x_t + v_t with x_0 ~
    N(m0, P0), w ~ N(0, Q), v ~ N(0, R), all independent. Writing
    z = [x_0, w_1..w_T, v_1..v_T], both the stacked states X and stacked
    observations Y are linear images of z, so their joint covariance is
    G C_z G^T and each posterior is one Schur-complement conditioning.
    No filtering recursion is involved.

    Returns (means, covs) with shapes (T, s) and (T, s, s).
    """
    F, H, Q, R = (np.asarray(a, dtype=float) for a in (F, H, Q, R))
    ys = np.asarray(ys, dtype=float)
    T = ys.shape[0]
    s, o = F.shape[0], H.shape[0]

    # X = A z restricted to the [x_0, w] part: x_t = F^t x_0 + sum F^{t-k} w_k.
    A = np.zeros((T * s, s + T * s))
    powers = [np.eye(s)]
    for _ in range(T):
        powers.append(F @ powers[-1])
    for t in range(1, T + 1):
        r0 = (t - 1) * s
        A[r0:r0 + s, :s] = powers[t]
        for k in range(1, t + 1):
            c0 = s + (k - 1) * s
            A[r0:r0 + s, c0:c0 + s] = powers[t - k]

    H_big = np.kron(np.eye(T), H)
    z_dim = s + T * s + T * o
    G = np.zeros((T * s + T * o, z_dim))
    G[:T * s, :s + T * s] = A
    G[T * s:, :s + T * s] = H_big @ A
    G[T * s:, s + T * s:] = np.eye(T * o)

    C_z = np.zeros((z_dim, z_dim))
    C_z[:s, :s] = P0
    for k in range(T):
        i = s + k * s
        C_z[i:i + s, i:i + s] = Q
        j = s + T * s + k * o
        C_z[j:j + o, j:j + o] = R
    mean_z = np.zeros(z_dim)
    mean_z[:s] = m0

    joint_mean = G @ mean_z
    joint_cov = G @ C_z @ G.T
    y_flat = ys.reshape(-1)

    means = np.empty((T, s))
    covs = np.empty((T, s, s))
    for t in range(1, T + 1):
        xi = slice((t - 1) * s, t * s)
        yi = slice(T * s, T * s + t * o)
        Sxx = joint_cov[xi, xi]
        Sxy = joint_cov[xi, yi]
        Syy = joint_cov[yi, yi]
        resid = y_flat[:t * o] - joint_mean[yi]
        gain = np.linalg.solve(Syy, Sxy.T).T
        means[t - 1] = joint_mean[xi] + gain @ resid
        covs[t - 1] = Sxx - gain @ Sxy.T
    return means, covs


def fixed_gain_estimates(F, H, K, m0, ys):
    """Estimates of the constant-gain recursion m <- F m + K (y - H F m)."""
    m = np.asarray(m0, dtype=float).copy()
    out = np.empty((ys.shape[0], m.shape[0]))
    for t in range(ys.shape[0]):
        pred = F @ m
        m = pred + K @ (ys[t] - H @ pred)
        out[t] = m
    return out


def gru_reference(h, x, Wz, Wr, Wc, bz, br, bc):
    """Gated recurrent unit written with one matrix per gate:
    z = sig(Wz [h, x] + bz), r = sig(Wr [h, x] + br),
    c = tanh(Wc [r h, x] + bc), h' = (1 - z) h + z c.
    """
    hx = np.concatenate([h, x], axis=-1)
    z = 1.0 / (1.0 + np.exp(-(hx @ Wz + bz)))
    r = 1.0 / (1.0 + np.exp(-(hx @ Wr + br)))
    rhx = np.concatenate([r * h, x], axis=-1)
    c = np.tanh(rhx @ Wc + bc)
    return (1.0 - z) * h + z * c


def adam_reference(params, grads_seq, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam with bias correction, applied to a list of per-step
    gradient dicts; returns the final parameters (inputs untouched)."""
    params = {k: np.array(v, dtype=float) for k, v in params.items()}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    for count, grads in enumerate(grads_seq, start=1):
        for k, g in grads.items():
            m[k] = beta1 * m[k] + (1 - beta1) * g
            v[k] = beta2 * v[k] + (1 - beta2) * g * g
            m_hat = m[k] / (1 - beta1**count)
            v_hat = v[k] / (1 - beta2**count)
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def lorenz_rhs(x):
    """Classic Lorenz vector field, sigma = 10, rho = 28, beta = 8/3."""
    return np.array([10.0 * (x[1] - x[0]),
                     x[0] * (28.0 - x[2]) - x[1],
                     x[0] * x[1] - (8.0 / 3.0) * x[2]])


def rk4_flow(rhs, x, total_time, steps):
    """Integrate dx/dt = rhs(x) over total_time with ``steps`` RK4 substeps."""
    x = np.asarray(x, dtype=float).copy()
    h = total_time / steps
    for _ in range(steps):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def pendulum_energy(theta, theta_dot, g, L):
    """Energy (per unit mass) of a free pendulum of length L:
    kinetic (1/2) L^2 w^2 plus potential g L (1 - cos theta)."""
    return 0.5 * L**2 * np.asarray(theta_dot)**2 + g * L * (1.0 - np.cos(theta))


def fd_gradients(loss_fn, arrays, eps=1e-6):
    """Central-difference gradients of a scalar ``loss_fn()`` with respect to
    every entry of every array in ``arrays`` (perturbed in place)."""
    out = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out[name] = g
    return out


def gradient_mismatch(fd, tape, abs_floor=1e-6):
    """Worst relative disagreement between two gradient dicts; entries whose
    absolute difference is under ``abs_floor`` count as agreeing exactly."""
    worst = 0.0
    for name in fd:
        a = np.asarray(fd[name], dtype=float).ravel()
        b = np.asarray(tape[name], dtype=float).ravel()
        absdiff = np.abs(a - b)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
        rel = np.where(absdiff < abs_floor, 0.0, absdiff / denom)
        worst = max(worst, float(rel.max()))
    return worst
