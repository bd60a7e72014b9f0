"""Independent reference computations shared by the test modules."""

import numpy as np
from scipy.optimize import brentq

from emrlab.net import MultiHeadNet


def central_difference(f, theta, h=1e-5):
    grad = np.zeros_like(theta)
    for k in range(theta.shape[0]):
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        grad[k] = (f(up) - f(down)) / (2 * h)
    return grad


def random_instance(seed, hidden=(6, 5), n=7):
    """Net with random weights and biases, redrawn until every pre-activation clears the FD step."""
    rng = np.random.default_rng(seed)
    net = MultiHeadNet(4, hidden=hidden, head_sizes=(3, 4), seed=seed)
    while True:
        net.set_parameters(rng.normal(scale=0.7, size=net.n_params))
        x = rng.normal(size=(n, 4))
        h, margin = x, np.inf
        for li in range(len(hidden)):
            w, b = net.layer(f"trunk.{li}")
            z = h @ w.T + b
            margin = min(margin, np.abs(z).min())
            h = np.maximum(z, 0.0)
        if margin > 1e-3:
            return net, x, rng


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)


def proximal_minimizer(theta_hat, theta_star, R):
    """Root of the numerically differentiated proximal objective."""
    c = R / (1.0 - R)

    def objective(x):
        return 0.5 * (x - theta_hat) ** 2 + 0.5 * c * (x - theta_star) ** 2

    def slope(x, h=1e-3):
        return (objective(x + h) - objective(x - h)) / (2 * h)

    lo, hi = min(theta_hat, theta_star) - 1.0, max(theta_hat, theta_star) + 1.0
    return brentq(slope, lo, hi, xtol=1e-15)
