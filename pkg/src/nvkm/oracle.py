"""Brute-force references used to validate the closed-form machinery.

Nothing here is used on the production path. The quadrature oracle only
calls :func:`nvkm.pathwise.eval_path`, so it shares no algebra with
:mod:`nvkm.volterra`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from nvkm.errors import InvalidArgument, UnsupportedOrder
from nvkm.pathwise import ExplicitPath, VariationalGaussian, eval_path

MIN_POINTS = 64
DEFAULT_HALF_WIDTH = 12.0


@dataclass(frozen=True)
class QuadratureGrid:
    lower: tuple
    upper: tuple
    points: tuple

    def __post_init__(self):
        if not (len(self.lower) == len(self.upper) == len(self.points)):
            raise InvalidArgument("grid bounds and point counts must have equal length")
        if min(self.points) < MIN_POINTS:
            raise InvalidArgument(f"need at least {MIN_POINTS} points per dimension")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise InvalidArgument("grid lower bounds must be below upper bounds")

    @classmethod
    def around(cls, t: float, alpha: float, order: int, points: int, half_width=DEFAULT_HALF_WIDTH):
        """Cube ``[t - h/sqrt(alpha), t + h/sqrt(alpha)]**order``."""
        r = half_width / np.sqrt(alpha)
        return cls((t - r,) * order, (t + r,) * order, (points,) * order)

    def nodes(self, dim):
        return np.linspace(self.lower[dim], self.upper[dim], self.points[dim])

    def weights(self, dim):
        x = self.nodes(dim)
        w = np.full(len(x), x[1] - x[0])
        w[[0, -1]] *= 0.5
        return w


def quadrature_volterra(
    u_path: ExplicitPath,
    g_path: ExplicitPath,
    alpha: float,
    order: int,
    t: float,
    grid: QuadratureGrid | None = None,
    chunk: int = 1 << 16,
    absolute: bool = False,
):
    """Trapezoid approximation of the order-c Volterra integral at ``t``.

    The integrand is ``exp(-alpha sum (t-tau)**2) G'(t - tau) prod u(tau_j)``
    with ``G'`` the undecayed kernel path. With ``absolute`` the same rule
    applied to the integrand's modulus is returned as well, as a scale for
    relative errors when the integral nearly cancels.
    """
    if order > 3:
        raise UnsupportedOrder("quadrature oracle supports order <= 3")
    if g_path.dim != order:
        raise InvalidArgument("kernel path dimension must equal order")
    if grid is None:
        grid = QuadratureGrid.around(t, alpha, order, points=2048 if order == 1 else 256 if order == 2 else 96)
    g_stationary = g_path._replace(decay=0.0)
    axes = [grid.nodes(i) for i in range(order)]
    weighted_u = [
        grid.weights(i) * np.asarray(eval_path(u_path, axes[i])) for i in range(order)
    ]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, order)
    coef = weighted_u[0]
    for wu in weighted_u[1:]:
        coef = np.multiply.outer(coef, wu)
    coef = coef.reshape(-1)

    total = 0.0
    mass = 0.0
    for start in range(0, len(mesh), chunk):
        s = t - mesh[start : start + chunk]
        g_vals = np.asarray(eval_path(g_stationary, s)) * np.exp(-alpha * np.sum(s**2, axis=1))
        total += float(np.dot(g_vals, coef[start : start + chunk]))
        mass += float(np.dot(np.abs(g_vals), np.abs(coef[start : start + chunk])))
    return (total, mass) if absolute else total


def mc_kl(q: VariationalGaussian, prior_gram, n_draws: int, rng: np.random.Generator, chunk=100_000):
    """Monte-Carlo ``KL[q || Normal(0, K)]``: returns (estimate, standard error)."""
    if n_draws < 1000:
        raise InvalidArgument("mc_kl needs n_draws >= 1000")
    mu = np.asarray(q.mean, dtype=float)
    L = np.asarray(q.chol, dtype=float)
    K = np.asarray(prior_gram, dtype=float)
    m = len(mu)
    cf = scipy.linalg.cho_factor(K, lower=True)
    logdet_k = 2.0 * np.sum(np.log(np.diag(cf[0])))
    logdet_q = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        eps = rng.standard_normal((n, m))
        v = mu + eps @ L.T
        log_q = -0.5 * np.sum(eps**2, axis=1) - 0.5 * logdet_q
        log_p = -0.5 * np.sum(v * scipy.linalg.cho_solve(cf, v.T).T, axis=1) - 0.5 * logdet_k
        d = log_q - log_p
        total += d.sum()
        total_sq += (d**2).sum()
        done += n
    mean = total / n_draws
    var = max(total_sq / n_draws - mean**2, 0.0)
    return mean, np.sqrt(var / n_draws)


def finite_diff_grad(objective: Callable[[np.ndarray], float], params, step=1e-5) -> np.ndarray:
    """Central differences of a deterministic scalar objective.

    ``step`` may be a scalar or one step per coordinate.
    """
    x = np.array(params, dtype=float).reshape(-1)
    h = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    grad = np.empty_like(x)
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        grad[i] = (objective(xp) - objective(xm)) / (2.0 * h[i])
    return grad.reshape(np.shape(params))
