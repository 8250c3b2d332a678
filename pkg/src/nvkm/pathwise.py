"""Explicit GP sample paths: random Fourier prior plus Matheron correction.

A path is the finite function

    f(t) = exp(-a |t|**2) * [ sum_i w_i phi_i(t) + sum_j q_j k(t, z_j) ]

with ``phi_i(t) = s * sqrt(2 / N_b) * cos(theta_i . t + beta_i)`` and
``q = K^{-1} (v - Phi w)``. The amplitude ``s`` in the features makes the
prior part share the marginal variance ``s**2`` of the SE kernel. With
``a = 0`` the path interpolates ``v`` at the inducing inputs ``z``.
"""

from __future__ import annotations

from typing import NamedTuple

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl

from nvkm.errors import IllConditionedGram, InvalidArgument
from nvkm.kernels import DEFAULT_JITTER, SeKernel, se_cross, spectral_sample


class FourierBasis(NamedTuple):
    frequencies: jax.Array  # (N_b, dim)
    phases: jax.Array  # (N_b,)
    weights: jax.Array  # (N_b,)
    amplitude: float

    @property
    def size(self):
        return self.phases.shape[0]

    def features(self, t):
        """Feature matrix ``Phi`` of shape (n, N_b) for points ``t`` (n, dim)."""
        scale = self.amplitude * jnp.sqrt(2.0 / self.size)
        return scale * jnp.cos(t @ self.frequencies.T + self.phases)


class ExplicitPath(NamedTuple):
    basis: FourierBasis
    inducing_inputs: jax.Array  # (M, dim)
    coefficients: jax.Array  # (M,)
    kernel: SeKernel
    decay: float = 0.0

    @property
    def dim(self):
        return self.inducing_inputs.shape[1]


class VariationalGaussian(NamedTuple):
    """``Normal(mean, chol @ chol.T)`` with lower-triangular ``chol``."""

    mean: jax.Array
    chol: jax.Array

    @property
    def cov(self):
        return self.chol @ self.chol.T


def draw_basis(k: SeKernel, dim: int, n_basis: int, key) -> FourierBasis:
    if n_basis < 1:
        raise InvalidArgument("n_basis must be >= 1")
    k_theta, k_beta, k_w = jax.random.split(key, 3)
    theta = spectral_sample(k, dim, k_theta, n=n_basis)
    beta = jax.random.uniform(k_beta, (n_basis,), minval=0.0, maxval=2 * jnp.pi)
    w = jax.random.normal(k_w, (n_basis,))
    return FourierBasis(theta, beta, w, k.amplitude)


def basis_from_noise(k: SeKernel, std_freqs, phases, weights) -> FourierBasis:
    """Basis whose frequencies are ``sqrt(2p) * std_freqs``.

    Keeping the standard-normal draws fixed makes the basis a smooth
    function of the kernel hyperparameters.
    """
    return FourierBasis(jnp.sqrt(2.0 * k.precision) * std_freqs, phases, weights, k.amplitude)


def _solve_coefficients(basis, z, v, k, jitter):
    K = se_cross(z, z, k) + jitter * jnp.eye(z.shape[0])
    L = jnp.linalg.cholesky(K)
    resid = v - basis.features(z) @ basis.weights
    return jsl.cho_solve((L, True), resid)


def matheron_coefficients(basis: FourierBasis, z, v, k: SeKernel, jitter=None):
    """Return ``K^{-1} (v - Phi w)`` for inducing inputs ``z`` (M, dim).

    ``jitter`` is relative to ``k.amplitude**2`` (default ``1e-8``).
    """
    z = _as_points(z, basis.frequencies.shape[1])
    v = jnp.asarray(v)
    if v.shape != (z.shape[0],):
        raise InvalidArgument(f"expected {z.shape[0]} inducing values, got {v.shape}")
    rel = DEFAULT_JITTER if jitter is None else jitter
    q = _solve_coefficients(basis, z, v, k, rel * k.amplitude**2)
    if not isinstance(q, jax.core.Tracer) and not bool(jnp.all(jnp.isfinite(q))):
        raise IllConditionedGram("Cholesky of the inducing Gram failed")
    return q


def build_path(k: SeKernel, basis: FourierBasis, z, v, decay=0.0, jitter=DEFAULT_JITTER):
    """Condition a prior basis draw on inducing values; fully traceable."""
    q = _solve_coefficients(basis, z, v, k, jitter * k.amplitude**2)
    return ExplicitPath(basis, z, q, k, decay)


def _as_points(t, dim):
    t = jnp.asarray(t, dtype=float)
    if t.ndim == 0:
        t = t[None, None]
    elif t.ndim == 1:
        t = t[:, None] if dim == 1 else t[None, :]
    if t.shape[-1] != dim:
        raise InvalidArgument(f"point dimension {t.shape[-1]} does not match path dimension {dim}")
    return t


def eval_path(path: ExplicitPath, t):
    """Evaluate a path at one point (dim,) or many points (n, dim).

    For one-dimensional paths a flat vector is read as n scalar times.
    A scalar result is returned for a single point.
    """
    dim = path.dim
    single = jnp.ndim(t) == 0 or (jnp.ndim(t) == 1 and dim > 1)
    pts = _as_points(t, dim)
    prior = path.basis.features(pts) @ path.basis.weights
    update = se_cross(pts, path.inducing_inputs, path.kernel) @ path.coefficients
    out = jnp.exp(-path.decay * jnp.sum(pts**2, axis=-1)) * (prior + update)
    return out[0] if single else out


def sample_inducing(q: VariationalGaussian, key=None, eps=None):
    """Reparameterized draw ``mean + chol @ eps`` with ``eps ~ Normal(0, I)``.

    Pass ``eps`` directly to hold the noise fixed (common random numbers).
    """
    if eps is None:
        eps = jax.random.normal(key, q.mean.shape)
    return q.mean + q.chol @ eps
