"""Squared-exponential and decaying squared-exponential covariances.

Both kernels are parameterized by precision rather than length scale:

    SE:   k(t, t') = s**2 * exp(-p * |t - t'|**2),             p = 1 / (2 l**2)
    DSE:  k(t, t') = s**2 * exp(-a * (|t|**2 + |t'|**2) - g * |t - t'|**2),  g = 1 / l**2

All functions accept numpy or JAX arrays and are traceable, except
:func:`gram`, which needs concrete values to escalate jitter.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from nvkm.errors import IllConditionedGram, InvalidArgument

DEFAULT_JITTER = 1e-8
MAX_JITTER = 1e-4


class SeKernel(NamedTuple):
    amplitude: float
    precision: float

    @classmethod
    def from_lengthscale(cls, amplitude, lengthscale):
        return cls(amplitude, 1.0 / (2.0 * lengthscale**2))

    @property
    def lengthscale(self):
        return 1.0 / jnp.sqrt(2.0 * self.precision)


class DseKernel(NamedTuple):
    amplitude: float
    decay: float
    gamma: float

    @classmethod
    def from_lengthscale(cls, amplitude, decay, lengthscale):
        return cls(amplitude, decay, 1.0 / lengthscale**2)


def _as_vectors(t, t_prime):
    t = jnp.atleast_1d(jnp.asarray(t))
    t_prime = jnp.atleast_1d(jnp.asarray(t_prime))
    if t.shape != t_prime.shape:
        raise InvalidArgument(f"dimension mismatch: {t.shape} vs {t_prime.shape}")
    return t, t_prime


def se_cov(t, t_prime, k: SeKernel):
    """SE covariance between two points of equal dimension."""
    t, t_prime = _as_vectors(t, t_prime)
    return k.amplitude**2 * jnp.exp(-k.precision * jnp.sum((t - t_prime) ** 2))


def dse_cov(t, t_prime, k: DseKernel):
    t, t_prime = _as_vectors(t, t_prime)
    return k.amplitude**2 * jnp.exp(
        -k.decay * (jnp.sum(t**2) + jnp.sum(t_prime**2))
        - k.gamma * jnp.sum((t - t_prime) ** 2)
    )


def se_cross(x, y, k: SeKernel):
    """Cross-covariance matrix between row-stacked points ``x`` (n, d) and ``y`` (m, d)."""
    sq = jnp.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    return k.amplitude**2 * jnp.exp(-k.precision * sq)


def spectral_sample(k: SeKernel, dim: int, key, n: int | None = None):
    """Draw frequencies from the normalized spectral density of ``k``.

    For ``exp(-p r**2)`` the spectral density is Gaussian with variance
    ``2 p`` per coordinate, so ``E[cos(theta . r)] = exp(-p |r|**2)``.
    Returns shape ``(dim,)``, or ``(n, dim)`` when ``n`` is given.
    """
    if dim < 1:
        raise InvalidArgument("dim must be >= 1")
    shape = (dim,) if n is None else (n, dim)
    return jnp.sqrt(2.0 * k.precision) * jax.random.normal(key, shape)


def gram(points, cov: Callable, jitter: float | None = None) -> np.ndarray:
    """Gram matrix of ``cov`` over ``points`` with a diagonal jitter.

    ``jitter`` is absolute; by default it is ``1e-8`` times the largest
    diagonal entry and is escalated tenfold until Cholesky succeeds or it
    would exceed ``1e-4`` times that entry. An explicit ``jitter=0`` is
    never escalated.
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise InvalidArgument("gram needs at least one point")
    if pts.ndim == 1:
        pts = pts[:, None]
    pts = jnp.asarray(pts)
    K = np.asarray(jax.vmap(lambda a: jax.vmap(lambda b: cov(a, b))(pts))(pts))
    K = 0.5 * (K + K.T)
    scale = float(np.max(np.diag(K)))
    if jitter is None:
        jitter = DEFAULT_JITTER * scale
    ceiling = MAX_JITTER * scale
    while True:
        Kj = K + jitter * np.eye(len(K))
        try:
            np.linalg.cholesky(Kj)
            return Kj
        except np.linalg.LinAlgError:
            pass
        if jitter <= 0 or jitter * 10 > ceiling * (1 + 1e-12):
            raise IllConditionedGram(
                f"Cholesky failed for {len(K)}x{len(K)} Gram (last jitter {jitter:.3g})"
            )
        jitter *= 10
