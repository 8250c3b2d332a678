"""Closed-form Volterra series outputs for explicit input and kernel paths.

The order-c term for an input path ``u`` and a kernel path
``G(s) = exp(-a |s|**2) G'(s)`` is

    I_c(t) = int exp(-a sum_j (t - tau_j)**2) G'(t - tau) prod_j u(tau_j) dtau.

Substituting the Fourier and kernel parts of ``G'`` factorizes the
c-dimensional integral into products of one-dimensional Gaussian
integrals against ``u``; substituting ``u`` in turn leaves four elementary
integrals (:func:`eval_I1a`, :func:`eval_I1b`, :func:`eval_I2a`,
:func:`eval_I2b`), each of the form ``int exp(-A x**2 + B x) dx``.

Sign convention in the conjugate branch: the second cosine branch
``exp(-i(theta . (t - tau) + beta))`` is the first with every G' frequency
and phase negated. ``I1b`` keeps the input precision ``p_u > 0`` there;
negating it would make the integral diverge.
"""

from __future__ import annotations

import itertools
from functools import lru_cache
from typing import NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from nvkm.errors import InvalidArgument, NumericInconsistency
from nvkm.pathwise import ExplicitPath

IMAG_TOLERANCE = 1e-9


def _is_concrete(*xs):
    return not any(isinstance(x, jax.core.Tracer) for x in xs)


def _require_positive(**values):
    for name, x in values.items():
        if _is_concrete(x) and not np.all(np.asarray(x) > 0):
            raise InvalidArgument(f"{name} must be positive, got {x}")


def _require_nonnegative(**values):
    for name, x in values.items():
        if _is_concrete(x) and not np.all(np.asarray(x) >= 0):
            raise InvalidArgument(f"{name} must be non-negative, got {x}")


def gauss_integral(a, b):
    """``int exp(-a x**2 + b x) dx = sqrt(pi/a) exp(b**2 / 4a)`` for complex ``b``."""
    _require_positive(a=a)
    b = jnp.asarray(b, dtype=complex)
    return jnp.sqrt(jnp.pi / a) * jnp.exp(b**2 / (4.0 * a))


def eval_I1a(t, alpha, theta1, theta2, beta2):
    """``int exp(-alpha (t-tau)**2 + i theta1 (t-tau)) cos(theta2 tau + beta2) dtau``.

    Evaluated as the sum of two Gaussian integrals so that no factor
    ``exp(theta1 theta2 / alpha)`` can overflow.
    """
    _require_positive(alpha=alpha)
    phase = theta2 * t + beta2
    return (
        0.5
        * jnp.sqrt(jnp.pi / alpha)
        * (
            jnp.exp(1j * phase - (theta1 - theta2) ** 2 / (4.0 * alpha))
            + jnp.exp(-1j * phase - (theta1 + theta2) ** 2 / (4.0 * alpha))
        )
    )


def eval_I1b(t, alpha, theta1, p2, z2):
    """``int exp(-alpha (t-tau)**2 + i theta1 (t-tau)) exp(-p2 (tau-z2)**2) dtau``."""
    _require_positive(alpha=alpha, p2=p2)
    s = alpha + p2
    d = t - z2
    return jnp.sqrt(jnp.pi / s) * jnp.exp(
        (-4.0 * alpha * p2 * d**2 + 1j * theta1 * (4.0 * p2 * d + 1j * theta1)) / (4.0 * s)
    )


def eval_I2a(t, alpha, p1, z1, theta2, beta2):
    """``int exp(-alpha (t-tau)**2 - p1 (t-tau-z1)**2) cos(theta2 tau + beta2) dtau``."""
    _require_positive(alpha=alpha)
    _require_nonnegative(p1=p1)
    s = alpha + p1
    return (
        jnp.sqrt(jnp.pi / s)
        * jnp.exp(-(4.0 * alpha * p1 * z1**2 + theta2**2) / (4.0 * s))
        * jnp.cos(theta2 * (t - p1 * z1 / s) + beta2)
    )


def eval_I2b(t, alpha, p1, z1, p2, z2):
    """``int exp(-alpha (t-tau)**2 - p1 (t-tau-z1)**2) exp(-p2 (tau-z2)**2) dtau``."""
    _require_positive(alpha=alpha, p2=p2)
    _require_nonnegative(p1=p1)
    s = alpha + p1 + p2
    return jnp.sqrt(jnp.pi / s) * jnp.exp(
        -(alpha * (p1 * z1**2 + p2 * (t - z2) ** 2) + p1 * p2 * (z1 + z2 - t) ** 2) / s
    )


class VolterraTermInputs(NamedTuple):
    """One order-c term: input path, kernel path G' and the envelope decay.

    ``grid_axis`` may give the 1-D axis whose c-fold Cartesian power (in
    ``itertools.product`` order) forms ``g_path.inducing_inputs``; the
    per-axis integrals are then computed once and gathered.
    """

    u_path: ExplicitPath
    g_path: ExplicitPath
    order: int
    decay: float
    grid_axis: jax.Array | None = None


@lru_cache(maxsize=None)
def grid_index(axis_size: int, order: int) -> np.ndarray:
    """Integer coordinates of the ``axis_size**order`` tensor grid, shape (M, order)."""
    return np.array(list(itertools.product(range(axis_size), repeat=order)), dtype=np.int32).reshape(
        -1, order
    )


def tensor_grid(axis, order: int):
    axis = jnp.asarray(axis)
    return axis[grid_index(int(axis.shape[0]), order)]


def _input_fourier_convolutions(u: ExplicitPath, alpha, t, theta1):
    """``sum_m w_m phi_m`` part of A(theta1, t), via I1a; shape (K, n) complex."""
    b = u.basis
    th = b.frequencies[:, 0]
    amp = b.amplitude * jnp.sqrt(2.0 / b.size)
    # I1a = 0.5 sqrt(pi/alpha) [E- P + E+ conj(P)], P carrying all t dependence
    P = jnp.exp(1j * (th[:, None] * t[None, :] + b.phases[:, None]))
    e_minus = b.weights * jnp.exp(-((theta1[:, None] - th[None, :]) ** 2) / (4.0 * alpha))
    e_plus = b.weights * jnp.exp(-((theta1[:, None] + th[None, :]) ** 2) / (4.0 * alpha))
    return 0.5 * jnp.sqrt(jnp.pi / alpha) * amp * (e_minus @ P + e_plus @ jnp.conj(P))


def _input_update_convolutions(u: ExplicitPath, alpha, t, theta1):
    """``sum_n q_n k_u(., z_n)`` part of A(theta1, t), via I1b; shape (K, n) complex."""
    p = u.kernel.precision
    z = u.inducing_inputs[:, 0]
    s = alpha + p
    kappa = p / s
    # the phase exp(i theta1 kappa (t - z)) splits into a t factor and a z factor
    envelope = u.coefficients[:, None] * jnp.exp(-alpha * kappa * (t[None, :] - z[:, None]) ** 2)
    z_phase = jnp.exp(-1j * kappa * theta1[:, None] * z[None, :])
    t_phase = jnp.exp(1j * kappa * theta1[:, None] * t[None, :])
    pref = u.kernel.amplitude**2 * jnp.sqrt(jnp.pi / s) * jnp.exp(-(theta1**2) / (4.0 * s))
    return pref[:, None] * t_phase * (z_phase @ envelope)


def input_convolutions(u: ExplicitPath, alpha, t, theta1):
    """A(theta1, t) = int exp(-alpha (t-tau)**2 + i theta1 (t-tau)) u(tau) dtau.

    ``theta1`` has shape (K,), ``t`` shape (n,); returns (K, n) complex.
    """
    return _input_fourier_convolutions(u, alpha, t, theta1) + _input_update_convolutions(
        u, alpha, t, theta1
    )


def input_smoothings(u: ExplicitPath, alpha, p1, z1, t):
    """B(z1, t) = int exp(-alpha (t-tau)**2 - p1 (t-tau-z1)**2) u(tau) dtau.

    ``z1`` has shape (K,), ``t`` shape (n,); returns (K, n) real.
    """
    b = u.basis
    th = b.frequencies[:, 0]
    amp = b.amplitude * jnp.sqrt(2.0 / b.size)
    s = alpha + p1
    lam = p1 / s
    # I2a: cos(theta t + beta - theta lam z1) = Re[exp(i(theta t + beta)) exp(-i theta lam z1)]
    P = jnp.exp(1j * (th[:, None] * t[None, :] + b.phases[:, None]))
    Z = (b.weights * jnp.exp(-(th**2) / (4.0 * s)))[None, :] * jnp.exp(
        -1j * lam * z1[:, None] * th[None, :]
    )
    pref = amp * jnp.sqrt(jnp.pi / s) * jnp.exp(-alpha * lam * z1**2)
    fourier = pref[:, None] * jnp.real(Z @ P)

    p2 = u.kernel.precision
    z2 = u.inducing_inputs[:, 0]
    I2b = eval_I2b(t[None, None, :], alpha, p1, z1[:, None, None], p2, z2[None, :, None])
    update = u.kernel.amplitude**2 * jnp.einsum("m,kmn->kn", u.coefficients, I2b)
    return fourier + update


def _term(u: ExplicitPath, g: ExplicitPath, alpha, t, grid_axis=None, both_branches=False):
    """Order-c term at times ``t`` (n,).

    Returns ``(value, magnitude)``; ``value`` is complex when
    ``both_branches`` is set, otherwise the real part computed from the
    first branch alone. ``magnitude`` bounds the Fourier-part summands and
    scales the realness check.
    """
    c = g.dim
    n = t.shape[0]
    bg = g.basis
    n_g = bg.size
    amp_g = bg.amplitude * jnp.sqrt(2.0 / n_g)

    theta = bg.frequencies.reshape(-1)
    A_plus = input_convolutions(u, alpha, t, theta).reshape(n_g, c, n)
    plus = jnp.exp(1j * bg.phases)[:, None] * jnp.prod(A_plus, axis=1)
    magnitude = amp_g * (jnp.abs(bg.weights) @ jnp.abs(plus))
    if both_branches:
        A_minus = input_convolutions(u, alpha, t, -theta).reshape(n_g, c, n)
        minus = jnp.exp(-1j * bg.phases)[:, None] * jnp.prod(A_minus, axis=1)
        fourier_part = 0.5 * amp_g * (bg.weights @ (plus + minus))
    else:
        fourier_part = amp_g * (bg.weights @ jnp.real(plus))

    p_g = g.kernel.precision
    if grid_axis is None:
        m = g.inducing_inputs.shape[0]
        B = input_smoothings(u, alpha, p_g, g.inducing_inputs.reshape(-1), t).reshape(m, c, n)
    else:
        axis = jnp.asarray(grid_axis)
        B = input_smoothings(u, alpha, p_g, axis, t)[grid_index(int(axis.shape[0]), c)]
    update_part = g.kernel.amplitude**2 * (g.coefficients @ jnp.prod(B, axis=1))
    return fourier_part + update_part, magnitude


def _check_inputs(inputs: VolterraTermInputs):
    if inputs.u_path.dim != 1:
        raise InvalidArgument("input path must be one-dimensional")
    if inputs.g_path.dim != inputs.order:
        raise InvalidArgument(
            f"kernel path dimension {inputs.g_path.dim} does not match order {inputs.order}"
        )
    _require_positive(decay=inputs.decay)


def eval_term(inputs: VolterraTermInputs, t):
    """Closed-form value of the order-c Volterra term at ``t`` (scalar or (n,)).

    Both conjugate branches are assembled in complex arithmetic and the
    imaginary residual is checked against the summand magnitude.
    """
    _check_inputs(inputs)
    scalar = jnp.ndim(t) == 0
    tt = jnp.atleast_1d(jnp.asarray(t, dtype=float))
    value, magnitude = _term(
        inputs.u_path, inputs.g_path, inputs.decay, tt, inputs.grid_axis, both_branches=True
    )
    if _is_concrete(value):
        resid = np.abs(np.imag(np.asarray(value)))
        bound = IMAG_TOLERANCE * (np.abs(np.real(np.asarray(value))) + np.asarray(magnitude))
        if np.any(resid > bound + 1e-300):
            raise NumericInconsistency(
                f"imaginary residual {resid.max():.3g} in order-{inputs.order} term"
            )
    out = jnp.real(value)
    return out[0] if scalar else out


def term_values(u: ExplicitPath, g: ExplicitPath, alpha, t, grid_axis=None):
    """Traceable real-valued term evaluation used on the training path."""
    return _term(u, g, alpha, t, grid_axis)[0]


def eval_output_sample(
    u_path: ExplicitPath,
    g_paths: Sequence[ExplicitPath],
    t,
    grid_axes: Sequence | None = None,
    checked: bool = True,
):
    """Sample of one output: the sum over orders c = 1..C of the Volterra terms.

    ``g_paths[c-1]`` is the order-c kernel path; its ``decay`` is the
    envelope rate. ``grid_axes`` optionally gives each path's grid axis.
    """
    scalar = jnp.ndim(t) == 0
    tt = jnp.atleast_1d(jnp.asarray(t, dtype=float))
    axes = grid_axes if grid_axes is not None else [None] * len(g_paths)
    total = jnp.zeros(tt.shape)
    for c, (g, axis) in enumerate(zip(g_paths, axes), start=1):
        inputs = VolterraTermInputs(u_path, g, c, g.decay, axis)
        if checked:
            total = total + eval_term(inputs, tt)
        else:
            total = total + term_values(u_path, g, g.decay, tt, axis)
    return total[0] if scalar else total
