import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from conftest import make_paths
from nvkm import volterra
from nvkm.errors import InvalidArgument, NumericInconsistency
from nvkm.oracle import quadrature_volterra
from nvkm.pathwise import ExplicitPath, build_path, eval_path
from nvkm.volterra import (
    VolterraTermInputs,
    eval_I1a,
    eval_I1b,
    eval_I2a,
    eval_I2b,
    eval_output_sample,
    eval_term,
    gauss_integral,
    grid_index,
    input_convolutions,
    input_smoothings,
    tensor_grid,
)

# reference values from scipy.integrate.quad (epsabs 1e-15, epsrel 1e-13)
QUAD_GAUSS_A2_B1 = 1.420190975905843
QUAD_GAUSS_A1_COS2 = 0.6520493321732919
QUAD_I1A = complex(-0.09507738063732332, 0.26834761753249015)
QUAD_I1A_NEGATED = complex(0.33471923909666984, -0.2411635154128211)
QUAD_I1B = complex(0.09701170469918467, 0.2684314364773496)
QUAD_I2A = 0.6860535973900433


def test_gauss_integral_standard():
    assert complex(gauss_integral(1.0, 0.0)) == pytest.approx(math.sqrt(math.pi), rel=1e-15)


def test_gauss_integral_against_quadrature():
    assert complex(gauss_integral(2.0, 1.0)) == pytest.approx(QUAD_GAUSS_A2_B1, abs=1e-8)
    value = complex(gauss_integral(1.0, 2j))
    assert value.real == pytest.approx(QUAD_GAUSS_A1_COS2, abs=1e-8)
    assert abs(value.imag) < 1e-15


@pytest.mark.parametrize("fn, args", [
    (gauss_integral, (0.0, 1.0)),
    (eval_I1a, (0.0, -1.0, 0.0, 0.0, 0.0)),
    (eval_I1b, (0.0, 1.0, 0.0, 0.0, 0.0)),
    (eval_I2a, (0.0, 0.0, 1.0, 0.0, 0.0, 0.0)),
    (eval_I2b, (0.0, 1.0, 1.0, 0.0, -1.0, 0.0)),
])
def test_nonpositive_precisions_rejected(fn, args):
    with pytest.raises(InvalidArgument):
        fn(*args)


def test_I1a_reduces_to_gaussian_mass():
    assert complex(eval_I1a(0.37, 1.0, 0.0, 0.0, 0.0)) == pytest.approx(math.sqrt(math.pi), rel=1e-15)


def test_I1a_against_quadrature():
    assert complex(eval_I1a(0.7, 1.3, 0.5, 2.0, 0.3)) == pytest.approx(QUAD_I1A, abs=1e-6)


def test_I1a_with_negated_frequencies():
    # the literal (-theta1, -theta2, beta2) call is the integral of its own integrand ...
    assert complex(eval_I1a(0.7, 1.3, -0.5, -2.0, 0.3)) == pytest.approx(QUAD_I1A_NEGATED, abs=1e-6)
    # ... while the conjugate of the forward term also flips the phase
    fwd = complex(eval_I1a(0.7, 1.3, 0.5, 2.0, 0.3))
    assert complex(eval_I1a(0.7, 1.3, -0.5, -2.0, -0.3)) == pytest.approx(fwd.conjugate(), abs=1e-15)


def test_I1a_matches_unsimplified_closed_form():
    t, a, th1, th2, b = 0.7, 1.3, 0.5, 2.0, 0.3
    direct = (
        math.sqrt(math.pi) / (2 * math.sqrt(a))
        * (1 + np.exp(th1 * th2 / a + 2j * b + 2j * th2 * t))
        * np.exp(-((th1 + th2) ** 2) / (4 * a) - 1j * (b + th2 * t))
    )
    assert complex(eval_I1a(t, a, th1, th2, b)) == pytest.approx(direct, rel=1e-13)


def test_I1a_no_overflow_for_large_frequencies():
    value = complex(eval_I1a(0.0, 0.1, 60.0, 60.0, 0.0))
    assert np.isfinite(value)


def test_I1b_aligned_centres():
    assert complex(eval_I1b(0.4, 1.0, 0.0, 1.0, 0.4)) == pytest.approx(math.sqrt(math.pi / 2), rel=1e-15)


def test_I1b_against_quadrature():
    assert complex(eval_I1b(1.1, 0.8, 1.2, 1.7, -0.4)) == pytest.approx(QUAD_I1B, abs=1e-6)


def test_I1b_real_for_zero_frequency():
    assert abs(complex(eval_I1b(1.1, 0.8, 0.0, 1.7, -0.4)).imag) < 1e-12


def test_I2a_plain_gaussian():
    assert float(eval_I2a(0.3, 1.7, 0.0, 0.9, 0.0, 0.0)) == pytest.approx(math.sqrt(math.pi / 1.7), rel=1e-15)


def test_I2a_against_quadrature():
    assert float(eval_I2a(0.0, 1.0, 2.0, 0.5, 1.5, 0.2)) == pytest.approx(QUAD_I2A, abs=1e-6)


def test_I2a_phase_periodic():
    a = float(eval_I2a(0.3, 1.0, 2.0, 0.5, 1.5, 0.2))
    b = float(eval_I2a(0.3, 1.0, 2.0, 0.5, 1.5, 0.2 + 2 * math.pi))
    assert a == pytest.approx(b, rel=1e-14)


def test_I2b_symmetric_case():
    assert float(eval_I2b(0.0, 1.0, 1.0, 0.0, 1.0, 0.0)) == pytest.approx(math.sqrt(math.pi / 3), rel=1e-15)


def test_I2b_reduces_to_I1b():
    args = (0.8, 1.3, 0.7, -0.2)
    assert float(eval_I2b(args[0], args[1], 0.0, 0.4, args[2], args[3])) == pytest.approx(
        complex(eval_I1b(args[0], args[1], 0.0, args[2], args[3])).real, rel=1e-14
    )


def test_elementary_integrals_fuzz():
    from nvkm.validation import check_integrals

    for result in check_integrals(n_draws=100, seed=11):
        assert result.passed, result.line()


def test_grid_index_order_and_tensor_grid():
    idx = grid_index(3, 2)
    assert idx.shape == (9, 2)
    np.testing.assert_array_equal(idx[:4], [[0, 0], [0, 1], [0, 2], [1, 0]])
    g = np.asarray(tensor_grid(np.array([-1.0, 0.0, 1.0]), 2))
    np.testing.assert_array_equal(g, -g[::-1])


def test_input_convolutions_match_quadrature():
    u, _, alpha, _ = make_paths(seed=3)
    theta = jnp.array([-1.0, 0.0, 2.5])
    t = jnp.array([-1.0, 0.5])
    A = np.asarray(input_convolutions(u, alpha, t, theta))
    tau = np.linspace(-15, 15, 20001)
    w = np.full(len(tau), tau[1] - tau[0])
    w[[0, -1]] /= 2
    uv = np.asarray(eval_path(u, tau))
    for i, th in enumerate(np.asarray(theta)):
        for j, tj in enumerate(np.asarray(t)):
            ref = np.sum(w * np.exp(-alpha * (tj - tau) ** 2 + 1j * th * (tj - tau)) * uv)
            assert A[i, j] == pytest.approx(ref, abs=1e-9)


def test_input_smoothings_match_quadrature():
    u, _, alpha, _ = make_paths(seed=4)
    z1 = jnp.array([-0.5, 0.0, 1.2])
    t = jnp.array([0.3])
    B = np.asarray(input_smoothings(u, alpha, 1.5, z1, t))
    tau = np.linspace(-15, 15, 20001)
    w = np.full(len(tau), tau[1] - tau[0])
    w[[0, -1]] /= 2
    uv = np.asarray(eval_path(u, tau))
    for i, z in enumerate(np.asarray(z1)):
        ref = np.sum(w * np.exp(-alpha * (0.3 - tau) ** 2 - 1.5 * (0.3 - tau - z) ** 2) * uv)
        assert B[i, 0] == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("t", [-2.0, 0.0, 2.0])
def test_first_order_term_matches_quadrature(t):
    u, g, alpha, axis = make_paths(seed=1, order=1, axis_size=15)
    closed = float(eval_term(VolterraTermInputs(u, g, 1, alpha, axis), t))
    ref = quadrature_volterra(u, g, alpha, 1, t)
    assert closed == pytest.approx(ref, rel=1e-4)


def test_second_order_term_matches_quadrature():
    u, g, alpha, axis = make_paths(seed=2, order=2, axis_size=3, m_u=5)
    for t in (-1.0, 0.7):
        closed = float(eval_term(VolterraTermInputs(u, g, 2, alpha, axis), t))
        assert closed == pytest.approx(quadrature_volterra(u, g, alpha, 2, t), rel=1e-3)


def test_grid_axis_gather_equals_direct():
    u, g, alpha, axis = make_paths(seed=5, order=2, axis_size=4)
    t = jnp.linspace(-3, 3, 7)
    direct = eval_term(VolterraTermInputs(u, g, 2, alpha), t)
    gathered = eval_term(VolterraTermInputs(u, g, 2, alpha, axis), t)
    np.testing.assert_allclose(direct, gathered, rtol=1e-12, atol=1e-14)


def test_realness_of_conjugate_assembly():
    u, g, alpha, _ = make_paths(seed=6, order=3)
    t = jnp.linspace(-2, 2, 5)
    value, magnitude = volterra._term(u, g, alpha, t, both_branches=True)
    assert np.all(np.abs(np.imag(value)) <= 1e-9 * (np.abs(np.real(value)) + np.asarray(magnitude)))
    fast = volterra.term_values(u, g, alpha, t)
    np.testing.assert_allclose(np.real(value), fast, rtol=1e-10, atol=1e-13)


def test_broken_conjugate_branch_detected(monkeypatch):
    u, g, alpha, _ = make_paths(seed=7, order=1)
    real_conv = volterra.input_convolutions

    def skewed(u_, a_, t_, theta_):
        out = real_conv(u_, a_, t_, theta_)
        return out * jnp.exp(0.3j) if float(theta_[0]) < 0 or float(theta_[-1]) < 0 else out

    monkeypatch.setattr(volterra, "input_convolutions", skewed)
    with pytest.raises(NumericInconsistency):
        eval_term(VolterraTermInputs(u, g, 1, alpha), jnp.array([0.0, 1.0]))


def test_term_checks_dimensions():
    u, g, alpha, _ = make_paths(order=2)
    with pytest.raises(InvalidArgument):
        eval_term(VolterraTermInputs(u, g, 1, alpha), 0.0)
    with pytest.raises(InvalidArgument):
        eval_term(VolterraTermInputs(g, g, 2, alpha), 0.0)


def test_first_order_linear_in_input_values():
    u, g, alpha, _ = make_paths(seed=8, order=1)
    z = u.inducing_inputs
    zero_basis = u.basis._replace(weights=jnp.zeros_like(u.basis.weights))
    rng = np.random.default_rng(0)
    v1, v2 = rng.standard_normal(len(z)), rng.standard_normal(len(z))

    def term(v):
        path = build_path(u.kernel, zero_basis, z, jnp.asarray(v))
        return eval_term(VolterraTermInputs(path, g, 1, alpha), jnp.array([-1.0, 0.5]))

    np.testing.assert_allclose(term(2.0 * v1 - 3.0 * v2), 2.0 * term(v1) - 3.0 * term(v2), rtol=1e-10, atol=1e-12)


def test_zero_paths_give_zero_output():
    u, g1, alpha, _ = make_paths(order=1)
    _, g2, _, _ = make_paths(order=2)

    def zero(path):
        b = path.basis._replace(weights=jnp.zeros_like(path.basis.weights))
        return ExplicitPath(b, path.inducing_inputs, jnp.zeros_like(path.coefficients), path.kernel, path.decay)

    out = eval_output_sample(zero(u), [zero(g1), zero(g2)], jnp.array([0.0, 1.0]))
    np.testing.assert_array_equal(out, 0.0)


def test_output_sample_is_sum_of_terms_and_matches_oracle():
    u, g1, alpha, _ = make_paths(seed=9, order=1, axis_size=5)
    _, g2, _, _ = make_paths(seed=10, order=2, axis_size=3)
    _, g3, _, _ = make_paths(seed=11, order=3, axis_size=2)
    t = 0.4
    total = float(eval_output_sample(u, [g1, g2, g3], t))
    oracle = sum(quadrature_volterra(u, g, alpha, c, t) for c, g in enumerate([g1, g2, g3], start=1))
    assert total == pytest.approx(oracle, rel=1e-3)


def test_output_sample_gradients_match_finite_differences():
    """d output / d (input inducing values, kernel amplitude) against central differences."""
    from nvkm.kernels import SeKernel
    from nvkm.oracle import finite_diff_grad

    u, g, alpha, _ = make_paths(seed=12, order=2)
    t = jnp.array([0.3, -1.1])

    def f(x):
        ku = SeKernel(x[-1], u.kernel.precision)
        basis = u.basis._replace(amplitude=x[-1])
        path = build_path(ku, basis, u.inducing_inputs, x[:-1])
        return jnp.sum(eval_output_sample(path, [g], t, checked=False))

    x0 = np.concatenate([np.random.default_rng(1).standard_normal(5), [1.1]])
    auto = np.asarray(jax.grad(f)(jnp.asarray(x0)))
    fd = finite_diff_grad(lambda x: float(f(jnp.asarray(x))), x0, step=1e-5)
    np.testing.assert_allclose(auto, fd, rtol=1e-4, atol=1e-8)


def test_output_sample_linear_cost():
    import time

    u, g, alpha, axis = make_paths(order=2)
    f = jax.jit(lambda t: volterra.term_values(u, g, alpha, t, axis))

    def cost(n):
        t = jnp.linspace(-5, 5, n)
        f(t).block_until_ready()
        best = np.inf
        for _ in range(5):
            start = time.perf_counter()
            f(t).block_until_ready()
            best = min(best, time.perf_counter() - start)
        return best

    sizes = np.array([2_000, 8_000, 32_000])
    slope = np.polyfit(np.log(sizes), np.log([cost(n) for n in sizes]), 1)[0]
    # linear work gives a slope near 1, quadratic near 2
    assert 0.5 < slope < 1.5
