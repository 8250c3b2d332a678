"""Oracle suites comparing the closed-form machinery with brute force.

Each check returns a :class:`CheckResult` with the worst error seen and
the tolerance it was held to. :func:`run_suite` bundles them into the
``quick`` and ``full`` levels driven by ``nvkm validate``.

Error measures
--------------
Integrals are compared relative to ``max(|reference|, 1e-3 * L1)``, where
``L1`` is the integral of the integrand's modulus. This is a plain
relative error unless the integral cancels to below a thousandth of its
mass, where no quadrature rule resolves more digits than the mass allows.
Gradient entries use ``|a - f| / max(|a|, |f|, 1e-6 * max_k |f_k|)``.
"""

from __future__ import annotations

import itertools
import math
import time
import warnings
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree
from scipy import integrate

from nvkm import volterra
from nvkm.kernels import DseKernel, SeKernel, dse_cov, se_cov, se_cross
from nvkm.model import ModelConfig, fix_alpha, init_model, kl_term
from nvkm.oracle import QuadratureGrid, finite_diff_grad, mc_kl, quadrature_volterra
from nvkm.pathwise import (
    ExplicitPath,
    VariationalGaussian,
    build_path,
    draw_basis,
    eval_path,
    matheron_coefficients,
)

CANCELLATION_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    count: int
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return (
            f"[{status}] {self.name}: worst {self.worst:.3g} vs tol {self.tolerance:.0e} "
            f"over {self.count} cases in {self.seconds:.1f}s{extra}"
        )


@dataclass
class Report:
    level: str
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        out = [r.line() for r in self.results]
        n_fail = sum(not r.passed for r in self.results)
        out.append(f"{self.level}: {len(self.results) - n_fail} passed, {n_fail} failed")
        return out


def _relative(value, reference, mass):
    return abs(value - reference) / max(abs(reference), CANCELLATION_FLOOR * mass, 1e-300)


# ---------------------------------------------------------------------------
# elementary integrals


def _quad_complex(f, lo, hi):
    opts = dict(limit=400, epsabs=1e-15, epsrel=1e-12)
    # the tolerances are deliberately beyond reach; quad then reports roundoff
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        re = integrate.quad(lambda x: f(x).real, lo, hi, **opts)[0]
        im = integrate.quad(lambda x: f(x).imag, lo, hi, **opts)[0]
        mass = integrate.quad(lambda x: abs(f(x)), lo, hi, **opts)[0]
    return complex(re, im), mass


def _integral_cases(rng: np.random.Generator, n: int) -> dict:
    """Closed forms (vectorized) and integrands for ``n`` fuzzed parameter draws."""
    t = rng.uniform(-3, 3, n)
    alpha = rng.uniform(0.2, 3.0, n)
    th1 = rng.uniform(-4, 4, n)
    th2 = rng.uniform(-4, 4, n)
    beta = rng.uniform(0, 2 * np.pi, n)
    p1 = rng.uniform(0.0, 3.0, n)
    p2 = rng.uniform(0.1, 3.0, n)
    z1 = rng.uniform(-3, 3, n)
    z2 = rng.uniform(-3, 3, n)
    a = rng.uniform(0.2, 3.0, n)
    b = rng.uniform(-3, 3, n) + 1j * rng.uniform(-4, 4, n)

    cases = {}
    cases["gauss_integral"] = (
        np.asarray(volterra.gauss_integral(a, b)),
        [
            (lambda x, i=i: np.exp(-a[i] * x * x + b[i] * x), b[i].real / (2 * a[i]), a[i])
            for i in range(n)
        ],
    )
    cases["I1a"] = (
        np.asarray(volterra.eval_I1a(t, alpha, th1, th2, beta)),
        [
            (
                lambda s, i=i: np.exp(-alpha[i] * (t[i] - s) ** 2 + 1j * th1[i] * (t[i] - s))
                * np.cos(th2[i] * s + beta[i]),
                t[i],
                alpha[i],
            )
            for i in range(n)
        ],
    )
    cases["I1b"] = (
        np.asarray(volterra.eval_I1b(t, alpha, th1, p2, z2)),
        [
            (
                lambda s, i=i: np.exp(
                    -alpha[i] * (t[i] - s) ** 2 + 1j * th1[i] * (t[i] - s) - p2[i] * (s - z2[i]) ** 2
                ),
                (alpha[i] * t[i] + p2[i] * z2[i]) / (alpha[i] + p2[i]),
                alpha[i] + p2[i],
            )
            for i in range(n)
        ],
    )
    cases["I2a"] = (
        np.asarray(volterra.eval_I2a(t, alpha, p1, z1, th2, beta)),
        [
            (
                lambda s, i=i: np.exp(-alpha[i] * (t[i] - s) ** 2 - p1[i] * (t[i] - s - z1[i]) ** 2)
                * np.cos(th2[i] * s + beta[i])
                + 0j,
                t[i] - p1[i] * z1[i] / (alpha[i] + p1[i]),
                alpha[i] + p1[i],
            )
            for i in range(n)
        ],
    )
    cases["I2b"] = (
        np.asarray(volterra.eval_I2b(t, alpha, p1, z1, p2, z2)),
        [
            (
                lambda s, i=i: np.exp(
                    -alpha[i] * (t[i] - s) ** 2
                    - p1[i] * (t[i] - s - z1[i]) ** 2
                    - p2[i] * (s - z2[i]) ** 2
                )
                + 0j,
                (alpha[i] * t[i] + p1[i] * (t[i] - z1[i]) + p2[i] * z2[i])
                / (alpha[i] + p1[i] + p2[i]),
                alpha[i] + p1[i] + p2[i],
            )
            for i in range(n)
        ],
    )
    return cases


def check_integrals(n_draws: int = 1000, seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    """Fuzz the elementary integrals against adaptive 1-D quadrature."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (closed, integrands) in _integral_cases(rng, n_draws).items():
        start = time.perf_counter()
        worst = 0.0
        for value, (f, center, width) in zip(closed, integrands):
            half = 12.0 / math.sqrt(width)
            ref, mass = _quad_complex(f, center - half, center + half)
            worst = max(worst, _relative(complex(value), ref, mass))
        results.append(
            CheckResult(
                f"integral {name}", bool(worst < tol), worst, tol, n_draws, time.perf_counter() - start
            )
        )
    return results


# ---------------------------------------------------------------------------
# Volterra terms


def _key(rng: np.random.Generator):
    return jax.random.PRNGKey(int(rng.integers(2**31)))


def random_term(rng: np.random.Generator, order: int, axis_size: int, m_u: int = 5, n_basis: int = 10):
    """A random input path, kernel path G' on a tensor grid, decay and grid axis."""
    ku = SeKernel(rng.uniform(0.5, 2.0), rng.uniform(0.1, 1.0))
    kg = SeKernel(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.5))
    vk_range = rng.uniform(1.5, 3.0)
    alpha = fix_alpha(vk_range)
    zu = np.linspace(-4.0, 4.0, m_u)[:, None]
    axis = np.linspace(-vk_range, vk_range, axis_size)
    zg = np.array(list(itertools.product(axis, repeat=order)))
    u = build_path(ku, draw_basis(ku, 1, n_basis, _key(rng)), zu, ku.amplitude * rng.standard_normal(m_u))
    g = build_path(
        kg,
        draw_basis(kg, order, n_basis, _key(rng)),
        zg,
        kg.amplitude * rng.standard_normal(len(zg)),
        decay=alpha,
    )
    return u, g, alpha, axis


def check_volterra(
    order: int,
    n_instances: int,
    seed: int = 0,
    tol: float | None = None,
    axis_size: int | None = None,
    points: int | None = None,
) -> CheckResult:
    """Closed-form ``eval_term`` against the trapezoid oracle on random instances."""
    tol = tol if tol is not None else (1e-4 if order == 1 else 1e-3)
    axis_size = axis_size or {1: 15, 2: 3, 3: 3}.get(order, 3)
    rng = np.random.default_rng([seed, order])
    start = time.perf_counter()
    worst = 0.0
    for i in range(n_instances):
        u, g, alpha, axis = random_term(rng, order, axis_size)
        t = float(rng.uniform(-3.0, 3.0))
        grid_axis = axis if i % 2 else None
        closed = float(volterra.eval_term(volterra.VolterraTermInputs(u, g, order, alpha, grid_axis), t))
        grid = None
        if points is not None:
            grid = QuadratureGrid.around(t, alpha, order, points)
        ref, mass = quadrature_volterra(u, g, alpha, order, t, grid, absolute=True)
        worst = max(worst, _relative(closed, ref, mass))
    return CheckResult(
        f"volterra order {order}", bool(worst < tol), worst, tol, n_instances, time.perf_counter() - start
    )


# ---------------------------------------------------------------------------
# paths, kernels, KL


def _spread_points(rng, m, dim, lengthscale):
    """``m`` random points no closer than one length scale (Gram stays well conditioned)."""
    if dim == 1:
        gaps = lengthscale * rng.uniform(1.0, 2.0, m)
        z = np.cumsum(gaps)
        return (z - z.mean())[:, None]
    side = int(math.ceil(math.sqrt(2 * m)))
    cells = np.array(list(itertools.product(range(side), repeat=2)), dtype=float)
    pick = rng.choice(len(cells), size=m, replace=False)
    z = lengthscale * 1.2 * (cells[pick] + 0.2 * rng.uniform(-1, 1, (m, 2)))
    return z - z.mean(axis=0)


def check_matheron(n_paths: int = 50, seed: int = 0, max_m: int = 30, tol: float = 1e-6) -> CheckResult:
    """Posterior paths reproduce their inducing values at the inducing inputs."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n_paths):
        m = int(rng.integers(1, max_m + 1))
        dim = int(rng.integers(1, 3))
        k = SeKernel(rng.uniform(0.5, 2.0), rng.uniform(0.1, 1.0))
        z = _spread_points(rng, m, dim, k.lengthscale)
        v = k.amplitude * rng.standard_normal(m)
        basis = draw_basis(k, dim, 50, _key(rng))
        q = matheron_coefficients(basis, z, v, k)
        path = ExplicitPath(basis, jnp.asarray(z), q, k, 0.0)
        err = np.abs(np.asarray(eval_path(path, z)).reshape(-1) - v) / (1.0 + np.abs(v))
        worst = max(worst, float(err.max()))
    return CheckResult("matheron interpolation", bool(worst < tol), worst, tol, n_paths, time.perf_counter() - start)


def check_dse_identity(n: int = 20, seed: int = 0, tol: float = 1e-12) -> CheckResult:
    """DSE covariance equals the decay envelope times the SE covariance."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    k = DseKernel(rng.uniform(0.5, 2.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 2.0))
    se = SeKernel(k.amplitude, k.gamma)
    pts = rng.uniform(-3.0, 3.0, (n, 2))
    worst = 0.0
    for a in pts:
        for b in pts:
            lhs = float(dse_cov(a, b, k))
            rhs = math.exp(-k.decay * (a @ a + b @ b)) * float(se_cov(a, b, se))
            worst = max(worst, abs(lhs - rhs))
    return CheckResult("DSE identity", bool(worst < tol), worst, tol, n * n, time.perf_counter() - start)


def random_gaussian_pair(rng: np.random.Generator, m: int):
    """Random SPD prior Gram and variational Gaussian of size ``m``."""
    z = np.sort(rng.uniform(-3.0, 3.0, m))
    k = SeKernel(rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0))
    K = np.asarray(se_cross(z[:, None], z[:, None], k)) + 1e-2 * k.amplitude**2 * np.eye(m)
    A = rng.standard_normal((m, m)) / math.sqrt(m)
    L = np.linalg.cholesky(0.5 * K + 0.3 * A @ A.T + 0.05 * np.eye(m))
    mu = 0.5 * rng.standard_normal(m)
    return VariationalGaussian(jnp.asarray(mu), jnp.asarray(L)), K


def check_kl(
    n_instances: int = 20, n_draws: int = 10**6, seed: int = 0, max_m: int = 20, n_sigma: float = 3.0
) -> list[CheckResult]:
    """Closed-form KL against Monte Carlo, plus KL(prior || prior) ~ 0."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n_instances):
        q, K = random_gaussian_pair(rng, int(rng.integers(1, max_m + 1)))
        exact = float(kl_term(q, K))
        est, se = mc_kl(q, K, n_draws, rng)
        worst = max(worst, abs(est - exact) / se)
    mc = CheckResult(
        "KL vs Monte Carlo (stderr units)",
        bool(worst < n_sigma),
        worst,
        n_sigma,
        n_instances,
        time.perf_counter() - start,
    )
    start = time.perf_counter()
    worst0 = 0.0
    for _ in range(n_instances):
        _, K = random_gaussian_pair(rng, int(rng.integers(1, max_m + 1)))
        prior = VariationalGaussian(jnp.zeros(len(K)), jnp.linalg.cholesky(jnp.asarray(K)))
        worst0 = max(worst0, abs(float(kl_term(prior, K))))
    zero = CheckResult("KL of prior vs itself", bool(worst0 < 1e-10), worst0, 1e-10, n_instances, time.perf_counter() - start)
    return [mc, zero]


# ---------------------------------------------------------------------------
# gradients


def toy_config(order: int = 2, seed: int = 0) -> ModelConfig:
    """Small model used for gradient and ascent checks."""
    return ModelConfig(
        order=order,
        t_min=-5.0,
        t_max=5.0,
        n_input_inducing=5,
        axis_sizes=[5, 4, 3][:order],
        n_basis=10,
        seed=seed,
    )


def toy_generator(order: int = 2, seed: int = 0):
    """Toy model with unit-scale variational means; returns ``(model, rng)``."""
    model = init_model(toy_config(order, seed=10_000 + seed))
    rng = np.random.default_rng([seed, 7])
    params = dict(model.params)
    for name in params:
        if name.endswith(".mean"):
            params[name] = jnp.asarray(rng.standard_normal(params[name].shape))
    return model.with_params(params), rng


def toy_dataset(order: int = 2, seed: int = 0, n: int = 40, noise: float = 0.05):
    """Data drawn from one joint sample of :func:`toy_generator`."""
    from nvkm.data import TimeSeriesDataset
    from nvkm.inference import predict

    model, rng = toy_generator(order, seed)
    cfg = model.config
    t = np.sort(rng.uniform(cfg.t_min, cfg.t_max, n))
    f = predict(model, [t], 1, jax.random.PRNGKey(seed)).samples[0][0]
    return TimeSeriesDataset([t], [f + noise * rng.standard_normal(n)], names=["y"])


def check_gradients(order: int = 2, seed: int = 0, tol: float = 1e-4, samples: int = 3) -> CheckResult:
    """Every trainable-leaf gradient of the seed-fixed ELBO against central differences."""
    from nvkm.inference import draw_noise, full_batch, program

    start = time.perf_counter()
    model = init_model(toy_config(order, seed))
    batch = full_batch(toy_dataset(order, seed))
    draws = draw_noise(model, jax.random.PRNGKey(seed), samples)
    prog = program(model)
    _, grads = prog._value_and_grad(model.params, {}, draws, batch)
    flat, unravel = ravel_pytree(model.params)
    analytic = np.asarray(ravel_pytree(grads)[0])

    def objective(x):
        return float(prog._value(unravel(jnp.asarray(x)), {}, draws, batch))

    x = np.asarray(flat)
    fd = finite_diff_grad(objective, x, step=1e-4 * np.maximum(np.abs(x), 1.0))
    floor = 1e-6 * np.max(np.abs(fd))
    rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    worst = float(rel.max())
    names = sorted(model.params)
    offsets = np.cumsum([0] + [int(np.size(model.params[k])) for k in names])
    bad = names[int(np.searchsorted(offsets, int(rel.argmax()), side="right")) - 1]
    return CheckResult(
        f"ELBO gradient order {order}",
        bool(worst < tol),
        worst,
        tol,
        len(x),
        time.perf_counter() - start,
        f"worst leaf {bad}",
    )


# ---------------------------------------------------------------------------


def run_suite(level: str = "quick", seed: int = 0, log=None) -> Report:
    """Run the oracle suites; ``quick`` covers orders <= 2, ``full`` adds order 3."""
    if level not in ("quick", "full"):
        raise ValueError(f"unknown level {level!r}")
    full = level == "full"
    report = Report(level)

    def add(results):
        for r in results if isinstance(results, list) else [results]:
            report.results.append(r)
            if log is not None:
                log(r.line())

    add(check_integrals(1000 if full else 200, seed))
    add(check_volterra(1, 100, seed))
    add(check_volterra(2, 100, seed))
    if full:
        add(check_volterra(3, 20, seed))
    add(check_matheron(50, seed))
    add(check_dse_identity(20, seed))
    add(check_kl(20 if full else 5, 10**6 if full else 10**5, seed))
    add(check_gradients(1, seed))
    add(check_gradients(2, seed))
    if full:
        add(check_gradients(3, seed))
    return report
