import itertools

import jax
import numpy as np
import pytest

import nvkm  # noqa: F401  (enables float64)
from nvkm.kernels import SeKernel
from nvkm.pathwise import build_path, draw_basis


def make_paths(seed=0, order=1, m_u=5, axis_size=3, n_basis=10, vk_range=2.0, alpha=None):
    """Input path on [-4, 4] and a kernel path G' on a tensor grid over [-r, r]."""
    from nvkm.model import fix_alpha

    rng = np.random.default_rng(seed)
    key = jax.random.PRNGKey(seed)
    k1, k2 = jax.random.split(key)
    ku = SeKernel(1.0, 0.5)
    kg = SeKernel(1.2, 1.5)
    zu = np.linspace(-4.0, 4.0, m_u)[:, None]
    axis = np.linspace(-vk_range, vk_range, axis_size)
    zg = np.array(list(itertools.product(axis, repeat=order)))
    alpha = fix_alpha(vk_range) if alpha is None else alpha
    u = build_path(ku, draw_basis(ku, 1, n_basis, k1), zu, rng.standard_normal(m_u))
    g = build_path(kg, draw_basis(kg, order, n_basis, k2), zg, rng.standard_normal(len(zg)), decay=alpha)
    return u, g, alpha, axis


@pytest.fixture
def paths():
    return make_paths


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
