"""Model state for the NVKM and IO-NVKM.

Parameters live in a flat ``dict[str, jax.Array]`` in unconstrained form so
that the whole dict is a JAX pytree and can be optimized directly:

========================  ==================================================
``u.mean``                variational mean of the input inducing values
``u.chol``                Cholesky factor, strict lower part free, log diagonal
``u.log_amplitude``       log input amplitude
``vk.{d}.{c}.mean``       variational mean for output d, order c
``vk.{d}.{c}.chol``       as ``u.chol``
``vk.{d}.{c}.log_amplitude``
``vk.{d}.{c}.log_precision``  log SE precision of the undecayed kernel G'
``noise.{d}``             log observation noise of output d
``noise.x``               log input observation noise (IO mode only)
========================  ==================================================

Inducing values of each Volterra kernel are values of the stationary
process G' at the grid; the decay envelope is applied on evaluation.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np

from nvkm.errors import IllConditionedGram, InvalidArgument, UnsupportedOrder
from nvkm.kernels import SeKernel, se_cross
from nvkm.pathwise import VariationalGaussian
from nvkm.volterra import grid_index

AXIS_SIZES = {1: 15, 2: 10, 3: 6, 4: 4}


@dataclass
class ModelConfig:
    order: int = 1
    n_outputs: int = 1
    vk_range: float | list = 2.0
    eps_decay: float = 0.01
    n_basis: int = 50
    axis_sizes: list | None = None
    t_min: float = -20.0
    t_max: float = 20.0
    n_data: int = 400
    n_input_inducing: int | None = None
    input_lengthscale_factor: float = 1.0
    vk_lengthscale_factor: float = 1.0
    input_amplitude: float = 1.0
    vk_amplitude: float = 1.0
    noise: float = 0.05
    input_noise: float = 0.05
    io_mode: bool = False
    jitter: float = 1e-6
    init_mean_scale: float = 0.05
    init_chol_scale: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def ranges(self) -> list[float]:
        r = self.vk_range
        if isinstance(r, (list, tuple)):
            if len(r) != self.order:
                raise InvalidArgument(f"need {self.order} VK ranges, got {len(r)}")
            return [float(x) for x in r]
        return [float(r)] * self.order

    def axis_size(self, c: int) -> int:
        if self.axis_sizes is not None:
            return int(self.axis_sizes[c - 1])
        return AXIS_SIZES[c]

    def input_inducing_count(self) -> int:
        if self.n_input_inducing is not None:
            return int(self.n_input_inducing)
        return max(2, int(round(self.n_data / 10)))


@dataclass(frozen=True)
class VolterraKernelSpec:
    order: int
    grid_axis: np.ndarray
    inducing_inputs: np.ndarray
    posterior: VariationalGaussian
    kernel: SeKernel
    decay: float


@dataclass(frozen=True)
class InputProcessSpec:
    inducing_inputs: np.ndarray
    posterior: VariationalGaussian
    kernel: SeKernel


def fix_alpha(vk_range: float, eps_decay: float = 0.01) -> float:
    """Envelope rate with ``exp(-alpha * range**2) == eps_decay``."""
    if vk_range <= 0:
        raise InvalidArgument("range must be positive")
    if not 0 < eps_decay < 1:
        raise InvalidArgument("eps_decay must lie in (0, 1)")
    return math.log(1.0 / eps_decay) / vk_range**2


def chol_to_raw(L):
    L = jnp.asarray(L)
    return jnp.tril(L, -1) + jnp.diag(jnp.log(jnp.diag(L)))


def raw_to_chol(raw):
    return jnp.tril(raw, -1) + jnp.diag(jnp.exp(jnp.diag(raw)))


def kl_term(q: VariationalGaussian, prior_gram) -> jax.Array:
    """``KL[Normal(mu, L L^T) || Normal(0, K)]`` in closed form."""
    K = jnp.asarray(prior_gram)
    mu = jnp.asarray(q.mean)
    if K.shape != (mu.shape[0], mu.shape[0]) or q.chol.shape != K.shape:
        raise InvalidArgument("variational and prior dimensions disagree")
    Lk = jnp.linalg.cholesky(K)
    A = jsl.solve_triangular(Lk, q.chol, lower=True)
    b = jsl.solve_triangular(Lk, mu, lower=True)
    kl = 0.5 * (
        2.0 * jnp.sum(jnp.log(jnp.diag(Lk)))
        - 2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diag(q.chol))))
        - mu.shape[0]
        + jnp.sum(A**2)
        + jnp.sum(b**2)
    )
    if not isinstance(kl, jax.core.Tracer) and not bool(jnp.isfinite(kl)):
        raise IllConditionedGram("prior Gram is not positive definite")
    return kl


@dataclass
class VolterraModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.config
        if cfg.order < 1 or cfg.n_outputs < 1:
            raise InvalidArgument("order and n_outputs must be >= 1")
        if cfg.order > 4 and cfg.axis_sizes is None:
            raise UnsupportedOrder("grid sizes are only defined for orders 1 to 4")
        if cfg.t_max <= cfg.t_min:
            raise InvalidArgument("t_max must exceed t_min")
        m_u = cfg.input_inducing_count()
        self.input_grid = np.linspace(cfg.t_min, cfg.t_max, m_u)
        spacing = (cfg.t_max - cfg.t_min) / (m_u - 1)
        self.input_precision = 1.0 / (2.0 * (cfg.input_lengthscale_factor * spacing) ** 2)
        self.decays = [fix_alpha(r, cfg.eps_decay) for r in cfg.ranges()]
        self.grid_axes = [
            np.linspace(-r, r, cfg.axis_size(c)) for c, r in enumerate(cfg.ranges(), start=1)
        ]

    @property
    def order(self) -> int:
        return self.config.order

    @property
    def n_outputs(self) -> int:
        return self.config.n_outputs

    @property
    def io_mode(self) -> bool:
        return self.config.io_mode

    def grid(self, c: int) -> np.ndarray:
        axis = self.grid_axes[c - 1]
        return axis[grid_index(len(axis), c)]

    def noise_names(self) -> list[str]:
        names = [f"noise.{d}" for d in range(self.n_outputs)]
        if self.io_mode:
            names.append("noise.x")
        return names

    def vk_prefixes(self):
        return [(d, c, f"vk.{d}.{c}") for d in range(self.n_outputs) for c in range(1, self.order + 1)]

    def input_kernel(self, params=None) -> SeKernel:
        p = self.params if params is None else params
        return SeKernel(jnp.exp(p["u.log_amplitude"]), self.input_precision)

    def vk_kernel(self, d: int, c: int, params=None) -> SeKernel:
        p = self.params if params is None else params
        pre = f"vk.{d}.{c}"
        return SeKernel(jnp.exp(p[pre + ".log_amplitude"]), jnp.exp(p[pre + ".log_precision"]))

    def posterior(self, prefix: str, params=None) -> VariationalGaussian:
        p = self.params if params is None else params
        return VariationalGaussian(p[prefix + ".mean"], raw_to_chol(p[prefix + ".chol"]))

    def input_gram(self, params=None):
        z = jnp.asarray(self.input_grid)[:, None]
        k = self.input_kernel(params)
        return se_cross(z, z, k) + self.config.jitter * k.amplitude**2 * jnp.eye(len(z))

    def vk_gram(self, d: int, c: int, params=None):
        z = jnp.asarray(self.grid(c))
        k = self.vk_kernel(d, c, params)
        return se_cross(z, z, k) + self.config.jitter * k.amplitude**2 * jnp.eye(len(z))

    def noise(self, d: int | str, params=None):
        p = self.params if params is None else params
        return jnp.exp(p[f"noise.{d}"])

    def input_spec(self) -> InputProcessSpec:
        return InputProcessSpec(self.input_grid, self.posterior("u"), self.input_kernel())

    def kernel_spec(self, d: int, c: int) -> VolterraKernelSpec:
        return VolterraKernelSpec(
            c,
            self.grid_axes[c - 1],
            self.grid(c),
            self.posterior(f"vk.{d}.{c}"),
            self.vk_kernel(d, c),
            self.decays[c - 1],
        )

    def with_params(self, params: dict) -> "VolterraModel":
        return VolterraModel(self.config, dict(params), dict(self.metadata))

    def set_prior_posteriors(self) -> "VolterraModel":
        """Copy with every q(v) equal to its prior (zero mean, prior Cholesky)."""
        p = dict(self.params)
        p["u.mean"] = jnp.zeros_like(p["u.mean"])
        p["u.chol"] = chol_to_raw(jnp.linalg.cholesky(self.input_gram()))
        for d, c, pre in self.vk_prefixes():
            p[pre + ".mean"] = jnp.zeros_like(p[pre + ".mean"])
            p[pre + ".chol"] = chol_to_raw(jnp.linalg.cholesky(self.vk_gram(d, c)))
        return self.with_params(p)


def init_model(config: ModelConfig | dict, seed: int | None = None) -> VolterraModel:
    """Build grids and draw initial variational parameters.

    Deterministic in ``(config, seed)``; ``seed`` defaults to ``config.seed``.
    """
    cfg = ModelConfig.from_dict(config) if isinstance(config, dict) else config
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if cfg.order > 4 and cfg.axis_sizes is None:
        raise UnsupportedOrder(f"order {cfg.order} > 4 has no default grid size")
    model = VolterraModel(cfg)
    rng = np.random.default_rng(cfg.seed)
    params: dict = {}

    params["u.log_amplitude"] = jnp.asarray(math.log(cfg.input_amplitude))
    m_u = len(model.input_grid)
    params["u.mean"] = jnp.asarray(cfg.init_mean_scale * rng.standard_normal(m_u))
    for d, c, pre in model.vk_prefixes():
        axis = model.grid_axes[c - 1]
        spacing = axis[1] - axis[0]
        lengthscale = cfg.vk_lengthscale_factor * spacing
        params[pre + ".log_amplitude"] = jnp.asarray(math.log(cfg.vk_amplitude))
        params[pre + ".log_precision"] = jnp.asarray(math.log(1.0 / (2.0 * lengthscale**2)))
        params[pre + ".mean"] = jnp.asarray(
            cfg.init_mean_scale * rng.standard_normal(len(axis) ** c)
        )
    for name in model.noise_names():
        level = cfg.input_noise if name == "noise.x" else cfg.noise
        params[name] = jnp.asarray(math.log(level))
    model.params = params

    params["u.chol"] = chol_to_raw(cfg.init_chol_scale * jnp.linalg.cholesky(model.input_gram()))
    for d, c, pre in model.vk_prefixes():
        params[pre + ".chol"] = chol_to_raw(
            cfg.init_chol_scale * jnp.linalg.cholesky(model.vk_gram(d, c))
        )
    model.params = {k: params[k] for k in sorted(params)}
    return model


def total_kl(model: VolterraModel, params=None):
    """Sum of the input and all C*D Volterra-kernel KL divergences."""
    p = model.params if params is None else params
    total = kl_term(model.posterior("u", p), model.input_gram(p))
    for d, c, pre in model.vk_prefixes():
        total = total + kl_term(model.posterior(pre, p), model.vk_gram(d, c, p))
    return total


def kl_summands(model: VolterraModel) -> dict:
    out = {"u": float(kl_term(model.posterior("u"), model.input_gram()))}
    for d, c, pre in model.vk_prefixes():
        out[pre] = float(kl_term(model.posterior(pre), model.vk_gram(d, c)))
    return out
