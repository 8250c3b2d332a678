"""Doubly stochastic variational inference for NVKM / IO-NVKM.

The ELBO estimate on a minibatch is

    N/|B| * sum_{(d,i) in B} 1/S sum_s log N(y_di; f_d^(s)(t_di), sigma_d**2)
  [ + N_x/|B_x| * sum_{j in B_x} 1/S sum_s log N(x_j; u^(s)(tx_j), sigma_x**2) ]
  - KL

where each joint sample ``s`` draws every inducing vector from its q(v)
and a fresh Fourier basis per process. All randomness enters through a
"draw" pytree of standard normals and uniforms, so for fixed draws the
estimate is a deterministic, differentiable function of the parameters.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from nvkm.errors import InvalidArgument, NonFiniteGradient, TrainingAborted
from nvkm.model import VolterraModel, total_kl
from nvkm.pathwise import basis_from_noise, build_path, eval_path, sample_inducing
from nvkm.volterra import term_values

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainingConfig:
    samples: int = 10
    eval_samples: int = 50
    batch_size: int = 80
    learning_rate: float = 5e-3
    noise_learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_phase1: int = 2000
    epochs_phase2: int = 200
    frozen_noise: float = 0.05
    seed: int = 0
    io_mode: bool = False

    def __post_init__(self):
        if self.samples < 1 or self.batch_size < 1:
            raise InvalidArgument("samples and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.noise_learning_rate <= 0:
            raise InvalidArgument("learning rates must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainTrace:
    elbo: list = field(default_factory=list)
    phase: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    noise: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.elbo)

    def record(self, value: float, phase: int, t0: float):
        self.elbo.append(value)
        self.phase.append(phase)
        self.wall_time.append(time.perf_counter() - t0)

    def smoothed(self, window: int = 50, phase: int | None = None) -> np.ndarray:
        e = np.asarray(self.elbo if phase is None else [v for v, p in zip(self.elbo, self.phase) if p == phase])
        if len(e) < window:
            window = max(len(e), 1)
        return np.convolve(e, np.ones(window) / window, mode="valid")

    def to_csv(self) -> str:
        # wall-clock stamps are kept in memory only so trace files are byte-stable
        lines = ["step,phase,elbo"]
        lines += [f"{i},{p},{e!r}" for i, (p, e) in enumerate(zip(self.phase, self.elbo))]
        return "\n".join(lines) + "\n"


class Batch(NamedTuple):
    """Flattened minibatch; ``weight`` rescales to the full data size."""

    t: jax.Array
    y: jax.Array
    output: jax.Array
    weight: float
    tx: jax.Array
    x: jax.Array
    x_weight: float


def make_batch(t, y, output, weight=1.0, tx=None, x=None, x_weight=1.0) -> Batch:
    t = jnp.asarray(t, dtype=float).reshape(-1)
    return Batch(
        t,
        jnp.asarray(y, dtype=float).reshape(-1),
        jnp.asarray(output, dtype=jnp.int32).reshape(-1),
        jnp.asarray(weight, dtype=float),
        jnp.zeros(0) if tx is None else jnp.asarray(tx, dtype=float).reshape(-1),
        jnp.zeros(0) if x is None else jnp.asarray(x, dtype=float).reshape(-1),
        jnp.asarray(x_weight, dtype=float),
    )


def full_batch(dataset) -> Batch:
    """Every observation of ``dataset`` with unit weights."""
    t, y, d = dataset.flat()
    if dataset.has_input:
        return make_batch(t, y, d, 1.0, dataset.tx, dataset.x, 1.0)
    return make_batch(t, y, d)


# ---------------------------------------------------------------------------
# random draws and paths


def draw_noise(model: VolterraModel, key, n_samples: int) -> dict:
    """Standard draws for ``n_samples`` joint function samples."""
    nb = model.config.n_basis
    out = {}
    names = [("u", 1, len(model.input_grid))] + [
        (pre, c, len(model.grid_axes[c - 1]) ** c) for _, c, pre in model.vk_prefixes()
    ]
    keys = jax.random.split(key, len(names))
    for (name, dim, m), k in zip(names, keys):
        kf, kp, kw, ke = jax.random.split(k, 4)
        out[name + ".freq"] = jax.random.normal(kf, (n_samples, nb, dim))
        out[name + ".phase"] = jax.random.uniform(kp, (n_samples, nb), maxval=2 * jnp.pi)
        out[name + ".weight"] = jax.random.normal(kw, (n_samples, nb))
        out[name + ".eps"] = jax.random.normal(ke, (n_samples, m))
    return out


def _take(draws: dict, s: int) -> dict:
    return {k: v[s] for k, v in draws.items()}


def build_paths(model: VolterraModel, params: dict, draw: dict):
    """Input path and ``{(d, c): kernel path}`` for one joint draw."""
    jitter = model.config.jitter
    ku = model.input_kernel(params)
    basis = basis_from_noise(ku, draw["u.freq"], draw["u.phase"], draw["u.weight"])
    v = sample_inducing(model.posterior("u", params), eps=draw["u.eps"])
    u = build_path(ku, basis, jnp.asarray(model.input_grid)[:, None], v, 0.0, jitter)
    g = {}
    for d, c, pre in model.vk_prefixes():
        kg = model.vk_kernel(d, c, params)
        basis = basis_from_noise(kg, draw[pre + ".freq"], draw[pre + ".phase"], draw[pre + ".weight"])
        v = sample_inducing(model.posterior(pre, params), eps=draw[pre + ".eps"])
        g[(d, c)] = build_path(kg, basis, jnp.asarray(model.grid(c)), v, model.decays[c - 1], jitter)
    return u, g


def output_from_paths(model: VolterraModel, u, g, d: int, t):
    total = jnp.zeros_like(t)
    for c in range(1, model.order + 1):
        axis = jnp.asarray(model.grid_axes[c - 1])
        total = total + term_values(u, g[(d, c)], model.decays[c - 1], t, axis)
    return total


def _normal_logpdf(y, mean, sd):
    return -0.5 * LOG_2PI - jnp.log(sd) - 0.5 * ((y - mean) / sd) ** 2


def _structure_key(model: VolterraModel) -> str:
    return json.dumps(model.config.to_dict(), sort_keys=True)


class _Program:
    """Jitted objective pieces for one model structure."""

    def __init__(self, model: VolterraModel):
        self.model = model
        self._value_and_grad = jax.jit(jax.value_and_grad(self._objective))
        self._value = jax.jit(self._objective)
        self._likelihood = jax.jit(self._likelihood_terms)

    def _sample_loglik(self, params, draw, batch: Batch):
        m = self.model
        u, g = build_paths(m, params, draw)
        f_all = jnp.stack([output_from_paths(m, u, g, d, batch.t) for d in range(m.n_outputs)])
        f = f_all[batch.output, jnp.arange(batch.t.shape[0])]
        sd = jnp.stack([m.noise(d, params) for d in range(m.n_outputs)])[batch.output]
        ll_y = jnp.sum(_normal_logpdf(batch.y, f, sd))
        if m.io_mode and batch.tx.shape[0] > 0:
            ux = eval_path(u, batch.tx)
            ll_x = jnp.sum(_normal_logpdf(batch.x, ux, m.noise("x", params)))
        else:
            ll_x = jnp.zeros(())
        return ll_y, ll_x

    def _likelihood_terms(self, params, draws, batch):
        ll_y, ll_x = jax.vmap(lambda dr: self._sample_loglik(params, dr, batch))(draws)
        return batch.weight * jnp.mean(ll_y), batch.x_weight * jnp.mean(ll_x)

    def _objective(self, train, frozen, draws, batch):
        params = {**frozen, **train}
        ll_y, ll_x = self._likelihood_terms(params, draws, batch)
        return ll_y + ll_x - total_kl(self.model, params)


@lru_cache(maxsize=32)
def _program_for(key: str) -> _Program:
    from nvkm.model import ModelConfig

    return _Program(VolterraModel(ModelConfig.from_dict(json.loads(key))))


def program(model: VolterraModel) -> _Program:
    return _program_for(_structure_key(model))


def _split(params: dict, trainable) -> tuple[dict, dict]:
    names = set(params) if trainable is None else set(trainable)
    unknown = names - set(params)
    if unknown:
        raise InvalidArgument(f"unknown parameters: {sorted(unknown)}")
    train = {k: v for k, v in params.items() if k in names}
    frozen = {k: v for k, v in params.items() if k not in names}
    return train, frozen


# ---------------------------------------------------------------------------
# public estimates


def likelihood_term(model: VolterraModel, batch: Batch, draws: dict) -> tuple[float, float]:
    """Rescaled output and input expected log-likelihood terms for fixed draws."""
    ll_y, ll_x = program(model)._likelihood(model.params, draws, batch)
    return float(ll_y), float(ll_x)


def elbo_estimate(model: VolterraModel, batch: Batch, S: int, key=None, draws=None) -> float:
    """Stochastic ELBO for one minibatch using ``S`` joint samples."""
    if batch.t.shape[0] == 0 and batch.tx.shape[0] == 0:
        raise InvalidArgument("batch is empty")
    if draws is None:
        draws = draw_noise(model, key, S)
    return float(program(model)._value(model.params, {}, draws, batch))


def grad_elbo(model: VolterraModel, batch: Batch, S: int, key=None, trainable=None, draws=None):
    """``(elbo, {name: gradient})`` over the trainable leaves, common random numbers."""
    if draws is None:
        draws = draw_noise(model, key, S)
    train, frozen = _split(model.params, trainable)
    value, grads = program(model)._value_and_grad(train, frozen, draws, batch)
    return float(value), grads


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def adam_init(params: dict) -> AdamState:
    zeros = {k: jnp.zeros_like(v) for k, v in params.items()}
    return AdamState(0, zeros, dict(zeros))


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """One Adam update minimizing the objective whose gradient is ``grads``.

    Leaves absent from ``grads`` are left untouched. Parameters are stored
    unconstrained, so positivity constraints need no projection here.
    """
    for name, g in grads.items():
        if not bool(jnp.all(jnp.isfinite(g))):
            raise NonFiniteGradient(f"non-finite gradient for {name!r} at step {state.step + 1}")
    t = state.step + 1
    m = dict(state.m)
    v = dict(state.v)
    new = dict(params)
    for name, g in grads.items():
        m[name] = b1 * state.m[name] + (1 - b1) * g
        v[name] = b2 * state.v[name] + (1 - b2) * g**2
        m_hat = m[name] / (1 - b1**t)
        v_hat = v[name] / (1 - b2**t)
        new[name] = params[name] - lr * m_hat / (jnp.sqrt(v_hat) + eps)
    return new, AdamState(t, m, v)


# ---------------------------------------------------------------------------
# training


def _steps_for(epochs: int, n: int, batch_size: int) -> int:
    return int(math.ceil(epochs * n / min(batch_size, n))) if n else 0


def _batch_sampler(dataset, batch_size: int, rng: np.random.Generator):
    t_all, y_all, d_all = dataset.flat()
    n = len(t_all)
    b = min(batch_size, n)
    has_x = dataset.has_input
    if has_x:
        n_x = len(dataset.tx)
        bx = min(batch_size, n_x)

    def sample() -> Batch:
        idx = np.sort(rng.choice(n, size=b, replace=False))
        if has_x:
            jdx = np.sort(rng.choice(n_x, size=bx, replace=False))
            return make_batch(t_all[idx], y_all[idx], d_all[idx], n / b, dataset.tx[jdx], dataset.x[jdx], n_x / bx)
        return make_batch(t_all[idx], y_all[idx], d_all[idx], n / b)

    return sample


def _check_dataset(model: VolterraModel, dataset):
    if dataset.n_outputs != model.n_outputs:
        raise InvalidArgument(f"dataset has {dataset.n_outputs} outputs, model {model.n_outputs}")
    if model.io_mode and not dataset.has_input:
        raise InvalidArgument("IO mode needs observed input data")


def train(model: VolterraModel, dataset, config: TrainingConfig, callback=None):
    """Two-phase optimization; returns ``(trained model, TrainTrace)``.

    Phase 1 fixes every noise at ``config.frozen_noise`` and optimizes all
    other parameters; phase 2 optimizes the noise parameters alone.
    """
    _check_dataset(model, dataset)
    trace = TrainTrace()
    n_total = dataset.n_total
    steps1 = _steps_for(config.epochs_phase1, n_total, config.batch_size)
    steps2 = _steps_for(config.epochs_phase2, n_total, config.batch_size)
    if steps1 + steps2 == 0:
        return model, trace

    rng = np.random.default_rng(config.seed)
    key = jax.random.PRNGKey(config.seed)
    sample_batch = _batch_sampler(dataset, config.batch_size, rng)
    noise_names = model.noise_names()
    params = dict(model.params)
    for name in noise_names:
        params[name] = jnp.asarray(math.log(config.frozen_noise))
    prog = program(model)
    t0 = time.perf_counter()
    step = 0

    phases = [
        (1, steps1, [k for k in params if k not in noise_names], config.learning_rate),
        (2, steps2, noise_names, config.noise_learning_rate),
    ]
    for phase, n_steps, names, lr in phases:
        if n_steps == 0:
            continue
        train_p, frozen = _split(params, names)
        state = adam_init(train_p)
        for _ in range(n_steps):
            batch = sample_batch()
            draws = draw_noise(model, jax.random.fold_in(key, step), config.samples)
            value, grads = prog._value_and_grad(train_p, frozen, draws, batch)
            value = float(value)
            if not math.isfinite(value):
                last = model.with_params({**frozen, **train_p})
                raise TrainingAborted(f"non-finite ELBO at step {step}", last, trace)
            trace.record(value, phase, t0)
            neg = {k: -g for k, g in grads.items()}
            try:
                train_p, state = adam_step(
                    train_p, neg, state, lr, config.beta1, config.beta2, config.adam_eps
                )
            except Exception as exc:
                raise TrainingAborted(str(exc), model.with_params({**frozen, **train_p}), trace) from exc
            step += 1
            if callback is not None:
                callback(step, phase, value)
        params = {**frozen, **train_p}
        trace.noise[phase] = {k: float(jnp.exp(params[k])) for k in noise_names}
        log.info("phase %d done after %d steps, elbo %.4g", phase, n_steps, trace.elbo[-1])
    return model.with_params(params), trace


# ---------------------------------------------------------------------------
# prediction


@dataclass
class Prediction:
    """Per-output predictive summaries; ``samples[d]`` has shape (S, n_d)."""

    times: list
    mean: list
    sd: list
    samples: list
    noise: list

    def band(self, d: int, k: float = 2.0):
        return self.mean[d] - k * self.sd[d], self.mean[d] + k * self.sd[d]


@lru_cache(maxsize=64)
def _predict_fn(key: str, d: int):
    prog = _program_for(key)
    m = prog.model

    def one(params, draw, t):
        u, g = build_paths(m, params, draw)
        if d < 0:
            return eval_path(u, t)
        return output_from_paths(m, u, g, d, t)

    def many(params, draws, t):
        return jax.lax.map(lambda dr: one(params, dr, t), draws)

    return jax.jit(many)


def _sample_times(model, params, draws, d, t, chunk):
    fn = _predict_fn(_structure_key(model), d)
    t = np.asarray(t, dtype=float).reshape(-1)
    if len(t) == 0:
        return np.zeros((draws["u.eps"].shape[0], 0))
    parts = []
    for start in range(0, len(t), chunk):
        piece = t[start : start + chunk]
        pad = chunk - len(piece)
        padded = np.concatenate([piece, np.full(pad, piece[-1])]) if pad else piece
        parts.append(np.asarray(fn(params, draws, jnp.asarray(padded)))[:, : len(piece)])
    return np.concatenate(parts, axis=1)


def predict(model: VolterraModel, times, S: int, key, chunk: int = 256) -> Prediction:
    """Joint posterior samples of every output at ``times``.

    ``times`` is a list with one array per output (a single array is used
    for all outputs). The predictive sd adds the observation noise in
    quadrature to the sample spread.
    """
    if not isinstance(times, (list, tuple)):
        times = [times] * model.n_outputs
    if len(times) != model.n_outputs:
        raise InvalidArgument("need one time array per output")
    draws = draw_noise(model, key, S)
    means, sds, samples, noises = [], [], [], []
    for d, t in enumerate(times):
        f = _sample_times(model, model.params, draws, d, t, chunk)
        noise = float(model.noise(d))
        samples.append(f)
        means.append(f.mean(axis=0))
        sds.append(np.sqrt(f.var(axis=0) + noise**2))
        noises.append(noise)
    return Prediction([np.asarray(t, dtype=float) for t in times], means, sds, samples, noises)


def sample_input(model: VolterraModel, t, S: int, key, chunk: int = 256) -> np.ndarray:
    """(S, n) samples of the input process; the draws match :func:`predict` for the same key."""
    draws = draw_noise(model, key, S)
    return _sample_times(model, model.params, draws, -1, t, chunk)


def sample_vk_diagonal(model: VolterraModel, d: int, c: int, s_grid, S: int, key) -> np.ndarray:
    """(S, n) samples of the decayed kernel on its diagonal ``G(s, ..., s)``."""
    draws = draw_noise(model, key, S)
    pts = jnp.repeat(jnp.asarray(s_grid, dtype=float)[:, None], c, axis=1)

    def one(dr):
        _, g = build_paths(model, model.params, dr)
        return eval_path(g[(d, c)], pts)

    return np.asarray(jax.lax.map(one, draws))
