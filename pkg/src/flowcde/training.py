"""Stochastic variational inference over likelihood-head networks.

The objective per step is the minibatch free-energy estimate

    F = (N / (B * mc)) * sum_{b,m} -log p(y_b | omega_{b,m})  +  KL(q || p)

with the likelihood term rescaled to full-dataset scale and the KL counted
once, so minibatch gradients are unbiased for the full-data objective.
log-density terms are recorded on a scalar tape (one tape per step); the KL
enters as a single fused node whose exact analytic derivative the network
supplies, and one backward sweep yields all gradients.

Monte Carlo conventions: per free-energy evaluation the rng draws, in order,
any head input augmentation (latent-variable noise) and then one activation
noise array per layer.  The numpy twin free_energy_value consumes an rng
identically, so recreating a generator from the same seed gives common
random numbers for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .bnn import TapeParams, draw_eps
from .errors import NumericError, StructuralError
from .tape import Tape

__all__ = [
    "TrainConfig",
    "FreeEnergyReport",
    "CdeModel",
    "AdamState",
    "adam_step",
    "free_energy",
    "free_energy_value",
    "train",
    "predictive_log_density",
    "predictive_curve",
    "model_sample",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    iterations: int = 5000
    batch_size: int | None = None  # None trains full-batch
    mc_samples_train: int = 20
    mc_samples_test: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise StructuralError("learning_rate must be > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise StructuralError("adam betas must lie in [0, 1)")
        if self.mc_samples_train < 1 or self.mc_samples_test < 1:
            raise StructuralError("mc_samples must be >= 1")
        if self.iterations < 0:
            raise StructuralError("iterations must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise StructuralError("batch_size must be >= 1 or None")


@dataclass(frozen=True)
class FreeEnergyReport:
    expected_nll: float  # full-dataset scale
    kl: float
    free_energy: float
    iteration: int = 0


@dataclass
class CdeModel:
    """A network, its likelihood head, and the head's own trainable scalars."""

    net: object
    head: object
    extras: np.ndarray

    def __post_init__(self):
        self.extras = np.asarray(self.extras, dtype=float)
        if self.extras.shape != (self.head.n_extras,):
            raise StructuralError(
                f"head {self.head.name} expects {self.head.n_extras} extras, "
                f"got shape {self.extras.shape}"
            )
        if self.net.arch.output_dim != self.head.output_dim:
            raise StructuralError(
                f"head needs {self.head.output_dim} outputs, "
                f"net has {self.net.arch.output_dim}"
            )

    def trainable_vector(self):
        return np.concatenate([self.net.posterior.to_vector(), self.extras])

    def set_trainable(self, vec):
        n_post = self.net.posterior.n_trainable
        if vec.size != n_post + self.extras.size:
            raise StructuralError("trainable vector has wrong length")
        self.net.posterior = self.net.posterior.replace_from_vector(vec[:n_post])
        self.extras = np.array(vec[n_post:], dtype=float)


def _check_batch(x, y, n_total):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise StructuralError(f"batch shapes disagree: x {x.shape}, y {y.shape}")
    if y.shape[0] == 0:
        raise StructuralError("batch must be non-empty")
    if n_total < y.shape[0]:
        raise StructuralError("n_total smaller than the batch")
    return x, y


def free_energy(model, x, y, n_total, mc, rng, iteration=0):
    """(report, gradient) of the minibatch free energy, via one tape."""
    x, y = _check_batch(x, y, n_total)
    net, head = model.net, model.head
    x_rows, _ = head.prepare_inputs(x, rng)
    eps = draw_eps(net.arch, rng, mc, x_rows.shape[0])

    tape = Tape()
    tp = TapeParams(tape, net.posterior)
    extra_ids = [tape.leaf(v) for v in model.extras]
    omega_ids = net.forward_tape(tape, tp, x_rows, eps)
    ld_ids = head.log_density_rows_tape(tape, omega_ids, y, extra_ids)

    batch = y.shape[0]
    for b in range(batch):
        for m in range(mc):
            if not math.isfinite(tape.value(int(ld_ids[m, b]))):
                raise NumericError(
                    f"non-finite log density for datum {b} (mc draw {m})", index=b
                )
    scale = -float(n_total) / (batch * mc)
    flat_ld = [int(i) for i in ld_ids.ravel()]
    nll_id = tape.lincomb(flat_ld, [scale] * len(flat_ld))

    kl_val = net.kl_to_prior()
    kl_grad = net.kl_gradients()
    kl_id = tape.record("kl", list(tp.flat_ids), kl_val, list(kl_grad))
    f_id = tape.add(nll_id, kl_id)

    adj = tape.backward(f_id)
    grad = np.empty(tp.flat_ids.size + len(extra_ids))
    for k, i in enumerate(tp.flat_ids):
        grad[k] = adj[i]
    for k, i in enumerate(extra_ids):
        grad[tp.flat_ids.size + k] = adj[i]

    report = FreeEnergyReport(
        expected_nll=tape.value(nll_id),
        kl=kl_val,
        free_energy=tape.value(f_id),
        iteration=iteration,
    )
    return report, grad


def free_energy_value(model, x, y, n_total, mc, rng):
    """Vectorised twin of free_energy (value only, same rng consumption)."""
    x, y = _check_batch(x, y, n_total)
    net, head = model.net, model.head
    x_rows, _ = head.prepare_inputs(x, rng)
    eps = draw_eps(net.arch, rng, mc, x_rows.shape[0])
    omega = net.forward_np(x_rows, eps)
    ld = head.log_density_rows_np(omega, y, model.extras)
    if not np.isfinite(ld).all():
        bad = int(np.argwhere(~np.isfinite(ld))[0][1])
        raise NumericError(f"non-finite log density for datum {bad}", index=bad)
    batch = y.shape[0]
    nll = -float(n_total) / (batch * mc) * float(ld.sum())
    return nll + net.kl_to_prior()


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state, params, grads, cfg):
    """One bias-corrected Adam update; pure function of its inputs."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise StructuralError("adam shapes disagree")
    t = state.step + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grads
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grads**2
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    new_params = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return AdamState(m, v, t), new_params


def train(model, x, y, cfg):
    """Run cfg.iterations Adam steps on the free energy; returns the trace.

    One rng (cfg.seed) drives everything in a fixed order per iteration:
    batch indices (when minibatching), head noise, activation noise.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n_total = y.shape[0]
    rng = np.random.default_rng(cfg.seed)
    params = model.trainable_vector()
    state = AdamState.zeros(params.size)
    trace = []
    batch = cfg.batch_size
    if batch is not None and batch > n_total:
        raise StructuralError(f"batch_size {batch} exceeds dataset size {n_total}")
    for it in range(cfg.iterations):
        if batch is None:
            xb, yb = x, y
        else:
            idx = rng.choice(n_total, size=batch, replace=False)
            xb, yb = x[idx], y[idx]
        try:
            report, grad = free_energy(
                model, xb, yb, n_total, cfg.mc_samples_train, rng, iteration=it
            )
        except NumericError as err:
            raise NumericError(
                f"iteration {it}: {err}", node_id=err.node_id, index=err.index
            ) from err
        state, params = adam_step(state, params, grad, cfg)
        model.set_trainable(params)
        trace.append(report)
    return trace


def predictive_log_density(model, x, y, mc, rng):
    """Per-datum log posterior-predictive density, stably log-mean-exp'd
    over mc local-reparameterization draws."""
    x, y = _check_batch(x, y, np.asarray(y).size)
    net, head = model.net, model.head
    x_rows, _ = head.prepare_inputs(x, rng)
    eps = draw_eps(net.arch, rng, mc, x_rows.shape[0])
    omega = net.forward_np(x_rows, eps)
    ld = head.log_density_rows_np(omega, y, model.extras)  # (mc, B)
    m = ld.max(axis=0)
    return m + np.log(np.exp(ld - m).mean(axis=0))


def predictive_curve(model, x, y_grid, mc, rng):
    """(B, G) log posterior-predictive densities over a shared target grid."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y_grid = np.asarray(y_grid, dtype=float).reshape(-1)
    net, head = model.net, model.head
    rows, per = head.prepare_inputs(x, rng)
    eps = draw_eps(net.arch, rng, mc, rows.shape[0])
    omega = net.forward_np(rows, eps)
    ld = np.empty((mc, x.shape[0], y_grid.size))
    for m in range(mc):
        for b in range(x.shape[0]):
            ld[m, b] = head.curve_log_density(
                omega[m, b * per : (b + 1) * per], model.extras, y_grid
            )
    top = ld.max(axis=0)
    return top + np.log(np.exp(ld - top).mean(axis=0))


def model_sample(model, x_row, n, mc, rng):
    """n draws from the posterior-predictive at one conditioning point.

    Network draws are allocated round-robin over the n samples.
    """
    if n < 1:
        raise StructuralError("need at least one sample")
    net, head = model.net, model.head
    x = np.asarray(x_row, dtype=float).reshape(1, -1)
    x_rows, per = head.prepare_inputs(x, rng)
    eps = draw_eps(net.arch, rng, mc, x_rows.shape[0])
    omega = net.forward_np(x_rows, eps)  # (mc, per, P)
    counts = np.full(mc, n // mc)
    counts[: n % mc] += 1
    out = []
    for m in range(mc):
        if counts[m] == 0:
            continue
        rows = omega[m]
        if head.name == "lv":
            out.append(head.sample_np(rows, model.extras, int(counts[m]), rng))
        else:
            out.append(head.sample_np(rows[0], model.extras, int(counts[m]), rng))
    return np.concatenate(out)
