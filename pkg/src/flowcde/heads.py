"""Likelihood heads turning network outputs into conditional densities.

Every head exposes the same duck-typed surface so the training loop and the
CLI never branch on head internals:

- ``output_dim``: how many network outputs the head consumes per datum;
- ``group_map()``: named partition of output indices (drives grouped priors);
- ``default_prior(...)``: a reasonable PriorConfig for the head;
- ``n_extras`` / ``init_extras()``: trainable scalars owned by the head
  itself (the latent-variable and Gaussian heads carry a global observation
  noise parameter);
- ``prepare_inputs(x, rng)``: feature rows to push through the network
  (the latent-variable head appends fresh noise columns and replicates each
  datum once per noise sample);
- ``log_density_rows_np`` / ``log_density_rows_tape``: per-datum log
  densities, vectorised or recorded on a tape, from the (mc, rows, outputs)
  network outputs;
- ``sample_np``: draws from the conditional density given one output row.

Heads:

- ``NFHead(K)``: K-stage radial flow, 3K+1 outputs; K=0 degenerates to a
  unit-variance Gaussian at the shift output.
- ``MDNHead(C)``: mixture of C Gaussians with a global offset s, 3C+1
  outputs [mu_c, sigma_hat_c, logit_c]*C + [s]; sigma through softplus,
  weights through softmax.
- ``LVHead(n_noise, noise_dim)``: the network sees [x, z] with z standard
  normal, outputs one mean; the density is the noise-mixture
  (1/K) sum_j N(y | mean_j, sigma_out^2) with a learned global sigma_out.
- ``GaussHead()``: homoscedastic Gaussian, one mean output and a learned
  global sigma_out (the mean-field baseline).

The observation-noise parameters of LVHead/GaussHead are learned point
estimates with no prior (they sit outside the weight posterior).
"""

from __future__ import annotations

import math

import numpy as np

from .bnn import GroupPrior, PriorConfig, nf_group_map, nf_prior
from .errors import ConfigError, StructuralError
from .flows import FlowStack, LOG_2PI, log_density_batch, log_density_params, sample
from .tape import Var

__all__ = ["NFHead", "MDNHead", "LVHead", "GaussHead", "make_head"]

_INV_SOFTPLUS_1 = math.log(math.expm1(1.0))  # softplus(x) = 1


def _logsumexp_np(v):
    m = np.max(v, axis=-1, keepdims=True)
    return m[..., 0] + np.log(np.exp(v - m).sum(axis=-1))


def _logsumexp_tape(t, ids):
    # detached max keeps exp arguments <= 0; gradients are unaffected since
    # the shift is a recorded constant
    m = max(t.vals[i] for i in ids)
    s = t.sum([t.exp(t.addc(i, -m)) for i in ids])
    return t.addc(t.log(s), m)


class NFHead:
    """Radial-flow head: network outputs are the packed stack parameters."""

    name = "nf"
    n_extras = 0

    def __init__(self, n_stages):
        if n_stages < 0:
            raise StructuralError("n_stages must be >= 0")
        self.n_stages = int(n_stages)
        self.output_dim = 3 * self.n_stages + 1

    def group_map(self):
        return nf_group_map(self.n_stages)

    def default_prior(self, sigma_w=1.0, lambda_=1.0, sigma_beta=1.0):
        return nf_prior(sigma_w, lambda_, sigma_beta)

    def init_extras(self):
        return np.empty(0)

    def prepare_inputs(self, x, rng):
        return np.asarray(x, dtype=float), 1

    def log_density_rows_np(self, omega, y, extras):
        return log_density_batch(omega, np.asarray(y, dtype=float))

    def log_density_rows_tape(self, tape, omega_ids, y, extra_ids):
        mc, batch, _ = omega_ids.shape
        out = np.empty((mc, batch), dtype=np.int64)
        for m in range(mc):
            for b in range(batch):
                params = [Var(tape, int(i)) for i in omega_ids[m, b]]
                out[m, b] = log_density_params(params, float(y[b])).id
        return out

    def omega_log_density(self, omega_row, y_grid):
        return log_density_batch(omega_row, y_grid)

    def curve_log_density(self, omega_rows, extras, y_grid):
        """Log density over y_grid from one datum's output rows."""
        return log_density_batch(omega_rows[0], np.asarray(y_grid, dtype=float))

    def sample_np(self, omega_row, extras, n, rng):
        return sample(FlowStack.from_vector(omega_row), n, rng)


class MDNHead:
    """Mixture-of-Gaussians head with a global offset."""

    name = "mdn"
    n_extras = 0

    def __init__(self, n_components):
        if n_components < 1:
            raise StructuralError("n_components must be >= 1")
        self.n_components = int(n_components)
        self.output_dim = 3 * self.n_components + 1

    def group_map(self):
        c = self.n_components
        return {
            "mu": tuple(range(0, 3 * c, 3)),
            "sigma_hat": tuple(range(1, 3 * c, 3)),
            "logit": tuple(range(2, 3 * c, 3)),
            "shift": (3 * c,),
        }

    def default_prior(self, sigma_w=1.0, lambda_=1.0, sigma_beta=1.0):
        groups = {g: GroupPrior(0.0, 1.0) for g in ("mu", "sigma_hat", "logit", "shift")}
        return PriorConfig(sigma_w, lambda_, groups)

    def init_extras(self):
        return np.empty(0)

    def prepare_inputs(self, x, rng):
        return np.asarray(x, dtype=float), 1

    def _split(self, omega):
        return (
            omega[..., 0:-1:3],
            omega[..., 1:-1:3],
            omega[..., 2:-1:3],
            omega[..., -1:],
        )

    def log_density_rows_np(self, omega, y, extras):
        mu, sig_hat, logit, s = self._split(np.asarray(omega, dtype=float))
        sigma = np.logaddexp(0.0, sig_hat)
        y = np.asarray(y, dtype=float)[..., None]
        # (y - s) first: shift equivariance then holds bit-exactly
        comp = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * (((y - s) - mu) / sigma) ** 2
        return _logsumexp_np(logit + comp) - _logsumexp_np(logit)

    def log_density_rows_tape(self, tape, omega_ids, y, extra_ids):
        t = tape
        mc, batch, _ = omega_ids.shape
        c = self.n_components
        out = np.empty((mc, batch), dtype=np.int64)
        for m in range(mc):
            for b in range(batch):
                row = omega_ids[m, b]
                s_id = int(row[-1])
                terms = []
                logits = []
                for i in range(c):
                    mu_id, sh_id, lg_id = int(row[3 * i]), int(row[3 * i + 1]), int(row[3 * i + 2])
                    sig = t.softplus(sh_id)
                    d = t.div(t.lincomb([mu_id, s_id], [-1.0, -1.0], float(y[b])), sig)
                    terms.append(
                        t.lincomb(
                            [lg_id, t.log(sig), t.square(d)],
                            [1.0, -1.0, -0.5],
                            -0.5 * LOG_2PI,
                        )
                    )
                    logits.append(lg_id)
                out[m, b] = t.add(
                    _logsumexp_tape(t, terms), t.neg(_logsumexp_tape(t, logits))
                )
        return out

    def omega_log_density(self, omega_row, y_grid):
        return self.log_density_rows_np(omega_row, y_grid, np.empty(0))

    def curve_log_density(self, omega_rows, extras, y_grid):
        return self.log_density_rows_np(
            omega_rows[0], np.asarray(y_grid, dtype=float), extras
        )

    def sample_np(self, omega_row, extras, n, rng):
        mu, sig_hat, logit, s = self._split(np.asarray(omega_row, dtype=float))
        sigma = np.logaddexp(0.0, sig_hat)
        w = np.exp(logit - _logsumexp_np(logit))
        picks = rng.choice(self.n_components, size=n, p=w)
        return mu[picks] + s[0] + sigma[picks] * rng.standard_normal(n)


class LVHead:
    """Latent-variable head: noise inputs in, Gaussian mixture over draws out."""

    name = "lv"
    output_dim = 1
    n_extras = 1

    def __init__(self, n_noise=5, noise_dim=1):
        if n_noise < 1 or noise_dim < 1:
            raise StructuralError("n_noise and noise_dim must be >= 1")
        self.n_noise = int(n_noise)
        self.noise_dim = int(noise_dim)

    def group_map(self):
        return {"mean": (0,)}

    def default_prior(self, sigma_w=1.0, lambda_=1.0, sigma_beta=1.0):
        return PriorConfig(sigma_w, lambda_, {"mean": GroupPrior(0.0, 1.0)})

    def init_extras(self):
        return np.array([_INV_SOFTPLUS_1])

    def prepare_inputs(self, x, rng):
        """Each datum becomes n_noise rows [x, z_j], z fresh per call."""
        x = np.asarray(x, dtype=float)
        b = x.shape[0]
        z = rng.standard_normal((b, self.n_noise, self.noise_dim))
        rows = np.concatenate(
            [np.repeat(x, self.n_noise, axis=0), z.reshape(b * self.n_noise, self.noise_dim)],
            axis=1,
        )
        return rows, self.n_noise

    def log_density_rows_np(self, omega, y, extras):
        k = self.n_noise
        mc = omega.shape[0]
        b = omega.shape[1] // k
        means = omega[..., 0].reshape(mc, b, k)
        sigma = float(np.logaddexp(0.0, extras[0]))
        y = np.asarray(y, dtype=float)[None, :, None]
        comp = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((y - means) / sigma) ** 2
        return _logsumexp_np(comp) - math.log(k)

    def log_density_rows_tape(self, tape, omega_ids, y, extra_ids):
        t = tape
        k = self.n_noise
        mc = omega_ids.shape[0]
        batch = omega_ids.shape[1] // k
        sig = t.softplus(int(extra_ids[0]))
        log_sig = t.log(sig)
        out = np.empty((mc, batch), dtype=np.int64)
        for m in range(mc):
            for b in range(batch):
                terms = []
                for j in range(k):
                    mean_id = int(omega_ids[m, b * k + j, 0])
                    d = t.div(t.lincomb([mean_id], [-1.0], float(y[b])), sig)
                    terms.append(
                        t.lincomb(
                            [log_sig, t.square(d)], [-1.0, -0.5], -0.5 * LOG_2PI
                        )
                    )
                out[m, b] = t.addc(_logsumexp_tape(t, terms), -math.log(k))
        return out

    def curve_log_density(self, omega_rows, extras, y_grid):
        means = np.asarray(omega_rows, dtype=float).reshape(-1)
        sigma = float(np.logaddexp(0.0, extras[0]))
        y = np.asarray(y_grid, dtype=float)[:, None]
        comp = -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((y - means) / sigma) ** 2
        return _logsumexp_np(comp) - math.log(means.size)

    def sample_np(self, omega_rows, extras, n, rng):
        """omega_rows holds the per-noise-draw means for one datum."""
        means = np.asarray(omega_rows, dtype=float).reshape(-1)
        sigma = float(np.logaddexp(0.0, extras[0]))
        picks = rng.choice(means.size, size=n)
        return means[picks] + sigma * rng.standard_normal(n)


class GaussHead:
    """Homoscedastic Gaussian: network mean, learned global noise scale."""

    name = "gauss"
    output_dim = 1
    n_extras = 1

    def group_map(self):
        return {"mean": (0,)}

    def default_prior(self, sigma_w=1.0, lambda_=1.0, sigma_beta=1.0):
        return PriorConfig(sigma_w, lambda_, {"mean": GroupPrior(0.0, 1.0)})

    def init_extras(self):
        return np.array([_INV_SOFTPLUS_1])

    def prepare_inputs(self, x, rng):
        return np.asarray(x, dtype=float), 1

    def log_density_rows_np(self, omega, y, extras):
        mean = omega[..., 0]
        sigma = float(np.logaddexp(0.0, extras[0]))
        y = np.asarray(y, dtype=float)
        return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((y - mean) / sigma) ** 2

    def log_density_rows_tape(self, tape, omega_ids, y, extra_ids):
        t = tape
        mc, batch, _ = omega_ids.shape
        sig = t.softplus(int(extra_ids[0]))
        log_sig = t.log(sig)
        out = np.empty((mc, batch), dtype=np.int64)
        for m in range(mc):
            for b in range(batch):
                mean_id = int(omega_ids[m, b, 0])
                d = t.div(t.lincomb([mean_id], [-1.0], float(y[b])), sig)
                out[m, b] = t.lincomb(
                    [log_sig, t.square(d)], [-1.0, -0.5], -0.5 * LOG_2PI
                )
        return out

    def omega_log_density(self, omega_row, y_grid):
        # unit noise scale: prior visualisation has no fitted extras
        return -0.5 * LOG_2PI - 0.5 * (np.asarray(y_grid) - omega_row[0]) ** 2

    def curve_log_density(self, omega_rows, extras, y_grid):
        sigma = float(np.logaddexp(0.0, extras[0]))
        y = np.asarray(y_grid, dtype=float)
        return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((y - omega_rows[0, 0]) / sigma) ** 2

    def sample_np(self, omega_row, extras, n, rng):
        sigma = float(np.logaddexp(0.0, extras[0]))
        return float(omega_row[0]) + sigma * rng.standard_normal(n)


def make_head(name, n_stages=5, n_components=5, n_noise=5, noise_dim=1):
    """Head factory used by the CLI (`--head {nf,mdn,lv,gauss}`)."""
    if name == "nf":
        return NFHead(n_stages)
    if name == "mdn":
        return MDNHead(n_components)
    if name == "lv":
        return LVHead(n_noise, noise_dim)
    if name == "gauss":
        return GaussHead()
    raise ConfigError(f"unknown head {name!r} (expected nf, mdn, lv, or gauss)")
