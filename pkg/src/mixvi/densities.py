"""Probability densities and samplers.

Diagonal Gaussians (the per-component variational family), uniform
mixtures thereof, Bernoulli pixel likelihoods, and the two analytic 2-D
targets. All log-densities are built from diffcore ops so they are
differentiable whenever a tape is active; called on plain arrays with no
tape they are just (Tensor-wrapped) numpy evaluations.

`CROSS_EVAL_COUNT` counts mixture-denominator evaluations. Ensemble-style
training must never touch other components' densities, and tests assert
that through this counter.
"""

import numpy as np

from . import diffcore as dc
from . import kernels
from .errors import ContractError, DimensionError, SamplingError

LOG_2PI = float(np.log(2.0 * np.pi))

CROSS_EVAL_COUNT = 0


def reset_cross_eval_count():
    global CROSS_EVAL_COUNT
    CROSS_EVAL_COUNT = 0


def _bump_cross_eval():
    global CROSS_EVAL_COUNT
    CROSS_EVAL_COUNT += 1


class DiagGaussian:
    """Mean / log-variance pair; both (d,) or batched (B, d)."""

    def __init__(self, mean, log_var):
        self.mean = mean if isinstance(mean, dc.Tensor) else dc.Tensor(mean)
        self.log_var = log_var if isinstance(log_var, dc.Tensor) else dc.Tensor(log_var)
        if self.mean.data.shape != self.log_var.data.shape:
            raise DimensionError("mean and log_var shapes differ")
        if not (np.isfinite(self.mean.data).all() and np.isfinite(self.log_var.data).all()):
            raise ContractError("non-finite Gaussian parameters")

    @property
    def dim(self):
        return self.mean.data.shape[-1]

    def log_prob(self, z):
        z = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
        if z.data.shape[-1] != self.dim:
            raise DimensionError(f"z dim {z.data.shape[-1]} != Gaussian dim {self.dim}")
        diff = z - self.mean
        q = self.log_var + dc.square(diff) * dc.exp(-self.log_var)
        return -0.5 * (dc.tsum(q, axis=-1) + self.dim * LOG_2PI)

    def rsample(self, eps):
        """z = mean + exp(log_var / 2) * eps; differentiable in both params."""
        eps = eps if isinstance(eps, dc.Tensor) else dc.Tensor(eps)
        if eps.data.shape[-1] != self.dim:
            raise DimensionError("eps dim mismatch")
        return self.mean + dc.exp(0.5 * self.log_var) * eps

    def entropy(self):
        # 0.5 * sum(log(2*pi*e) + log_var)
        return 0.5 * (dc.tsum(self.log_var, axis=-1) + self.dim * (LOG_2PI + 1.0))


class UniformMixture:
    """Equal-weight mixture of density handles sharing one space."""

    def __init__(self, components):
        if len(components) < 1:
            raise ContractError("mixture needs at least one component")
        self.components = list(components)

    @property
    def size(self):
        return len(self.components)

    def log_prob(self, z):
        _bump_cross_eval()
        lps = dc.stack([c.log_prob(z) for c in self.components], axis=0)
        return dc.logsumexp(lps, axis=0) - np.log(self.size)


def cross_gauss_log_prob(z, means, log_vars):
    """(B,d) samples against (C,d) Gaussian parameters -> (B,C) log-densities.

    Kernel-backed (numba or numpy per MIXVI_BACKEND); differentiable in all
    three arguments. This is the hot path for pseudo-input priors where
    C = K*S.
    """
    _bump_cross_eval()
    z = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
    means = means if isinstance(means, dc.Tensor) else dc.Tensor(means)
    log_vars = log_vars if isinstance(log_vars, dc.Tensor) else dc.Tensor(log_vars)
    if z.data.ndim != 2 or means.data.ndim != 2 or means.data.shape != log_vars.data.shape:
        raise DimensionError("cross_gauss_log_prob expects z (B,d), params (C,d)")
    if z.data.shape[1] != means.data.shape[1]:
        raise DimensionError("z and component dims differ")
    value = kernels.cross_gauss_logpdf(z.data, means.data, log_vars.data)

    def backward(g):
        dz, dmu, dlv = kernels.cross_gauss_logpdf_grads(z.data, means.data, log_vars.data,
                                                        np.ascontiguousarray(g))
        dc.accumulate(z, dz)
        dc.accumulate(means, dmu)
        dc.accumulate(log_vars, dlv)

    return dc.custom_op(value, (z, means, log_vars), backward)


def bernoulli_log_prob(x, logits):
    """Pixel-wise Bernoulli log-likelihood, summed over the last axis.

    x must be binary; logits parameterize the per-pixel success probability
    through a sigmoid. Stabilized via softplus; kernel-backed.
    """
    xd = x.data if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)
    logits = logits if isinstance(logits, dc.Tensor) else dc.Tensor(logits)
    if xd.shape != logits.data.shape:
        raise DimensionError("x and logits shapes differ")
    if not np.isin(xd, (0.0, 1.0)).all():
        raise ContractError("bernoulli_log_prob needs binary x")
    squeeze = xd.ndim == 1
    x2 = xd[None, :] if squeeze else xd
    l2 = logits.data[None, :] if squeeze else logits.data
    value = kernels.bernoulli_logits_logpdf(x2, l2)
    if squeeze:
        value = value[0]

    def backward(g):
        g2 = np.asarray(g).reshape(x2.shape[0])
        dl = kernels.bernoulli_logits_grad(x2, l2, g2)
        dc.accumulate(logits, dl[0] if squeeze else dl)

    return dc.custom_op(value, (logits,), backward)


class BimodalTarget:
    """0.8 N((1,1), 0.1 I) + 0.2 N((-1,-1), 0.1 I); normalized."""

    def __init__(self, heavy_weight=0.8, offset=1.0, var=0.1):
        self.weights = np.array([heavy_weight, 1.0 - heavy_weight])
        self.modes = np.array([[offset, offset], [-offset, -offset]])
        self.var = var

    @property
    def mean(self):
        return self.weights @ self.modes

    def log_prob(self, z):
        z = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
        lv = np.full(2, np.log(self.var))
        parts = [DiagGaussian(m, lv).log_prob(z) + np.log(w)
                 for m, w in zip(self.modes, self.weights)]
        return dc.logsumexp(dc.stack(parts, axis=0), axis=0)

    def sample(self, n, rng):
        which = rng.random(n) < self.weights[0]
        centers = np.where(which[:, None], self.modes[0], self.modes[1])
        return centers + np.sqrt(self.var) * rng.standard_normal((n, 2))


class RingTarget:
    """Gaussian shell exp(-(|z| - radius)^2 / (2 width^2)), unnormalized.

    Self-normalized estimators and VI objectives only need the target up
    to a constant, so no normalizer is tracked.
    """

    normalized = False

    def __init__(self, radius=2.0, width=0.2):
        self.radius = radius
        self.width = width

    @property
    def mean(self):
        return np.zeros(2)

    def log_prob(self, z):
        z = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
        r = dc.sqrt(dc.tsum(dc.square(z), axis=-1))
        return -0.5 * dc.square(r - self.radius) * (1.0 / self.width ** 2)

    def sample(self, n, rng, box=4.0, max_tries=200):
        """Rejection sampling against a uniform envelope over [-box, box]^2."""
        out = []
        got = 0
        for _ in range(max_tries):
            m = max(4 * n, 1000)
            cand = rng.uniform(-box, box, size=(m, 2))
            # unnormalized density peaks at exactly 1, so U(0,1) is an envelope
            accept = rng.random(m) < np.exp(self.log_prob(cand).data)
            kept = cand[accept]
            out.append(kept)
            got += len(kept)
            if got >= n:
                return np.concatenate(out)[:n]
        raise SamplingError(f"ring rejection sampler produced {got}/{n} points")
