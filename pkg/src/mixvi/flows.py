"""Masked autoregressive affine flows with exact log-determinants.

Each transform is z' = shift(z) + scale(z) * z where shift and the
pre-scale come from one masked autoregressive net, so coordinate i of the
output depends on input coordinates strictly before i (in that
transform's ordering) plus an optional unmasked context vector. The
Jacobian is triangular; log|det| is the sum of log scales.

scale = sigmoid(pre + 2) / sigmoid(2): bounded away from 0, mildly
expansive at most, and exactly 1 when the final net layer is zeroed, so a
fresh stack is the identity map with zero log-determinant. Successive
transforms alternate the autoregressive ordering (built into the masks,
not applied as a data permutation).
"""

import numpy as np

from . import diffcore as dc
from .densities import DiagGaussian
from .errors import DimensionError, NumericalError

_LOG_SIG2 = float(np.log(1.0 / (1.0 + np.exp(-2.0))))  # log sigmoid(2)


def _degrees(dim, hidden_sizes, reverse_order):
    d_in = np.arange(1, dim + 1)
    if reverse_order:
        d_in = d_in[::-1].copy()
    hidden = []
    top = max(dim - 1, 1)
    for h in hidden_sizes:
        hidden.append((np.arange(h) % top) + (1 if dim > 1 else 0))
    return d_in, hidden


class MadeNet:
    """Two-output masked net: z (B,d) -> (shift (B,d), pre_scale (B,d)).

    `reverse_order` flips the autoregressive ordering. The final layer is
    zero-initialized so the induced flow starts at the identity.
    """

    def __init__(self, dim, hidden_sizes, rng, context_dim=0, reverse_order=False, name="made"):
        self.dim = dim
        self.context_dim = context_dim
        self.reverse_order = reverse_order
        self.in_degrees, hidden_degrees = _degrees(dim, hidden_sizes, reverse_order)
        self.params = []
        self.layers = []  # (W, b, U or None, mask)

        prev_deg = self.in_degrees
        prev_size = dim
        for li, (h, deg) in enumerate(zip(hidden_sizes, hidden_degrees)):
            mask = (deg[None, :] >= prev_deg[:, None]).astype(np.float64)
            W = dc.Parameter(rng.normal(0.0, 1.0 / np.sqrt(prev_size), (prev_size, h)),
                             f"{name}.W{li}")
            b = dc.Parameter(np.zeros(h), f"{name}.b{li}", bias=True)
            U = None
            if context_dim:
                U = dc.Parameter(rng.normal(0.0, 1.0 / np.sqrt(context_dim), (context_dim, h)),
                                 f"{name}.U{li}")
            self.layers.append((W, b, U, mask))
            self.params += [W, b] + ([U] if U is not None else [])
            prev_deg, prev_size = deg, h

        out_deg = np.concatenate([self.in_degrees, self.in_degrees])
        out_mask = (out_deg[None, :] > prev_deg[:, None]).astype(np.float64)
        self.W_out = dc.Parameter(np.zeros((prev_size, 2 * dim)), f"{name}.Wout")
        self.b_out = dc.Parameter(np.zeros(2 * dim), f"{name}.bout", bias=True)
        self.U_out = None
        if context_dim:
            self.U_out = dc.Parameter(np.zeros((context_dim, 2 * dim)), f"{name}.Uout")
        self.out_mask = out_mask
        self.params += [self.W_out, self.b_out] + ([self.U_out] if self.U_out is not None else [])

    def forward(self, z, context=None):
        z = z if isinstance(z, dc.Tensor) else dc.Tensor(z)
        if z.data.shape[-1] != self.dim:
            raise DimensionError(f"MADE input dim {z.data.shape[-1]} != {self.dim}")
        h = z
        for W, b, U, mask in self.layers:
            pre = dc.matmul(h, dc.mul(W, mask)) + b
            if U is not None:
                pre = pre + dc.matmul(context, U)
            h = dc.tanh(pre)
        out = dc.matmul(h, dc.mul(self.W_out, self.out_mask)) + self.b_out
        if self.U_out is not None:
            out = out + dc.matmul(context, self.U_out)
        shift = out[..., : self.dim]
        pre_scale = out[..., self.dim:]
        return shift, pre_scale

    def parameters(self):
        return list(self.params)


class FlowStack:
    """T chained masked-affine transforms with alternating orderings."""

    def __init__(self, dim, n_transforms, hidden_sizes, rng, context_dim=0, name="flow"):
        self.dim = dim
        self.transforms = [
            MadeNet(dim, hidden_sizes, rng, context_dim=context_dim,
                    reverse_order=bool(t % 2), name=f"{name}.t{t}")
            for t in range(n_transforms)
        ]

    @property
    def n_transforms(self):
        return len(self.transforms)

    def parameters(self):
        out = []
        for t in self.transforms:
            out += t.parameters()
        return out

    def _scale_terms(self, pre_scale):
        log_scale = dc.softplus(dc.Tensor(-2.0)) - dc.softplus(-(pre_scale + 2.0))
        scale = dc.exp(log_scale)
        return scale, log_scale

    def forward(self, z0, context=None):
        """Returns (zT, sum of per-transform log|det Jacobian|)."""
        z = z0 if isinstance(z0, dc.Tensor) else dc.Tensor(z0)
        batch_shape = z.data.shape[:-1]
        log_det = dc.Tensor(np.zeros(batch_shape))
        for tr in self.transforms:
            shift, pre_scale = tr.forward(z, context)
            scale, log_scale = self._scale_terms(pre_scale)
            z = shift + scale * z
            log_det = log_det + dc.tsum(log_scale, axis=-1)
        if not np.isfinite(log_det.data).all():
            raise NumericalError("non-finite flow log-determinant")
        return z, log_det

    def inverse(self, zT, context=None):
        """Sequential coordinate-wise inversion; numpy-valued."""
        z = np.asarray(zT, dtype=np.float64)
        squeeze = z.ndim == 1
        if squeeze:
            z = z[None, :]
        ctx = None if context is None else np.asarray(context, dtype=np.float64)
        for tr in reversed(self.transforms):
            z_prev = np.zeros_like(z)
            # output coordinate of degree k only uses inputs of degree < k,
            # so filling in degree order converges in exactly dim steps
            order = np.argsort(tr.in_degrees)
            for i in order:
                shift, pre_scale = tr.forward(dc.Tensor(z_prev),
                                              None if ctx is None else dc.Tensor(ctx))
                scale = np.exp(_log_scale_np(pre_scale.data))
                z_prev[:, i] = (z[:, i] - shift.data[:, i]) / scale[:, i]
            z = z_prev
        return z[0] if squeeze else z

    def log_det_from(self, z_base, context=None):
        """log|det| of the full stack along the trajectory started at z_base."""
        _, log_det = self.forward(z_base, context)
        return log_det

    def log_q(self, z_base, base: DiagGaussian, context=None):
        """Flow-extended log-density per the change-of-variables formula,
        evaluated from the base-space sample alone:
        log q(zT) = base.log_prob(z_base) - log|det|."""
        return base.log_prob(z_base) - self.log_det_from(z_base, context)


def _log_scale_np(pre_scale):
    return np.logaddexp(0.0, -2.0) - np.logaddexp(0.0, -(pre_scale + 2.0))
