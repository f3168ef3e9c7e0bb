"""Hot numeric kernels, each in a numba and a pure-numpy flavor.

These cover the loops that dominate desk-scale runtime and are not BLAS
matmuls: cross Gaussian log-densities (a pseudo-input prior mixes K*S
components per latent), Bernoulli-logit likelihoods over pixel batches,
fused Adam updates, and k-means assignment. `backend.py` decides which
flavor the module-level names point at; the `_np` / `_nb` variants stay
importable so benchmarks and tests can compare the two paths.
"""

import numpy as np

from .backend import USE_NUMBA, njit_if_enabled

LOG_2PI = 1.8378770664093453


# ---------------------------------------------------------------- numpy path

def cross_gauss_logpdf_np(z, mu, lv):
    # (B,d) x (C,d) -> (B,C); diagonal Gaussian log N(z_b; mu_c, exp(lv_c))
    diff = z[:, None, :] - mu[None, :, :]
    q = lv[None, :, :] + diff * diff * np.exp(-lv)[None, :, :]
    return -0.5 * (q.sum(axis=2) + z.shape[1] * LOG_2PI)


def cross_gauss_logpdf_grads_np(z, mu, lv, g):
    ivar = np.exp(-lv)  # (C,d)
    diff = z[:, None, :] - mu[None, :, :]  # (B,C,d)
    w = diff * ivar[None, :, :]
    dz = -np.einsum("bc,bcd->bd", g, w)
    dmu = np.einsum("bc,bcd->cd", g, w)
    dlv = -0.5 * (g.sum(axis=0)[:, None] - np.einsum("bc,bcd->cd", g, diff * w))
    return dz, dmu, dlv


def bernoulli_logits_logpdf_np(x, logits):
    # sum_d x*log(sigmoid(l)) + (1-x)*log(1-sigmoid(l)), stabilized
    sp_pos = np.logaddexp(0.0, logits)   # softplus(l)
    sp_neg = np.logaddexp(0.0, -logits)  # softplus(-l)
    return -(x * sp_neg + (1.0 - x) * sp_pos).sum(axis=-1)


def bernoulli_logits_grad_np(x, logits, g):
    sig = np.empty_like(logits)
    pos = logits >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    e = np.exp(logits[~pos])
    sig[~pos] = e / (1.0 + e)
    return (x - sig) * g[..., None]


def adam_update_np(p, grad, m, v, t, lr, beta1, beta2, eps):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def kmeans_assign_np(X, cent):
    d2 = ((X[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels.astype(np.int64), d2[np.arange(X.shape[0]), labels]


# ---------------------------------------------------------------- numba path

if USE_NUMBA:

    @njit_if_enabled
    def cross_gauss_logpdf_nb(z, mu, lv):
        B, d = z.shape
        C = mu.shape[0]
        out = np.empty((B, C))
        for c in range(C):
            ivar = np.empty(d)
            base = d * LOG_2PI
            for k in range(d):
                ivar[k] = np.exp(-lv[c, k])
                base += lv[c, k]
            for b in range(B):
                acc = 0.0
                for k in range(d):
                    diff = z[b, k] - mu[c, k]
                    acc += diff * diff * ivar[k]
                out[b, c] = -0.5 * (acc + base)
        return out

    @njit_if_enabled
    def cross_gauss_logpdf_grads_nb(z, mu, lv, g):
        B, d = z.shape
        C = mu.shape[0]
        dz = np.zeros((B, d))
        dmu = np.zeros((C, d))
        dlv = np.zeros((C, d))
        for c in range(C):
            gc = 0.0
            for b in range(B):
                gc += g[b, c]
            for k in range(d):
                ivar = np.exp(-lv[c, k])
                acc_mu = 0.0
                acc_lv = 0.0
                for b in range(B):
                    w = (z[b, k] - mu[c, k]) * ivar
                    dz[b, k] -= g[b, c] * w
                    acc_mu += g[b, c] * w
                    acc_lv += g[b, c] * (z[b, k] - mu[c, k]) * w
                dmu[c, k] = acc_mu
                dlv[c, k] = -0.5 * (gc - acc_lv)
        return dz, dmu, dlv

    @njit_if_enabled
    def bernoulli_logits_logpdf_nb(x, logits):
        B, D = x.shape
        out = np.empty(B)
        for b in range(B):
            acc = 0.0
            for k in range(D):
                l = logits[b, k]
                if l >= 0.0:
                    sp_pos = l + np.log1p(np.exp(-l))
                    sp_neg = np.log1p(np.exp(-l))
                else:
                    sp_pos = np.log1p(np.exp(l))
                    sp_neg = -l + np.log1p(np.exp(l))
                acc += x[b, k] * sp_neg + (1.0 - x[b, k]) * sp_pos
            out[b] = -acc
        return out

    @njit_if_enabled
    def bernoulli_logits_grad_nb(x, logits, g):
        B, D = x.shape
        out = np.empty((B, D))
        for b in range(B):
            for k in range(D):
                l = logits[b, k]
                if l >= 0.0:
                    sig = 1.0 / (1.0 + np.exp(-l))
                else:
                    e = np.exp(l)
                    sig = e / (1.0 + e)
                out[b, k] = (x[b, k] - sig) * g[b]
        return out

    @njit_if_enabled
    def _adam_update_flat_nb(p, grad, m, v, t, lr, beta1, beta2, eps):
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for i in range(p.shape[0]):
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
            p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)

    def adam_update_nb(p, grad, m, v, t, lr, beta1, beta2, eps):
        _adam_update_flat_nb(p.reshape(-1), np.ascontiguousarray(grad).reshape(-1),
                             m.reshape(-1), v.reshape(-1), t, lr, beta1, beta2, eps)

    @njit_if_enabled
    def kmeans_assign_nb(X, cent):
        n, d = X.shape
        k = cent.shape[0]
        labels = np.empty(n, dtype=np.int64)
        dists = np.empty(n)
        for i in range(n):
            best = np.inf
            arg = 0
            for c in range(k):
                acc = 0.0
                for j in range(d):
                    diff = X[i, j] - cent[c, j]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    arg = c
            labels[i] = arg
            dists[i] = best
        return labels, dists

else:
    cross_gauss_logpdf_nb = None
    cross_gauss_logpdf_grads_nb = None
    bernoulli_logits_logpdf_nb = None
    bernoulli_logits_grad_nb = None
    adam_update_nb = None
    kmeans_assign_nb = None


if USE_NUMBA:
    cross_gauss_logpdf = cross_gauss_logpdf_nb
    cross_gauss_logpdf_grads = cross_gauss_logpdf_grads_nb
    bernoulli_logits_logpdf = bernoulli_logits_logpdf_nb
    bernoulli_logits_grad = bernoulli_logits_grad_nb
    adam_update = adam_update_nb
    kmeans_assign = kmeans_assign_nb
else:
    cross_gauss_logpdf = cross_gauss_logpdf_np
    cross_gauss_logpdf_grads = cross_gauss_logpdf_grads_np
    bernoulli_logits_logpdf = bernoulli_logits_logpdf_np
    bernoulli_logits_grad = bernoulli_logits_grad_np
    adam_update = adam_update_np
    kmeans_assign = kmeans_assign_np
