"""Diversity and representation-quality diagnostics.

Component diversity is a Jensen-Shannon-style divergence for uniform
mixtures: mixture entropy minus mean component entropy, non-negative and
bounded by log S. Component entropies are analytic (diagonal Gaussians);
the mixture entropy is Monte Carlo with stratified draws.

Cluster agreement uses the chance-adjusted rand index and normalized
mutual information computed exactly from the contingency table. The
linear probe is a multinomial logistic classifier trained by full-batch
gradient descent (any linear decision boundary family would do; absolute
accuracies are not comparable across probe families, orderings are).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError


def jsd_mc(means, log_vars, n_samples, rng):
    """Diversity of S diagonal Gaussians given as (S, d) parameter arrays.

    Returns (raw, clamped): the raw MC estimate and its clamp onto the
    valid [0, log S] band.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    log_vars = np.atleast_2d(np.asarray(log_vars, dtype=np.float64))
    if means.shape != log_vars.shape:
        raise ContractError("means and log_vars shapes differ")
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    S, d = means.shape
    if S == 1:
        return 0.0, 0.0
    comp_entropies = 0.5 * (log_vars.sum(axis=1) + d * (np.log(2 * np.pi) + 1.0))
    total = 0.0
    count = 0
    chunk = max(1, 262144 // max(S, 1))
    for lo in range(0, n_samples, chunk):
        n = min(chunk, n_samples - lo)
        draws = means[:, None, :] + np.exp(0.5 * log_vars)[:, None, :] * \
            rng.standard_normal((S, n, d))
        comp_lp = kernels.cross_gauss_logpdf(draws.reshape(S * n, d), means, log_vars)
        m = comp_lp.max(axis=1, keepdims=True)
        mix_lp = np.log(np.exp(comp_lp - m).mean(axis=1)) + m[:, 0]
        total += mix_lp.sum()
        count += mix_lp.size
    mixture_entropy = -total / count
    raw = float(mixture_entropy - comp_entropies.mean())
    return raw, float(np.clip(raw, 0.0, np.log(S)))


def jsd_over_dataset(model, images, rng, n_points=500, n_samples=64):
    """Mean per-datapoint diversity over a held-out subset (default 500
    points). Uses the top-level posteriors of the model's bank."""
    images = np.asarray(images, dtype=np.float64)
    take = min(n_points, len(images))
    x = images[:take]
    params = posterior_parameters(model, x)  # (n, S, 2, d)
    vals = [jsd_mc(params[i, :, 0], params[i, :, 1], n_samples, rng)[1]
            for i in range(take)]
    return float(np.mean(vals)), float(np.std(vals) / np.sqrt(take))


def posterior_parameters(model, images, batch=500):
    """(n, S, 2, d) array of per-component posterior (mean, log_var) rows;
    evaluation only."""
    outs = []
    for lo in range(0, len(images), batch):
        state = model.begin(images[lo: lo + batch])
        qs = state.get("posteriors") or state.get("posteriors2")
        block = np.stack([
            np.stack([q.mean.data, q.log_var.data], axis=1) for q in qs
        ], axis=1)  # (b, S, 2, d)
        outs.append(block)
    return np.concatenate(outs, axis=0)


def mixture_parameter_features(model, images, batch=500):
    """Per-datapoint concatenation over components of (mean, log_var):
    the mixture-parameter latent representation, length S*2*d."""
    p = posterior_parameters(model, images, batch=batch)
    n = p.shape[0]
    return p.reshape(n, -1)


def baseline_features_by_sampling(model, images, n_draws, rng, expected_len=None, batch=500):
    """Single-component baseline representation: n_draws reparameterized
    samples concatenated per datapoint, so feature lengths can be matched
    to a mixture representation (n_draws = 2S gives S*2*d)."""
    if model.S != 1:
        raise ContractError("sampling baseline is a single-component representation")
    p = posterior_parameters(model, images, batch=batch)
    mean, lv = p[:, 0, 0], p[:, 0, 1]
    n, d = mean.shape
    if expected_len is not None and n_draws * d != expected_len:
        raise ContractError(f"n_draws*d = {n_draws * d} != expected length {expected_len}")
    eps = rng.standard_normal((n, n_draws, d))
    draws = mean[:, None, :] + np.exp(0.5 * lv)[:, None, :] * eps
    return draws.reshape(n, n_draws * d)


def _contingency(truth, pred):
    if len(truth) != len(pred):
        raise ContractError("labelings must have equal length")
    if len(truth) == 0:
        raise ContractError("empty labelings")
    _, ti = np.unique(truth, return_inverse=True)
    _, pi = np.unique(pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def _comb2(x):
    return x * (x - 1) / 2.0


def ari(pred, truth):
    """Rand index adjusted for chance, exact from the contingency table."""
    table = _contingency(truth, pred)
    n = table.sum()
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    expected = sum_a * sum_b / _comb2(n)
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        return 1.0
    return float((sum_ij - expected) / (maximum - expected))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth):
    """Mutual information normalized by the geometric mean of the label
    entropies. A constant labeling has zero entropy; that degenerate case
    is defined as 0 and warned about."""
    table = _contingency(truth, pred)
    n = table.sum()
    h_t = _entropy(table.sum(axis=1))
    h_p = _entropy(table.sum(axis=0))
    if h_t == 0.0 or h_p == 0.0:
        warnings.warn("constant labeling: normalized mutual information defined as 0")
        return 0.0
    pij = table / n
    pi = table.sum(axis=1, keepdims=True) / n
    pj = table.sum(axis=0, keepdims=True) / n
    mask = pij > 0
    mi = (pij[mask] * np.log(pij[mask] / (pi @ pj)[mask])).sum()
    return float(mi / np.sqrt(h_t * h_p))


@dataclass
class KmeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float


def kmeans(X, k, rng, restarts=10, max_iter=300):
    """Lloyd's algorithm with greedy ++ seeding; best inertia over
    restarts wins."""
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if k > n:
        raise ContractError(f"k={k} exceeds the {n} points")
    if k < 1:
        raise ContractError("k must be >= 1")
    best = None
    for _ in range(restarts):
        cent = _plus_plus_init(X, k, rng)
        labels = None
        for _ in range(max_iter):
            new_labels, d2 = kernels.kmeans_assign(X, cent)
            if labels is not None and (new_labels == labels).all():
                break
            labels = new_labels
            for c in range(k):
                members = X[labels == c]
                if len(members):
                    cent[c] = members.mean(axis=0)
                else:
                    cent[c] = X[d2.argmax()]
        labels, d2 = kernels.kmeans_assign(X, cent)
        inertia = float(d2.sum())
        if best is None or inertia < best.inertia:
            best = KmeansResult(labels, cent.copy(), inertia)
    return best


def _plus_plus_init(X, k, rng):
    cent = np.empty((k, X.shape[1]))
    cent[0] = X[rng.integers(len(X))]
    d2 = ((X - cent[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            cent[c:] = X[rng.integers(len(X), size=k - c)]
            break
        cent[c] = X[rng.choice(len(X), p=d2 / total)]
        d2 = np.minimum(d2, ((X - cent[c]) ** 2).sum(axis=1))
    return cent


@dataclass
class ProbeResult:
    accuracy: float
    converged: bool
    n_unseen: int   # test points whose class never appeared in training


def linear_probe(train_X, train_y, test_X, test_y, l2=1e-4, tol=1e-6, max_iter=5000):
    """Multinomial logistic probe: full-batch gradient descent with an L2
    penalty on the weights (not the intercept), step size set from the
    curvature bound 0.25*lambda_max(X^T X)/n + l2."""
    train_X = np.asarray(train_X, dtype=np.float64)
    test_X = np.asarray(test_X, dtype=np.float64)
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ContractError("probe needs at least two classes in training data")
    cls_index = {c: i for i, c in enumerate(classes)}
    y_idx = np.array([cls_index[c] for c in train_y])
    n, d = train_X.shape
    C = len(classes)
    Y = np.zeros((n, C))
    Y[np.arange(n), y_idx] = 1.0

    lam_max = float(np.linalg.eigvalsh(train_X.T @ train_X / n)[-1])
    lr = 1.0 / (0.25 * lam_max + l2 + 1e-12)
    W = np.zeros((d, C))
    b = np.zeros(C)
    converged = False
    for _ in range(max_iter):
        logits = train_X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        P = np.exp(logits)
        P /= P.sum(axis=1, keepdims=True)
        resid = (P - Y) / n
        gW = train_X.T @ resid + l2 * W
        gb = resid.sum(axis=0)
        if max(np.abs(gW).max(), np.abs(gb).max()) < tol:
            converged = True
            break
        W -= lr * gW
        b -= lr * gb

    pred_idx = (test_X @ W + b).argmax(axis=1)
    pred = classes[pred_idx]
    test_y = np.asarray(test_y)
    unseen = ~np.isin(test_y, classes)
    if unseen.any():
        warnings.warn(f"{int(unseen.sum())} test points have classes unseen in training; "
                      "they are scored as errors")
    correct = (pred == test_y) & ~unseen
    return ProbeResult(float(correct.mean()), converged, int(unseen.sum()))
