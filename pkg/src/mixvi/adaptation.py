"""Learning loops: 2-D gradient VI, deterministic-mixture population Monte
Carlo, and the desk-scale mixture-VAE trainer.

The 2-D fits contrast three adaptation styles on the same targets:
`mixture` adapts all S components jointly under the shared-denominator
objective, `ensemble` adapts S components independently (each sees only
its own density — asserted via the cross-evaluation counter), and `iwvi`
adapts a single component under the L-sample importance-weighted
divergence. An `iaf` mode fits a masked-autoregressive flow instead.

DM-PMC adapts proposal locations by sampling, weighting with the full
mixture in the denominator, and globally resampling. Multiplying the
target by a constant provably changes nothing downstream of weight
normalization.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import objectives as obj
from .data import binarize_dynamic
from .densities import DiagGaussian, UniformMixture
from .errors import (ConfigError, ContractError, DegenerateWeightsError, NumericalError,
                     TrainingError)
from .flows import FlowStack
from .kernels import cross_gauss_logpdf

VI2D_MODES = ("mixture", "ensemble", "iwvi", "iaf")


@dataclass
class Vi2DConfig:
    mode: str = "mixture"
    S: int = 30
    L: int = 1
    steps: int = 2000
    lr: float = 0.1
    mc_draws: int = 32      # outer Monte Carlo draws per component per step
    sigma_init: float = 1.0
    T: int = 8              # flow transforms (iaf mode)
    made_hidden: tuple = (10, 10)
    trace_every: int = 50

    def validate(self):
        if self.mode not in VI2D_MODES:
            raise ConfigError(f"mode must be one of {VI2D_MODES}, got {self.mode!r}")
        if self.mode in ("iwvi", "iaf") and self.S != 1:
            raise ConfigError(f"{self.mode} uses a single approximation (S=1)")
        if self.mode == "ensemble" and self.L != 1:
            raise ConfigError("ensemble components each train on their own L=1 objective")
        if self.S < 1 or self.L < 1 or self.steps < 0:
            raise ConfigError("S, L must be >= 1 and steps >= 0")


class FlowApprox:
    """Learnable Gaussian base pushed through a flow stack; the 2-D `iaf`
    approximation."""

    def __init__(self, dim, T, made_hidden, rng, sigma_init=1.0):
        self.base_mean = dc.Parameter(np.zeros(dim), "iaf.base_mean")
        self.base_log_var = dc.Parameter(np.full(dim, 2 * np.log(sigma_init)),
                                         "iaf.base_log_var")
        self.flow = FlowStack(dim, T, made_hidden, rng, name="iaf")

    def base(self):
        return DiagGaussian(self.base_mean, self.base_log_var)

    def sample_with_log_prob(self, rng, n):
        base = self.base()
        z0 = base.rsample(rng.standard_normal((n, base.dim)))
        zT, log_det = self.flow.forward(z0)
        return zT, base.log_prob(z0) - log_det

    def sample(self, rng, n):
        z, _ = self.sample_with_log_prob(rng, n)
        return z.data

    def parameters(self):
        return [self.base_mean, self.base_log_var] + self.flow.parameters()


@dataclass
class Fit2DResult:
    mode: str
    means: np.ndarray          # (S, 2) final component means
    log_vars: np.ndarray       # (S, 2)
    trace: list                # [(step, (S,2) means copy)]
    losses: list
    approx: object = None      # FlowApprox for iaf mode


def fit_2d(config: Vi2DConfig, target, rng):
    """Adapt a 2-D approximation to `target` per config.mode; returns the
    fitted parameters and a means trace for plotting."""
    config.validate()
    if config.mode == "iaf":
        return _fit_2d_iaf(config, target, rng)

    means = [dc.Parameter(np.zeros(2), f"comp{s}.mean") for s in range(config.S)]
    log_vars = [dc.Parameter(np.full(2, 2 * np.log(config.sigma_init)), f"comp{s}.log_var")
                for s in range(config.S)]
    params = means + log_vars
    optimizer = dc.Adam(params, lr=config.lr)
    trace, losses = [], []
    M, L = config.mc_draws, config.L

    for step in range(config.steps):
        try:
            with dc.Tape() as tape:
                comps = [DiagGaussian(m, lv) for m, lv in zip(means, log_vars)]
                zs = [q.rsample(rng.standard_normal((M, L, 2))) for q in comps]
                if config.mode == "mixture":
                    # one fused (S*M*L, S) cross evaluation for the shared
                    # denominator instead of S^2 separate density chains
                    z_flat = dc.reshape(dc.stack(zs, axis=0), (config.S * M * L, 2))
                    comp_lp = cross_gauss_log_prob(z_flat, dc.stack(means, axis=0),
                                                   dc.stack(log_vars, axis=0))
                    mix_lp = dc.logsumexp(comp_lp, axis=-1) - np.log(config.S)
                    log_w = dc.reshape(target.log_prob(z_flat) - mix_lp,
                                       (config.S, M, L))
                    per_draw = dc.logsumexp(log_w, axis=-1) - np.log(L)  # (S, M)
                    total = dc.mean(per_draw)  # (1/S) sum_s of the M-draw means
                else:
                    total = None
                    for q_s, z in zip(comps, zs):
                        log_w = target.log_prob(z) - q_s.log_prob(z)
                        term = dc.mean(dc.logsumexp(log_w, axis=-1) - np.log(L))
                        total = term if total is None else total + term
                    total = total * (1.0 / config.S)
                loss = -total
                if not np.isfinite(loss.data):
                    raise NumericalError("non-finite loss")
                tape.backward(loss)
        except NumericalError as exc:
            raise TrainingError(f"2-D fit diverged at step {step}: {exc}") from exc
        optimizer.step()
        losses.append(float(loss.data))
        if step % config.trace_every == 0 or step == config.steps - 1:
            trace.append((step, np.stack([m.data.copy() for m in means])))

    return Fit2DResult(config.mode, np.stack([m.data for m in means]),
                       np.stack([lv.data for lv in log_vars]), trace, losses)


def _fit_2d_iaf(config, target, rng):
    approx = FlowApprox(2, config.T, config.made_hidden, rng, config.sigma_init)
    optimizer = dc.Adam(approx.parameters(), lr=config.lr)
    trace, losses = [], []
    for step in range(config.steps):
        try:
            with dc.Tape() as tape:
                est = obj.iw_kl_objective(approx, target, config.L, rng,
                                          n_outer=config.mc_draws)
                if not np.isfinite(est.value):
                    raise NumericalError("non-finite loss")
                tape.backward(est.node)
        except NumericalError as exc:
            raise TrainingError(f"iaf fit diverged at step {step}: {exc}") from exc
        optimizer.step()
        losses.append(est.value)
        if step % config.trace_every == 0 or step == config.steps - 1:
            trace.append((step, approx.base_mean.data.copy()[None, :]))
    return Fit2DResult("iaf", approx.base_mean.data.copy()[None, :],
                       approx.base_log_var.data.copy()[None, :], trace, losses, approx=approx)


def mode_mass_split(means, modes):
    """Fraction of components nearest each target mode (uniform weights)."""
    means = np.atleast_2d(means)
    d2 = ((means[:, None, :] - np.asarray(modes)[None, :, :]) ** 2).sum(-1)
    nearest = d2.argmin(axis=1)
    return np.bincount(nearest, minlength=len(modes)) / len(means)


# --------------------------------------------------------------------- DM-PMC

@dataclass
class ParticleSystem:
    locations: np.ndarray   # (S, 2) proposal means
    scale: float = 0.3      # fixed isotropic proposal std
    K: int = 20             # samples per proposal


def init_particles(S, K, rng, box=4.0, scale=0.3):
    if S < 1:
        raise ContractError("need at least one proposal")
    return ParticleSystem(rng.uniform(-box, box, size=(S, 2)), scale=scale, K=K)


def dm_log_weights(samples, locations, scale, target):
    """Mixture-denominator log-weights for flattened samples (N, 2)."""
    lv = np.full_like(locations, 2 * np.log(scale))
    comp = cross_gauss_logpdf(samples, locations, lv)
    m = comp.max(axis=1, keepdims=True)
    log_mix = np.log(np.exp(comp - m).mean(axis=1)) + m[:, 0]
    return target.log_prob(samples).data - log_mix


def naive_is_log_weights(samples, locations, scale, target):
    """Per-proposal-denominator log-weights; samples shaped (S, K, 2)."""
    S, K, _ = samples.shape
    flat = samples.reshape(S * K, 2)
    lv = np.full_like(locations, 2 * np.log(scale))
    comp = cross_gauss_logpdf(flat, locations, lv).reshape(S, K, S)
    own = comp[np.arange(S), :, np.arange(S)]
    return (target.log_prob(flat).data.reshape(S, K) - own).reshape(-1)


@dataclass
class DmpmcResult:
    system: ParticleSystem
    mean_estimate: np.ndarray
    mean_se: np.ndarray
    z_estimate: float
    z_se: float
    ess_trace: list = field(default_factory=list)
    mean_trace: list = field(default_factory=list)
    z_trace: list = field(default_factory=list)
    location_trace: list = field(default_factory=list)


def dmpmc_iterate(ps: ParticleSystem, target, iterations, rng):
    """Sampling, mixture weighting, and global resampling; estimates are
    averaged over the post-burn-in half of the iterations."""
    if iterations < 1:
        raise ContractError("iterations must be >= 1")
    S, K = ps.locations.shape[0], ps.K
    result = DmpmcResult(ps, None, None, None, None)
    for _ in range(iterations):
        eps = rng.standard_normal((S, K, 2))
        samples = ps.locations[:, None, :] + ps.scale * eps
        flat = samples.reshape(S * K, 2)
        logw = dm_log_weights(flat, ps.locations, ps.scale, target)
        m = logw.max()
        if not np.isfinite(m):
            raise DegenerateWeightsError("all DM-PMC weights are zero")
        w = np.exp(logw - m)
        lse = np.log(w.sum()) + m
        norm_w = w / w.sum()
        result.mean_trace.append(norm_w @ flat)
        result.z_trace.append(float(np.exp(lse - np.log(S * K))))
        result.ess_trace.append(float(1.0 / (norm_w ** 2).sum()))
        result.location_trace.append(ps.locations.copy())
        idx = rng.choice(S * K, size=S, p=norm_w)
        ps.locations = flat[idx].copy()

    keep = max(1, iterations // 2)
    means = np.stack(result.mean_trace[-keep:])
    zs = np.asarray(result.z_trace[-keep:])
    result.mean_estimate = means.mean(axis=0)
    result.mean_se = means.std(axis=0, ddof=1) / np.sqrt(keep) if keep > 1 else np.full(2, np.inf)
    result.z_estimate = float(zs.mean())
    result.z_se = float(zs.std(ddof=1) / np.sqrt(keep)) if keep > 1 else float("inf")
    return result


def weight_variance_comparison(target, S, K, reps, rng, box=3.0, scale=0.3):
    """Per-replication variances of mean-one normalized weights under the
    mixture denominator vs. per-proposal denominators, on shared samples."""
    dm_vars, naive_vars = [], []
    for _ in range(reps):
        locations = rng.uniform(-box, box, size=(S, 2))
        eps = rng.standard_normal((S, K, 2))
        samples = locations[:, None, :] + scale * eps
        flat = samples.reshape(S * K, 2)
        logw_dm = dm_log_weights(flat, locations, scale, target)
        logw_nv = naive_is_log_weights(samples, locations, scale, target)
        for logw, out in ((logw_dm, dm_vars), (logw_nv, naive_vars)):
            w = np.exp(logw - logw.max())
            w = w / w.mean()
            out.append(float(w.var(ddof=1)))
    return np.asarray(dm_vars), np.asarray(naive_vars)


# ------------------------------------------------------------- VAE training

@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 100
    lr: float = 3e-4
    warmup_epochs: int = 100
    patience: int = 20
    improve_tol: float = 1e-6
    seed: int = 0
    eval_l: int = 1


@dataclass
class TrainReport:
    records: list               # dict per epoch: epoch, beta, train_objective,
                                # val_miselbo, wall_seconds
    best_epoch: int = -1
    best_val: float = -np.inf
    stopped_early: bool = False


def train_vae(model, train_images, val_images, config: TrainConfig, csv_path=None,
              trainable=None):
    """Warm-up mixture-bound training with early stopping on validation.

    Fully deterministic given config.seed: batching, binarization and
    sampling all derive from one generator, and the best parameter
    snapshot is restored before returning. `trainable` restricts the
    optimizer to a parameter subset (everything by default); frozen
    parameters still appear in validation and snapshots.
    """
    if config.batch_size < 1 or config.batch_size > max(len(train_images), 1):
        raise ContractError("batch_size must be in [1, n_train]")
    rng = np.random.default_rng(config.seed)
    warmup = obj.WarmupSchedule(config.warmup_epochs)
    params = model.parameters()
    optimizer = dc.Adam(params if trainable is None else list(trainable), lr=config.lr)
    report = TrainReport(records=[])
    if config.epochs == 0:
        _write_epoch_csv(csv_path, report.records)
        return report

    val_binary = binarize_dynamic(val_images, np.random.default_rng([config.seed, 971]))
    best_snapshot = None
    since_best = 0
    n = len(train_images)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        beta = warmup.beta(epoch)
        order = rng.permutation(n)
        batch_objs = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            xb = binarize_dynamic(train_images[idx], rng)
            try:
                with dc.Tape() as tape:
                    recon, klterm = obj.miselbo_beta_parts(model, xb, rng)
                    objective = obj.beta_objective(recon, klterm, beta)
                    if not np.isfinite(objective.data):
                        raise NumericalError("non-finite objective")
                    tape.backward(-objective)
                optimizer.step()
            except NumericalError as exc:
                raise TrainingError(f"training aborted at epoch {epoch}, "
                                    f"batch {lo // config.batch_size}: {exc}") from exc
            batch_objs.append(float(objective.data))

        val_rng = np.random.default_rng([config.seed, epoch, 613])
        val_est = obj.miselbo_bank(model, val_binary, config.eval_l, val_rng)
        report.records.append({
            "epoch": epoch,
            "beta": beta,
            "train_objective": float(np.mean(batch_objs)),
            "val_miselbo": val_est.value,
            "wall_seconds": time.perf_counter() - t0,
        })
        if val_est.value > report.best_val + config.improve_tol:
            report.best_val = val_est.value
            report.best_epoch = epoch
            best_snapshot = [p.data.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.stopped_early = True
                break

    if best_snapshot is not None:
        for p, snap in zip(params, best_snapshot):
            p.data[...] = snap
    _write_epoch_csv(csv_path, report.records)
    return report


def train_ensemble_vae(model_config, S, train_images, val_images, config: TrainConfig):
    """Ensemble of S independently learned approximations of one target.

    The target density is a single fixed generative model: the first
    encoder trains jointly with the decoder as an ordinary S=1 run, then
    each further encoder trains alone against the frozen decoder and
    prior under its own single-component objective. No cross-component
    density is ever evaluated (the defining contrast with joint mixture
    training). Returns the assembled S-component model.
    """
    from .models import GaussianEncoder, MixtureModel, ModelConfig, build_model

    if model_config.kind not in ("vanilla", "flow"):
        raise ConfigError("ensembles need an encoder-independent prior "
                          f"(kind {model_config.kind!r} ties the prior to the encoders)")
    if S < 1:
        raise ContractError("S must be >= 1")
    base_cfg = ModelConfig(model_config.kind, d_x=model_config.d_x, S=1,
                           d_z=model_config.d_z, hidden=model_config.hidden,
                           T=model_config.T, made_hidden=model_config.made_hidden)
    base = build_model(base_cfg, np.random.default_rng([config.seed, 17]))
    train_vae(base, train_images, val_images, config)

    encoders = [base.bank.encoders[0]]
    flows = None if base.flows is None else list(base.flows)
    for i in range(1, S):
        rng_i = np.random.default_rng([config.seed, 17, i])
        enc = GaussianEncoder(model_config.d_x, model_config.hidden, model_config.d_z,
                              rng_i, f"ens{i}")
        extra_flows = None
        trainable = enc.parameters()
        if flows is not None:
            from .flows import FlowStack

            extra = FlowStack(model_config.d_z, model_config.T, model_config.made_hidden,
                              rng_i, context_dim=model_config.d_x, name=f"ensflow{i}")
            extra_flows = [extra]
            trainable = trainable + extra.parameters()
        member = MixtureModel([enc], base.decoder, base.prior, flows=extra_flows)
        member_cfg = TrainConfig(**{**config.__dict__, "seed": config.seed + 7919 * i})
        train_vae(member, train_images, val_images, member_cfg, trainable=trainable)
        encoders.append(enc)
        if flows is not None:
            flows.append(extra_flows[0])
    return MixtureModel(encoders, base.decoder, base.prior, flows=flows)


def _write_epoch_csv(path, records):
    if path is None:
        return
    cols = ["epoch", "beta", "train_objective", "val_miselbo", "wall_seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for rec in records:
            writer.writerow({k: rec[k] for k in cols})
