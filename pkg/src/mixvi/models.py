"""Assemblable model components for the mixture cookbook.

One decoder, one prior (and one pseudo-input generator when in use), and
one level-1 conditional prior exist per model no matter how many mixture
components S there are; only the encoder side is replicated. Models
implement a small protocol the objectives drive:

    state = model.begin(x)            # cache per-batch encoder posteriors
    lat   = model.sample(state, s, rng)
    ll, lp = model.log_joint(state, s, lat)
    lq    = model.log_q(state, j, lat)   # component j's density of the
                                         # component-s sample (base-space
                                         # sample for flow models)

Checkpoints are flat little-endian binary files: magic "MIXVI1", then for
each named parameter its name, shape and raw float64 payload.
"""

import struct

import numpy as np

from . import diffcore as dc
from .densities import DiagGaussian, bernoulli_log_prob, cross_gauss_log_prob
from .errors import CheckpointError, ConfigError, ContractError
from .flows import FlowStack


class Mlp:
    """Fully connected tanh net; the final layer stays linear."""

    def __init__(self, dims, rng, name):
        self.name = name
        self.weights = []
        self.biases = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            self.weights.append(dc.Parameter(
                rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)), f"{name}.W{i}"))
            self.biases.append(dc.Parameter(np.zeros(n_out), f"{name}.b{i}", bias=True))

    def forward(self, x):
        h = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = dc.matmul(h, W) + b
            if i != last:
                h = dc.tanh(h)
        return h

    def parameters(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


class GaussianEncoder:
    """x -> DiagGaussian over a latent space."""

    def __init__(self, in_dim, hidden, latent_dim, rng, name):
        self.latent_dim = latent_dim
        self.mlp = Mlp([in_dim, *hidden, 2 * latent_dim], rng, name)

    def posterior(self, x):
        out = self.mlp.forward(x)
        return DiagGaussian(out[..., : self.latent_dim], out[..., self.latent_dim:])

    def parameters(self):
        return self.mlp.parameters()


class BernoulliDecoder:
    """z -> pixel logits; shared across all mixture components."""

    def __init__(self, latent_dim, hidden, d_x, rng, name="dec"):
        self.mlp = Mlp([latent_dim, *hidden, d_x], rng, name)

    def logits(self, z):
        return self.mlp.forward(z)

    def log_prob(self, x, z):
        return bernoulli_log_prob(x, self.logits(z))

    def parameters(self):
        return self.mlp.parameters()


class StandardNormalPrior:
    def __init__(self, dim):
        self.dim = dim

    def log_prob(self, z):
        return DiagGaussian(np.zeros(self.dim), np.zeros(self.dim)).log_prob(z)

    def parameters(self):
        return []


class PseudoInputs:
    """K learnable pseudo-inputs: one-hot codes through a linear map and a
    sigmoid, so generated points live in data space (0, 1)."""

    def __init__(self, K, d_x, rng, name="pseudo"):
        if K < 1:
            raise ContractError("need at least one pseudo-input")
        self.K = K
        self.codes = dc.Parameter(rng.normal(0.0, 0.05, (K, d_x)), f"{name}.codes")

    def inputs(self):
        return dc.sigmoid(self.codes)

    def parameters(self):
        return [self.codes]


class VampPrior:
    """Aggregated-posterior prior: the (K*S)-component uniform mixture of
    every encoder's posterior at every pseudo-input."""

    def __init__(self, pseudo: PseudoInputs, encoders):
        self.pseudo = pseudo
        self.encoders = list(encoders)

    def log_prob(self, z):
        u = self.pseudo.inputs()
        means, lvs = [], []
        for enc in self.encoders:
            q = enc.posterior(u)
            means.append(q.mean)
            lvs.append(q.log_var)
        means = dc.concat(means, axis=0) if len(means) > 1 else means[0]
        lvs = dc.concat(lvs, axis=0) if len(lvs) > 1 else lvs[0]
        comp = cross_gauss_log_prob(z, means, lvs)
        n_comp = self.pseudo.K * len(self.encoders)
        return dc.logsumexp(comp, axis=-1) - np.log(n_comp)

    def parameters(self):
        # encoder parameters are owned by the bank, not double-counted here
        return self.pseudo.parameters()


class ConditionalGaussianPrior:
    """Learnable p(z1 | z2) as a Gaussian whose parameters come from a net."""

    def __init__(self, d_z2, hidden, d_z1, rng, name="prior1"):
        self.d_z1 = d_z1
        self.mlp = Mlp([d_z2, *hidden, 2 * d_z1], rng, name)

    def at(self, z2):
        out = self.mlp.forward(z2)
        return DiagGaussian(out[..., : self.d_z1], out[..., self.d_z1:])

    def parameters(self):
        return self.mlp.parameters()


class EncoderBank:
    """S independently parameterized encoders over one shared target."""

    def __init__(self, encoders):
        if len(encoders) < 1:
            raise ContractError("bank needs at least one encoder")
        self.encoders = list(encoders)

    @property
    def size(self):
        return len(self.encoders)

    def encode(self, s, x):
        if not 0 <= s < self.size:
            raise ContractError(f"component index {s} out of range [0, {self.size})")
        return self.encoders[s].posterior(x)


class MixtureModel:
    """Single-latent-level model: S encoders, optional per-component flow
    on the latent (conditioned on x), a shared prior, a shared decoder."""

    def __init__(self, encoders, decoder, prior, flows=None):
        self.bank = EncoderBank(encoders)
        self.decoder = decoder
        self.prior = prior
        self.flows = flows
        if flows is not None and len(flows) != self.bank.size:
            raise ConfigError("need one flow stack per component")

    @property
    def S(self):
        return self.bank.size

    @property
    def latent_dim(self):
        return self.bank.encoders[0].latent_dim

    def begin(self, x):
        x = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
        return {"x": x, "posteriors": [e.posterior(x) for e in self.bank.encoders]}

    def sample(self, state, s, rng):
        q = state["posteriors"][s]
        eps = rng.standard_normal(q.mean.data.shape)
        z0 = q.rsample(eps)
        if self.flows is None:
            return {"z0": z0, "z": z0}
        zT, _ = self.flows[s].forward(z0, context=state["x"])
        return {"z0": z0, "z": zT}

    def log_joint(self, state, s, lat):
        ll = self.decoder.log_prob(state["x"], lat["z"])
        lp = self.prior.log_prob(lat["z"])
        return ll, lp

    def log_q(self, state, j, lat):
        base = state["posteriors"][j].log_prob(lat["z0"])
        if self.flows is None:
            return base
        return base - self.flows[j].log_det_from(lat["z0"], context=state["x"])

    def parameters(self):
        out = []
        for e in self.bank.encoders:
            out += e.parameters()
        if self.flows is not None:
            for f in self.flows:
                out += f.parameters()
        out += self.prior.parameters()
        out += self.decoder.parameters()
        return out


class TwoLevelModel:
    """Two-level hierarchy: q(z2|x) then q(z1|z2,x) per component, optional
    flows on z1 (conditioned on z2 and x), shared learnable p(z1|z2),
    shared p(z2) (standard normal or a pseudo-input prior), shared decoder
    on (z1, z2)."""

    def __init__(self, enc2, enc1, decoder, prior1, prior2, flows=None):
        if len(enc2) != len(enc1):
            raise ConfigError("level-1 and level-2 encoder counts differ")
        self.enc2 = list(enc2)
        self.enc1 = list(enc1)
        self.decoder = decoder
        self.prior1 = prior1
        self.prior2 = prior2
        self.flows = flows
        if flows is not None and len(flows) != len(enc1):
            raise ConfigError("need one flow stack per component")

    @property
    def S(self):
        return len(self.enc2)

    def begin(self, x):
        x = x if isinstance(x, dc.Tensor) else dc.Tensor(x)
        return {"x": x, "posteriors2": [e.posterior(x) for e in self.enc2]}

    def sample(self, state, s, rng):
        q2 = state["posteriors2"][s]
        z2 = q2.rsample(rng.standard_normal(q2.mean.data.shape))
        h = dc.concat([z2, state["x"]], axis=-1)
        q1 = self.enc1[s].posterior(h)
        z1_0 = q1.rsample(rng.standard_normal(q1.mean.data.shape))
        if self.flows is None:
            z1 = z1_0
        else:
            z1, _ = self.flows[s].forward(z1_0, context=h)
        return {"z2": z2, "h": h, "z1_0": z1_0, "z1": z1}

    def log_joint(self, state, s, lat):
        ll = self.decoder.log_prob(state["x"], dc.concat([lat["z1"], lat["z2"]], axis=-1))
        lp = self.prior1.at(lat["z2"]).log_prob(lat["z1"]) + self.prior2.log_prob(lat["z2"])
        return ll, lp

    def log_q(self, state, j, lat):
        lq2 = state["posteriors2"][j].log_prob(lat["z2"])
        q1j = self.enc1[j].posterior(lat["h"])
        lq1 = q1j.log_prob(lat["z1_0"])
        if self.flows is not None:
            lq1 = lq1 - self.flows[j].log_det_from(lat["z1_0"], context=lat["h"])
        return lq2 + lq1

    def parameters(self):
        out = []
        for e in self.enc2 + self.enc1:
            out += e.parameters()
        if self.flows is not None:
            for f in self.flows:
                out += f.parameters()
        out += self.prior1.parameters()
        out += self.prior2.parameters()
        out += self.decoder.parameters()
        return out


MODEL_KINDS = ("vanilla", "flow", "vamp", "hier", "composite")


class ModelConfig:
    """Validated build recipe for every cookbook configuration."""

    def __init__(self, kind, d_x, S=1, d_z=40, d_z2=40, hidden=(300, 300),
                 T=0, K=0, made_hidden=(64, 64), prior_hidden=(64,)):
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}")
        if isinstance(K, (list, tuple)):
            raise ConfigError("K must be a single shared pseudo-input count; "
                              "per-component priors would give components different targets")
        if min(d_x, d_z, S) < 1 or (kind in ("hier", "composite") and d_z2 < 1):
            raise ConfigError("dimensions and S must be positive")
        if kind == "flow" and T < 1:
            raise ConfigError("flow model needs T >= 1")
        if kind == "vamp" and K < 1:
            raise ConfigError("vamp model needs K >= 1")
        if kind == "composite" and K < 1:
            raise ConfigError("composite model needs a shared pseudo-input prior (K >= 1)")
        if kind in ("vanilla", "hier") and (T or K):
            raise ConfigError(f"{kind} model takes no flows or pseudo-inputs")
        self.kind = kind
        self.d_x = d_x
        self.S = S
        self.d_z = d_z
        self.d_z2 = d_z2
        self.hidden = tuple(hidden)
        self.T = T
        self.K = K
        self.made_hidden = tuple(made_hidden)
        self.prior_hidden = tuple(prior_hidden)


def build_model(config: ModelConfig, rng):
    c = config
    if c.kind in ("vanilla", "flow", "vamp"):
        encoders = [GaussianEncoder(c.d_x, c.hidden, c.d_z, rng, f"enc{s}")
                    for s in range(c.S)]
        decoder = BernoulliDecoder(c.d_z, tuple(reversed(c.hidden)), c.d_x, rng)
        flows = None
        if c.kind == "flow":
            flows = [FlowStack(c.d_z, c.T, c.made_hidden, rng, context_dim=c.d_x,
                               name=f"flow{s}") for s in range(c.S)]
        if c.kind == "vamp":
            prior = VampPrior(PseudoInputs(c.K, c.d_x, rng), encoders)
        else:
            prior = StandardNormalPrior(c.d_z)
        return MixtureModel(encoders, decoder, prior, flows=flows)

    enc2 = [GaussianEncoder(c.d_x, c.hidden, c.d_z2, rng, f"enc{s}.l2") for s in range(c.S)]
    enc1 = [GaussianEncoder(c.d_z2 + c.d_x, c.hidden, c.d_z, rng, f"enc{s}.l1")
            for s in range(c.S)]
    decoder = BernoulliDecoder(c.d_z + c.d_z2, tuple(reversed(c.hidden)), c.d_x, rng)
    prior1 = ConditionalGaussianPrior(c.d_z2, c.prior_hidden, c.d_z, rng)
    flows = None
    if c.kind == "composite":
        if c.T > 0:
            flows = [FlowStack(c.d_z, c.T, c.made_hidden, rng, context_dim=c.d_z2 + c.d_x,
                               name=f"flow{s}") for s in range(c.S)]
        prior2 = VampPrior(PseudoInputs(c.K, c.d_x, rng), enc2)
    else:
        prior2 = StandardNormalPrior(c.d_z2)
    return TwoLevelModel(enc2, enc1, decoder, prior1, prior2, flows=flows)


def count_parameters(model):
    """Scalar parameter counts, encoder side vs. total.

    `encoder_params` / `total_params` count weight matrices only, the
    convention used for parameter-matched encoder-size comparisons; the
    `*_with_bias` fields add bias vectors back in. The encoder side is
    everything that amortizes the variational side (encoders and flows);
    decoder, priors and pseudo-inputs are the generative side.
    """
    enc_w = enc_all = tot_w = tot_all = 0
    for p in model.parameters():
        n = p.data.size
        is_enc = p.name.startswith(("enc", "flow"))
        is_bias = getattr(p, "bias", False)
        tot_all += n
        if not is_bias:
            tot_w += n
        if is_enc:
            enc_all += n
            if not is_bias:
                enc_w += n
    return {
        "encoder_params": enc_w,
        "total_params": tot_w,
        "encoder_params_with_bias": enc_all,
        "total_params_with_bias": tot_all,
    }


CHECKPOINT_MAGIC = b"MIXVI1"


def save_checkpoint(path, model):
    params = model.parameters()
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names; cannot serialize")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            raw = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(p.data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path, model):
    """Load named parameters into `model`; any name or shape mismatch is a
    checkpoint error."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    off = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    loaded = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off: off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        loaded[name] = arr
    if off != len(blob):
        raise CheckpointError("trailing bytes in checkpoint")
    params = model.parameters()
    missing = [p.name for p in params if p.name not in loaded]
    extra = set(loaded) - {p.name for p in params}
    if missing or extra:
        raise CheckpointError(f"checkpoint/model mismatch: missing={missing[:3]} extra={sorted(extra)[:3]}")
    for p in params:
        if loaded[p.name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {p.name}")
        p.data[...] = loaded[p.name]
