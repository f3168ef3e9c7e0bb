import os

import numpy as np
import pytest

from mixvi import diffcore as dc
from mixvi import objectives as obj
from mixvi.densities import DiagGaussian
from mixvi.errors import CheckpointError, ConfigError, ContractError
from mixvi.models import (EncoderBank, GaussianEncoder, ModelConfig, PseudoInputs,
                          VampPrior, build_model, count_parameters, load_checkpoint,
                          save_checkpoint)


def vanilla(S=1, d_x=10, d_z=3, hidden=(8,), seed=0):
    return build_model(ModelConfig("vanilla", d_x=d_x, S=S, d_z=d_z, hidden=hidden),
                       np.random.default_rng(seed))


class TestEncode:
    def test_zero_initialized_encoder_outputs_biases(self):
        enc = GaussianEncoder(5, (4,), 2, np.random.default_rng(0), "enc")
        for p in enc.parameters():
            p.data[...] = 0.0
        q = enc.posterior(np.random.default_rng(1).random((3, 5)))
        np.testing.assert_array_equal(q.mean.data, np.zeros((3, 2)))
        np.testing.assert_array_equal(q.log_var.data, np.zeros((3, 2)))

    def test_deterministic(self):
        model = vanilla(S=2)
        x = np.random.default_rng(2).random((4, 10))
        a = model.bank.encode(1, x)
        b = model.bank.encode(1, x)
        assert (a.mean.data == b.mean.data).all()
        assert (a.log_var.data == b.log_var.data).all()

    def test_distinct_components_differ_after_seeded_init(self):
        model = vanilla(S=2)
        x = np.random.default_rng(3).random((4, 10))
        a = model.bank.encode(0, x)
        b = model.bank.encode(1, x)
        assert np.abs(a.mean.data - b.mean.data).max() > 1e-6

    def test_index_out_of_range(self):
        model = vanilla(S=2)
        with pytest.raises(ContractError):
            model.bank.encode(2, np.zeros((1, 10)))

    def test_encode_is_pure(self):
        model = vanilla(S=1)
        x = np.random.default_rng(4).random((2, 10))
        before = [p.data.copy() for p in model.parameters()]
        model.bank.encode(0, x)
        for p, b in zip(model.parameters(), before):
            assert (p.data == b).all()


class TestVampPrior:
    def test_k1_s1_equals_single_posterior(self):
        rng = np.random.default_rng(5)
        enc = GaussianEncoder(6, (4,), 2, rng, "enc0")
        vp = VampPrior(PseudoInputs(1, 6, rng), [enc])
        z = rng.normal(size=(3, 2))
        q = enc.posterior(vp.pseudo.inputs())  # (1, d) parameter rows
        single = DiagGaussian(q.mean.data[0], q.log_var.data[0])
        got = vp.log_prob(dc.Tensor(z))
        np.testing.assert_allclose(got.data, single.log_prob(z).data, rtol=1e-12)

    def test_identical_encoders_equal_s1_value(self):
        rng = np.random.default_rng(6)
        enc1 = GaussianEncoder(6, (4,), 2, rng, "enc0")
        enc2 = GaussianEncoder(6, (4,), 2, rng, "enc1")
        for p1, p2 in zip(enc1.parameters(), enc2.parameters()):
            p2.data[...] = p1.data
        pseudo = PseudoInputs(3, 6, rng)
        z = rng.normal(size=(4, 2))
        a = VampPrior(pseudo, [enc1]).log_prob(dc.Tensor(z)).data
        b = VampPrior(pseudo, [enc1, enc2]).log_prob(dc.Tensor(z)).data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_two_pseudo_inputs_hand_evaluation(self):
        # synthetic encoder: N(0,1) for u1, N(5,1) for u2 (1-D latent)
        class SyntheticEncoder:
            def posterior(self, u):
                means = dc.Tensor(np.array([[0.0], [5.0]]))
                return DiagGaussian(means, dc.Tensor(np.zeros((2, 1))))

            def parameters(self):
                return []

        rng = np.random.default_rng(7)
        vp = VampPrior(PseudoInputs(2, 4, rng), [SyntheticEncoder()])
        z = np.zeros((1, 1))
        got = vp.log_prob(dc.Tensor(z)).data[0]

        def pdf(x, mu):
            return np.exp(-0.5 * (x - mu) ** 2) / np.sqrt(2 * np.pi)

        assert got == pytest.approx(np.log(0.5 * pdf(0, 0) + 0.5 * pdf(0, 5)), rel=1e-12)

    def test_zero_pseudo_inputs_rejected(self):
        with pytest.raises(ContractError):
            PseudoInputs(0, 4, np.random.default_rng(0))


class TestParameterCounts:
    def test_appendix_mlp_counts_exact(self):
        for S, expected in ((1, 349200), (2, 698400), (3, 1047600)):
            model = build_model(ModelConfig("vanilla", d_x=784, S=S, d_z=40,
                                            hidden=(300, 300)), np.random.default_rng(0))
            assert count_parameters(model)["encoder_params"] == expected

    def test_counts_scale_linearly_in_s(self):
        c1 = count_parameters(vanilla(S=1))
        c3 = count_parameters(vanilla(S=3))
        assert c3["encoder_params"] == 3 * c1["encoder_params"]
        assert c3["encoder_params_with_bias"] == 3 * c1["encoder_params_with_bias"]

    def test_decoder_count_constant_in_s(self):
        c1 = count_parameters(vanilla(S=1))
        c4 = count_parameters(vanilla(S=4))
        dec1 = c1["total_params"] - c1["encoder_params"]
        dec4 = c4["total_params"] - c4["encoder_params"]
        assert dec1 == dec4
        assert c4["total_params"] > c1["total_params"]


class TestSharedGenerativeSide:
    def test_single_decoder_prior_identity_across_components(self):
        cfg = ModelConfig("composite", d_x=8, S=3, d_z=2, d_z2=2, hidden=(6,),
                          T=1, K=2, made_hidden=(4,), prior_hidden=(4,))
        model = build_model(cfg, np.random.default_rng(8))
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))
        dec_params = {id(p) for p in model.decoder.parameters()}
        prior1_params = {id(p) for p in model.prior1.parameters()}
        pseudo_params = {id(p) for p in model.prior2.pseudo.parameters()}
        # exactly one of each shared piece, regardless of S
        assert len(dec_params) == len(model.decoder.parameters())
        assert len(prior1_params) == len(model.prior1.parameters())
        assert len(pseudo_params) == 1

    def test_composite_full_scale_config_buildable(self):
        cfg = ModelConfig("composite", d_x=784, S=4, d_z=40, d_z2=40,
                          hidden=(300, 300), T=2, K=500, made_hidden=(320, 320))
        model = build_model(cfg, np.random.default_rng(9))
        assert model.S == 4
        assert len(model.flows) == 4

    def test_degenerate_composite_buildable(self):
        cfg = ModelConfig("composite", d_x=8, S=1, d_z=2, d_z2=2, hidden=(6,),
                          T=0, K=1, made_hidden=(4,))
        model = build_model(cfg, np.random.default_rng(10))
        assert model.flows is None


class TestConfigValidation:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ModelConfig("pixelcnn", d_x=8)

    def test_per_component_pseudo_count_rejected(self):
        with pytest.raises(ConfigError, match="shared"):
            ModelConfig("composite", d_x=8, S=2, K=[2, 3])

    def test_vamp_needs_pseudo_inputs(self):
        with pytest.raises(ConfigError):
            ModelConfig("vamp", d_x=8, K=0)

    def test_vanilla_rejects_flows(self):
        with pytest.raises(ConfigError):
            ModelConfig("vanilla", d_x=8, T=2)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        model = vanilla(S=2, seed=11)
        path = os.path.join(tmp_path, "model.mixvi")
        save_checkpoint(path, model)
        clone = vanilla(S=2, seed=99)  # different init
        load_checkpoint(path, clone)
        for p, q in zip(model.parameters(), clone.parameters()):
            assert (p.data == q.data).all()

    def test_magic_header(self, tmp_path):
        model = vanilla()
        path = os.path.join(tmp_path, "model.mixvi")
        save_checkpoint(path, model)
        with open(path, "rb") as fh:
            assert fh.read(6) == b"MIXVI1"

    def test_mismatched_model_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "model.mixvi")
        save_checkpoint(path, vanilla(S=1))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, vanilla(S=2))

    def test_bad_magic_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "junk.mixvi")
        with open(path, "wb") as fh:
            fh.write(b"NOTMIX" + b"\x00" * 20)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, vanilla())

    def test_loaded_model_reproduces_outputs(self, tmp_path):
        model = vanilla(S=2, seed=13)
        x = (np.random.default_rng(1).random((5, 10)) < 0.5).astype(float)
        est = obj.miselbo_bank(model, x, 1, np.random.default_rng(2))
        path = os.path.join(tmp_path, "model.mixvi")
        save_checkpoint(path, model)
        clone = vanilla(S=2, seed=77)
        load_checkpoint(path, clone)
        est2 = obj.miselbo_bank(clone, x, 1, np.random.default_rng(2))
        assert est.value == est2.value


def test_encoder_bank_requires_component():
    with pytest.raises(ContractError):
        EncoderBank([])
