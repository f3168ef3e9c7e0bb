import numpy as np
import pytest

from mixvi import diffcore as dc
from mixvi.densities import DiagGaussian
from mixvi.flows import FlowStack, MadeNet


def perturbed_stack(dim, T, hidden=(10, 10), scale=0.3, seed=0, context_dim=0):
    rng = np.random.default_rng(seed)
    fs = FlowStack(dim, T, hidden, rng, context_dim=context_dim)
    for p in fs.parameters():
        p.data += rng.normal(0, scale, p.data.shape)
    return fs


class TestIdentityInit:
    def test_fresh_stack_is_identity_with_zero_logdet(self):
        rng = np.random.default_rng(1)
        fs = FlowStack(3, 4, (8, 8), rng)
        z = rng.normal(size=(7, 3))
        zT, ld = fs.forward(z)
        np.testing.assert_array_equal(zT.data, z)
        np.testing.assert_array_equal(ld.data, np.zeros(7))

    def test_empty_stack_is_identity(self):
        fs = FlowStack(2, 0, (4,), np.random.default_rng(0))
        z = np.array([[0.3, -1.2]])
        zT, ld = fs.forward(z)
        np.testing.assert_array_equal(zT.data, z)
        np.testing.assert_array_equal(ld.data, np.zeros(1))

    def test_identity_stack_log_q_equals_base(self):
        fs = FlowStack(2, 3, (6, 6), np.random.default_rng(3))
        base = DiagGaussian(np.array([0.3, -0.1]), np.array([0.2, 0.0]))
        z = np.random.default_rng(4).normal(size=(5, 2))
        np.testing.assert_array_equal(fs.log_q(z, base).data, base.log_prob(z).data)


class TestLogDet:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_numerical_jacobian(self, seed):
        fs = perturbed_stack(2, 3, seed=seed)
        z0 = np.random.default_rng(seed + 10).normal(size=2)

        def fwd(v):
            out, _ = fs.forward(v[None, :])
            return out.data[0]

        h = 1e-6
        J = np.zeros((2, 2))
        for j in range(2):
            zp, zm = z0.copy(), z0.copy()
            zp[j] += h
            zm[j] -= h
            J[:, j] = (fwd(zp) - fwd(zm)) / (2 * h)
        _, ld = fs.forward(z0[None, :])
        assert abs(ld.data[0] - np.log(abs(np.linalg.det(J)))) < 1e-5

    def test_one_dim_known_scale(self):
        # d=1: the transform is z' = mu + a*z with constant mu, a;
        # flowed log-density minus base log-density must be exactly -log a
        fs = FlowStack(1, 1, (4,), np.random.default_rng(0))
        made = fs.transforms[0]
        made.b_out.data[1] = 1.3  # pre-scale bias -> a = sigmoid(3.3)/sigmoid(2)
        a = (1 / (1 + np.exp(-3.3))) / (1 / (1 + np.exp(-2.0)))
        base = DiagGaussian(np.zeros(1), np.zeros(1))
        z = np.array([[0.4]])
        got = fs.log_q(z, base).data[0] - base.log_prob(z).data[0]
        assert got == pytest.approx(-np.log(a), rel=1e-12)


class TestInverse:
    @pytest.mark.parametrize("dim,T", [(2, 3), (3, 2), (1, 2)])
    def test_round_trips(self, dim, T):
        fs = perturbed_stack(dim, T, seed=dim * 10 + T)
        z = np.random.default_rng(99).normal(size=(100, dim))
        zT, _ = fs.forward(z)
        assert np.abs(fs.inverse(zT.data) - z).max() < 1e-8
        zF, _ = fs.forward(fs.inverse(z))
        assert np.abs(zF.data - z).max() < 1e-8

    def test_round_trip_with_context(self):
        fs = perturbed_stack(2, 2, seed=5, context_dim=3)
        rng = np.random.default_rng(6)
        z = rng.normal(size=(20, 2))
        ctx = rng.normal(size=(20, 3))
        zT, _ = fs.forward(z, context=ctx)
        assert np.abs(fs.inverse(zT.data, context=ctx) - z).max() < 1e-8


class TestMadeMasks:
    @pytest.mark.parametrize("dim", [1, 2, 4])
    @pytest.mark.parametrize("reverse", [False, True])
    def test_autoregressive_sparsity_exact(self, dim, reverse):
        rng = np.random.default_rng(17)
        made = MadeNet(dim, (12, 12), rng, reverse_order=reverse)
        for p in made.parameters():
            p.data += rng.normal(0, 0.5, p.data.shape)
        base_s, base_p = made.forward(np.zeros((1, dim)))
        deg = made.in_degrees
        for j in range(dim):
            x = np.zeros((1, dim))
            x[0, j] = 0.8
            s2, p2 = made.forward(x)
            for out in (np.abs(s2.data - base_s.data), np.abs(p2.data - base_p.data)):
                for i in range(dim):
                    if deg[i] <= deg[j]:
                        assert out[0, i] == 0.0, (i, j)

    def test_context_reaches_all_outputs(self):
        rng = np.random.default_rng(8)
        made = MadeNet(3, (8,), rng, context_dim=2)
        for p in made.parameters():
            p.data += rng.normal(0, 0.5, p.data.shape)
        s1, _ = made.forward(np.zeros((1, 3)), context=np.zeros((1, 2)))
        s2, _ = made.forward(np.zeros((1, 3)), context=np.ones((1, 2)))
        assert (np.abs(s2.data - s1.data) > 0).all()


class TestFlowedDensity:
    def test_normalization_preserved(self):
        # MC integral of exp(flowed log q) over a wide 2-D grid stays ~1
        for seed in (0, 1):
            fs = perturbed_stack(2, 2, scale=0.2, seed=seed)
            base = DiagGaussian(np.zeros(2), np.zeros(2))
            xs, ys = np.meshgrid(np.linspace(-6, 6, 241), np.linspace(-6, 6, 241))
            grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
            # density of zT at grid points: pull back through the inverse
            z0 = fs.inverse(grid)
            lq = fs.log_q(z0, base).data
            step = xs[0, 1] - xs[0, 0]
            total = np.exp(lq).sum() * step * step
            assert total == pytest.approx(1.0, abs=2e-2)

    def test_gradients_flow_to_all_parameters(self):
        fs = perturbed_stack(2, 2, seed=3)
        base = DiagGaussian(np.zeros(2), np.zeros(2))
        with dc.Tape() as tape:
            lq = fs.log_q(np.random.default_rng(0).normal(size=(4, 2)), base)
            grads = tape.gradient(dc.tsum(lq), fs.parameters())
        # every weight matrix on the scale path gets gradient signal
        got_any = [np.abs(g).sum() > 0 for g in grads]
        assert any(got_any)
