"""Network forward/backward, optimizer and checkpoint tests.

The central check is the finite-difference gradient oracle: analytic
reverse-mode gradients must agree with central differences on every
parameter of a small random network.
"""

import numpy as np
import pytest

from densedesc import net as N
from densedesc.errors import NonFiniteGradientError, ShapeError


def small_arch(d=2):
    return N.NetArchitecture(layers=(
        N.Conv(3, 4, 2), N.Relu(), N.Conv(4, d, 1), N.Upsample(2)),
        descriptor_dim=d)


def fd_gradients(params, arch, image, cotangent, h=1e-4):
    """Central-difference gradient of sum(desc * cotangent) per parameter."""
    def loss():
        out, _ = N.forward(params, arch, image)
        return float((out * cotangent).sum())

    grads = []
    for t in params.tensors():
        g = np.zeros_like(t)
        flat, gflat = t.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2 * h)
        grads.append(g)
    return grads


class TestArchitecture:
    def test_default_shape_contract(self):
        arch = N.default_architecture(3)
        params = N.init_params(arch, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(0, 1, (24, 32, 3))
        out, _ = N.forward(params, arch, img)
        assert out.shape == (24, 32, 3)

    def test_full_resolution_for_variant_archs(self):
        variants = [
            small_arch(2),
            N.NetArchitecture(layers=(N.Conv(3, 8, 1), N.Relu(),
                                      N.Conv(8, 4, 1)), descriptor_dim=4),
            N.NetArchitecture(layers=(N.Conv(3, 8, 2), N.Relu(),
                                      N.Conv(8, 8, 2), N.Relu(),
                                      N.Conv(8, 2, 1), N.Upsample(4)),
                              descriptor_dim=2),
        ]
        rng = np.random.default_rng(2)
        for arch in variants:
            params = N.init_params(arch, rng)
            img = rng.uniform(0, 1, (16, 24, 3))
            out, _ = N.forward(params, arch, img)
            assert out.shape == (16, 24, arch.descriptor_dim)

    def test_rejects_uncancelled_stride(self):
        with pytest.raises(ValueError):
            N.NetArchitecture(layers=(N.Conv(3, 4, 2), N.Conv(4, 2, 1)),
                              descriptor_dim=2)

    def test_rejects_small_descriptor_dim(self):
        with pytest.raises(ValueError):
            N.NetArchitecture(layers=(N.Conv(3, 1, 1),), descriptor_dim=1)

    def test_rejects_channel_mismatch(self):
        with pytest.raises(ValueError):
            N.NetArchitecture(layers=(N.Conv(3, 4, 1), N.Conv(8, 2, 1)),
                              descriptor_dim=2)

    def test_rejects_bad_input(self):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            N.forward(params, arch, np.zeros((15, 16, 3)))  # 15 % 2 != 0
        with pytest.raises(ShapeError):
            N.forward(params, arch, np.zeros((16, 16)))

    def test_json_round_trip(self):
        arch = N.default_architecture(5)
        again = N.NetArchitecture.from_json(arch.to_json())
        assert again == arch


class TestForward:
    def test_zero_params_zero_output(self):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        for t in params.tensors():
            t[:] = 0.0
        out, _ = N.forward(params, arch, np.random.default_rng(1)
                           .uniform(0, 1, (12, 16, 3)))
        assert (out == 0).all()

    def test_identity_kernel_passthrough(self):
        """A single conv with centered identity kernels reproduces the input."""
        arch = N.NetArchitecture(layers=(N.Conv(3, 3, 1),), descriptor_dim=3)
        params = N.NetParams(
            weights=[np.zeros((3, 3, 3, 3))], biases=[np.zeros(3)])
        for c in range(3):
            params.weights[0][1, 1, c, c] = 1.0
        img = np.random.default_rng(3).uniform(0, 1, (10, 14, 3))
        out, _ = N.forward(params, arch, img)
        np.testing.assert_allclose(out, img, atol=1e-12)

    def test_finite_and_deterministic(self):
        arch = N.default_architecture(3)
        params = N.init_params(arch, np.random.default_rng(4))
        img = np.random.default_rng(5).uniform(0, 1, (72, 96, 3))
        out1, _ = N.forward(params, arch, img)
        out2, _ = N.forward(params, arch, img)
        assert np.isfinite(out1).all()
        np.testing.assert_array_equal(out1, out2)


class TestBackward:
    def test_zero_cotangent_zero_grads(self):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(0, 1, (12, 16, 3))
        out, cache = N.forward(params, arch, img)
        grads, gin = N.backward(params, arch, cache, np.zeros_like(out))
        assert all((g == 0).all() for g in grads.tensors())
        assert (gin == 0).all()

    def test_linearity(self):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(0, 1, (12, 16, 3))
        out, cache = N.forward(params, arch, img)
        g = np.random.default_rng(2).normal(size=out.shape)
        g1, _ = N.backward(params, arch, cache, g)
        g2, _ = N.backward(params, arch, cache, 2.0 * g)
        for a, b in zip(g1.tensors(), g2.tensors()):
            np.testing.assert_allclose(2.0 * a, b, rtol=1e-12)

    def test_finite_difference_oracle(self):
        """Analytic gradients match central differences on every parameter."""
        rng = np.random.default_rng(6)
        arch = small_arch()
        params = N.init_params(arch, rng)
        img = rng.uniform(0, 1, (12, 16, 3))
        out, cache = N.forward(params, arch, img)
        cot = rng.normal(size=out.shape)
        analytic, _ = N.backward(params, arch, cache, cot)
        numeric = fd_gradients(params, arch, img, cot)
        for a, n in zip(analytic.tensors(), numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            assert (np.abs(a - n) / denom).max() < 1e-3

    def test_input_gradient_finite_difference(self):
        rng = np.random.default_rng(7)
        arch = small_arch()
        params = N.init_params(arch, rng)
        img = rng.uniform(0, 1, (8, 12, 3))
        out, cache = N.forward(params, arch, img)
        cot = rng.normal(size=out.shape)
        _, gin = N.backward(params, arch, cache, cot)
        h = 1e-5
        for _ in range(20):
            v, u, c = (int(rng.integers(0, s)) for s in img.shape)
            orig = img[v, u, c]
            img[v, u, c] = orig + h
            lp = float((N.forward(params, arch, img)[0] * cot).sum())
            img[v, u, c] = orig - h
            lm = float((N.forward(params, arch, img)[0] * cot).sum())
            img[v, u, c] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - gin[v, u, c]) / max(abs(fd), abs(gin[v, u, c]), 1e-8) \
                < 1e-3


class TestAdam:
    def test_first_step_magnitude(self):
        """grad = 1 everywhere, t = 1: bias-corrected update is lr/(1+eps)."""
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        before = params.copy()
        state = N.AdamState.init_like(params, weight_decay=0.0)
        ones = N.NetParams([np.ones_like(w) for w in params.weights],
                           [np.ones_like(b) for b in params.biases])
        N.adam_step(state, params, ones)
        expected = 1e-4 / (1.0 + 1e-8)
        for p0, p1 in zip(before.tensors(), params.tensors()):
            np.testing.assert_allclose(p0 - p1, expected, rtol=1e-9)

    def test_zero_grads_no_decay_unchanged(self):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        before = params.copy()
        state = N.AdamState.init_like(params, weight_decay=0.0)
        zeros = N.NetParams([np.zeros_like(w) for w in params.weights],
                            [np.zeros_like(b) for b in params.biases])
        N.adam_step(state, params, zeros)
        for p0, p1 in zip(before.tensors(), params.tensors()):
            np.testing.assert_array_equal(p0, p1)

    def test_decoupled_decay_applied(self):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        before = params.copy()
        state = N.AdamState.init_like(params, weight_decay=0.1)
        zeros = N.NetParams([np.zeros_like(w) for w in params.weights],
                            [np.zeros_like(b) for b in params.biases])
        N.adam_step(state, params, zeros)
        for p0, p1 in zip(before.tensors(), params.tensors()):
            np.testing.assert_allclose(p1, p0 * (1.0 - 1e-4 * 0.1), rtol=1e-12)

    def test_nonfinite_gradient_rejected(self):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        state = N.AdamState.init_like(params)
        bad = N.NetParams([np.full_like(w, np.nan) for w in params.weights],
                          [np.zeros_like(b) for b in params.biases])
        with pytest.raises(NonFiniteGradientError):
            N.adam_step(state, params, bad)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(11)
            arch = small_arch()
            params = N.init_params(arch, rng)
            state = N.AdamState.init_like(params)
            img = rng.uniform(0, 1, (12, 16, 3))
            for _ in range(100):
                out, cache = N.forward(params, arch, img)
                grads, _ = N.backward(params, arch, cache, out - 0.5)
                N.adam_step(state, params, grads)
            return params

        p1, p2 = run(), run()
        for a, b in zip(p1.tensors(), p2.tensors()):
            np.testing.assert_array_equal(a, b)


class TestLrSchedule:
    def test_published_decay_points(self):
        assert N.lr_schedule(0) == 1e-4
        assert N.lr_schedule(249) == 1e-4
        assert N.lr_schedule(250) == pytest.approx(9e-5)
        assert N.lr_schedule(500) == pytest.approx(8.1e-5)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            N.lr_schedule(-1)


class TestInit:
    def test_seed_behavior(self):
        arch = small_arch()
        a = N.init_params(arch, np.random.default_rng(0))
        b = N.init_params(arch, np.random.default_rng(0))
        c = N.init_params(arch, np.random.default_rng(1))
        for ta, tb in zip(a.tensors(), b.tensors()):
            np.testing.assert_array_equal(ta, tb)
        assert any((ta != tc).any() for ta, tc in zip(a.tensors(), c.tensors()))

    def test_he_scaling(self):
        """3x3x16->16 kernels: empirical std within 20% of sqrt(2/144)."""
        arch = N.NetArchitecture(layers=(
            N.Conv(3, 16, 1), N.Conv(16, 16, 1), N.Conv(16, 2, 1)),
            descriptor_dim=2)
        samples = []
        for seed in range(5):
            params = N.init_params(arch, np.random.default_rng(seed))
            samples.append(params.weights[1].reshape(-1))  # the 16->16 layer
        pooled = np.concatenate(samples)
        assert pooled.size >= 10_000
        target = np.sqrt(2.0 / 144.0)
        assert abs(pooled.std() - target) / target < 0.2

    def test_biases_zero(self):
        params = N.init_params(small_arch(), np.random.default_rng(0))
        assert all((b == 0).all() for b in params.biases)


class TestCheckpoint:
    def test_round_trip_with_state(self, tmp_path):
        rng = np.random.default_rng(13)
        arch = small_arch()
        params = N.init_params(arch, rng)
        state = N.AdamState.init_like(params, weight_decay=0.5, base_lr=2e-4)
        img = rng.uniform(0, 1, (12, 16, 3))
        out, cache = N.forward(params, arch, img)
        grads, _ = N.backward(params, arch, cache, out)
        N.adam_step(state, params, grads)

        N.save_checkpoint(tmp_path / "ck", params, arch, state)
        p2, a2, s2 = N.load_checkpoint(tmp_path / "ck")
        assert a2 == arch
        for ta, tb in zip(params.tensors(), p2.tensors()):
            np.testing.assert_array_equal(ta, tb)
        assert s2.t == 1 and s2.weight_decay == 0.5 and s2.base_lr == 2e-4
        for ma, mb in zip(state.m, s2.m):
            np.testing.assert_array_equal(ma, mb)

    def test_inference_only_checkpoint(self, tmp_path):
        arch = small_arch()
        params = N.init_params(arch, np.random.default_rng(0))
        N.save_checkpoint(tmp_path / "ck", params, arch, state=None)
        p2, a2, s2 = N.load_checkpoint(tmp_path / "ck")
        assert s2 is None
        np.testing.assert_array_equal(p2.weights[0], params.weights[0])
