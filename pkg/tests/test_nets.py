import numpy as np
import pytest

from uae import autodiff as ad
from uae.errors import BadMagic, IncompatibleCheckpoint, ShapeMismatch, TruncatedFile
from uae.gaussian_core import PosteriorKind
from uae.nets import (
    AdamState,
    DenseNet,
    Encoder,
    Layer,
    SpectralState,
    adam_step,
    checkpoint_bytes,
    decoder_input_gradient,
    encode,
    forward,
    load_checkpoint,
    make_models,
    save_checkpoint,
    spectral_normalize,
)
from helpers import directional_check


def _net(weights, biases, acts):
    return DenseNet([Layer(ad.Node(np.array(w, float)), ad.Node(np.array(b, float)), a)
                     for w, b, a in zip(weights, biases, acts)])


class TestForward:
    def test_identity_layer(self):
        net = _net([np.eye(3)], [np.zeros(3)], ["identity"])
        np.testing.assert_array_equal(forward(net, np.array([1.0, -2.0, 3.0])).value, [1.0, -2.0, 3.0])

    def test_zero_weights_give_bias(self):
        net = _net([np.zeros((2, 3))], [[0.5, -1.0, 2.0]], ["identity"])
        np.testing.assert_array_equal(forward(net, np.array([7.0, 9.0])).value, [0.5, -1.0, 2.0])

    def test_two_layer_by_hand(self):
        net = _net([[[1.0, -1.0], [2.0, 0.5]], [[1.0], [3.0]]], [[0.0, 0.5], [0.25]], ["leaky_relu", "identity"])
        x = np.array([1.0, 1.0])
        h = np.array([3.0, -0.5 + 0.5])  # [1+2, -1+0.5+0.5]
        h = np.where(h > 0, h, 0.01 * h)
        np.testing.assert_allclose(forward(net, x).value, [h @ [1.0, 3.0] + 0.25])

    def test_batched_matches_rows(self, rng):
        net = DenseNet.build([3, 5, 2], ["leaky_relu", "tanh"], rng)
        x = rng.normal(size=(4, 3))
        out = forward(net, x).value
        for i in range(4):
            np.testing.assert_allclose(out[i], forward(net, x[i]).value, rtol=1e-15)

    def test_shape_mismatch(self, rng):
        net = DenseNet.build([3, 2], ["identity"], rng)
        with pytest.raises(ShapeMismatch):
            forward(net, np.ones(4))

    def test_dims_must_chain(self):
        with pytest.raises(ShapeMismatch):
            _net([np.ones((2, 3)), np.ones((2, 1))], [np.zeros(3), np.zeros(1)], ["identity", "identity"])

    def test_parameter_count(self, rng):
        assert DenseNet.build([3, 5, 2], ["leaky_relu", "tanh"], rng).parameter_count == 3 * 5 + 5 + 5 * 2 + 2

    def test_random_net_gradients(self, rng):
        net = DenseNet.build([3, 6, 2], ["leaky_relu", "tanh"], rng)
        x = ad.Node(rng.uniform(-2, 2, (5, 3)))
        params = net.parameters() + [x]
        assert directional_check(lambda: ad.sum_(ad.square(forward(net, x))), params, rng) < 1e-4


class TestDecoderInputGradient:
    def test_linear_decoder(self, rng):
        W = rng.normal(size=(3, 4))
        net = _net([W], [np.zeros(4)], ["identity"])
        out = decoder_input_gradient(net, rng.normal(size=3))
        assert out.value == pytest.approx(np.sum(W ** 2), rel=1e-9)

    def test_constant_decoder(self, rng):
        net = _net([np.zeros((2, 3)), rng.normal(size=(3, 2))], [np.ones(3), np.zeros(2)], ["tanh", "tanh"])
        assert decoder_input_gradient(net, np.array([0.3, -1.0])).value == 0.0

    def test_scalar_decoder(self):
        w = np.array([[2.0], [-3.0]])
        net = _net([w], [[0.0]], ["identity"])
        assert decoder_input_gradient(net, np.array([1.0, 1.0])).value == pytest.approx(13.0)

    def test_matches_finite_difference_jacobian(self, rng):
        net = DenseNet.build([3, 8, 8, 2], ["leaky_relu", "leaky_relu", "tanh"], rng)
        z = rng.normal(size=3)
        J = np.zeros((2, 3))
        for i in range(3):
            e = np.zeros(3)
            e[i] = 1e-6
            J[:, i] = (forward(net, z + e).value - forward(net, z - e).value) / 2e-6
        assert decoder_input_gradient(net, z).value == pytest.approx(np.sum(J ** 2), rel=1e-6)

    def test_batched(self, rng):
        net = DenseNet.build([2, 4, 3], ["leaky_relu", "tanh"], rng)
        z = rng.normal(size=(5, 2))
        out = decoder_input_gradient(net, z).value
        for i in range(5):
            assert out[i] == pytest.approx(decoder_input_gradient(net, z[i]).value, rel=1e-14)

    def test_differentiable(self, rng):
        net = DenseNet.build([2, 6, 3], ["leaky_relu", "tanh"], rng)
        z = ad.Node(rng.normal(size=(4, 2)))
        fn = lambda: ad.sum_(decoder_input_gradient(net, z))  # noqa: E731
        assert directional_check(fn, net.parameters() + [z], rng) < 1e-4

    def test_shape_mismatch(self, rng):
        net = DenseNet.build([2, 3], ["identity"], rng)
        with pytest.raises(ShapeMismatch):
            decoder_input_gradient(net, np.ones(3))


class TestSpectralNormalize:
    def test_diagonal(self):
        np.testing.assert_allclose(spectral_normalize(np.diag([2.0, 1.0])), np.diag([1.0, 0.5]), atol=1e-3)

    def test_orthogonal_unchanged(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        np.testing.assert_allclose(spectral_normalize(q), q, atol=1e-3)

    def test_zero(self):
        np.testing.assert_array_equal(spectral_normalize(np.zeros((2, 3))), np.zeros((2, 3)))

    def test_norm_bound_and_idempotent(self, rng):
        for _ in range(10):
            w = rng.normal(size=(6, 4))
            once = spectral_normalize(w)
            assert np.linalg.norm(once, 2) <= 1 + 1e-3
            np.testing.assert_allclose(spectral_normalize(once), once, atol=1e-3)

    def test_state_persists(self, rng):
        w = rng.normal(size=(5, 3))
        state = SpectralState()
        spectral_normalize(w, state)
        first = state.u.copy()
        spectral_normalize(w, state)
        assert state.u is not None and first.shape == (5,)

    def test_sn_decoder_read_only_evaluation(self, rng):
        _, dec = make_models(2, 2, "mean", rng, hidden=(4,), spectral_norm=True)
        dec.effective_weights()
        u = [l.sn_u.copy() for l in dec.layers]
        dec.effective_weights(advance=False)
        for layer, before in zip(dec.layers, u):
            np.testing.assert_array_equal(layer.sn_u, before)


class TestEncoder:
    def test_diagonal_head(self, rng):
        enc, _ = make_models(3, 2, "diagonal", rng, hidden=(5,))
        x = rng.normal(size=(4, 3))
        out = encode(enc, x)
        raw = forward(enc.net, x).value
        np.testing.assert_allclose(out.posterior.mean.value, raw[:, :2])
        sig = np.diagonal(out.posterior.scale.value, axis1=1, axis2=2)
        np.testing.assert_allclose(sig, np.maximum(np.exp(raw[:, 2:] / 2), 1e-6))
        assert out.posterior.kind is PosteriorKind.DIAGONAL

    def test_full_head_lower_triangular(self, rng):
        enc, _ = make_models(3, 3, "full", rng, hidden=(5,))
        L = encode(enc, rng.normal(size=(2, 3))).posterior.scale.value
        assert L.shape == (2, 3, 3)
        np.testing.assert_array_equal(np.triu(L, 1), 0.0)
        assert np.all(np.diagonal(L, axis1=1, axis2=2) > 0)

    def test_head_widths(self):
        assert Encoder(None, 4, "mean").head_width() == 4
        assert Encoder(None, 4, "diagonal").head_width() == 8
        assert Encoder(None, 4, "full").head_width() == 14


class TestAdam:
    def test_zero_gradient(self):
        p = ad.Node(np.array([1.0, -2.0]))
        adam_step([p], [np.zeros(2)], AdamState(), 0.1)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_first_step_is_lr_sign(self):
        p = ad.Node(np.array([0.0, 0.0]))
        adam_step([p], [np.array([3.0, -0.5])], AdamState(), 0.01)
        np.testing.assert_allclose(p.value, [-0.01, 0.01], rtol=1e-6)

    def test_constant_gradient_descends(self):
        p = ad.Node(np.array([0.0]))
        state = AdamState()
        trace = []
        for _ in range(50):
            adam_step([p], [np.array([2.0])], state, 0.01)
            trace.append(p.value[0])
        assert np.all(np.diff(trace) < 0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            adam_step([ad.Node(np.zeros(2))], [np.zeros(3)], AdamState(), 0.1)


class TestCheckpoint:
    def test_round_trip(self, rng, tmp_path):
        enc, dec = make_models(3, 2, "full", rng, hidden=(4, 5))
        path = tmp_path / "m.uae1"
        save_checkpoint(path, [enc.net, dec], {"latent_dim": 2, "kind": "full"})
        nets, meta = load_checkpoint(path)
        assert meta == {"kind": "full", "latent_dim": "2"}
        for a, b in zip([enc.net, dec], nets):
            for la, lb in zip(a.layers, b.layers):
                np.testing.assert_array_equal(la.weight.value, lb.weight.value)
                np.testing.assert_array_equal(la.bias.value, lb.bias.value)
                assert la.activation == lb.activation

    def test_header_layout(self, rng):
        _, dec = make_models(2, 2, "mean", rng, hidden=(3,))
        raw = checkpoint_bytes([dec], {})
        assert raw[:4] == b"UAE1"
        assert int.from_bytes(raw[4:8], "little") == 1

    def test_spectral_norm_baked_in(self, rng, tmp_path):
        _, dec = make_models(2, 2, "mean", rng, hidden=(6,), spectral_norm=True)
        save_checkpoint(tmp_path / "sn.uae1", [dec], {})
        (net,), _ = load_checkpoint(tmp_path / "sn.uae1")
        for layer in net.layers:
            assert np.linalg.norm(layer.weight.value, 2) <= 1 + 1e-3

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(BadMagic):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, rng, tmp_path):
        _, dec = make_models(2, 2, "mean", rng, hidden=(3,))
        (tmp_path / "t").write_bytes(checkpoint_bytes([dec], {})[:-5])
        with pytest.raises(TruncatedFile):
            load_checkpoint(tmp_path / "t")

    def test_version(self, rng, tmp_path):
        _, dec = make_models(2, 2, "mean", rng, hidden=(3,))
        raw = bytearray(checkpoint_bytes([dec], {}))
        raw[4] = 9
        (tmp_path / "v").write_bytes(bytes(raw))
        with pytest.raises(IncompatibleCheckpoint):
            load_checkpoint(tmp_path / "v")
