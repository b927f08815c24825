import numpy as np
import pytest

from pdecast.core_math import SeededRng
from pdecast import network as nw
from pdecast.implicit_block import TriangularBlock
from pdecast.pde_data import Field1D, TWO_PI, InitialConditionConfig, sample_initial_condition
from pdecast.stability_lab import certified_bound


@pytest.fixture
def small_net():
    return nw.build_forecast_net("implicit_relu", 16, 8, 3, rng=SeededRng(1))


@pytest.fixture
def field16():
    return sample_initial_condition(InitialConditionConfig(max_mode=3), SeededRng(2), 16)


def identity_linear_net(kind="implicit_relu", blocks=0):
    g = 6
    net = nw.build_forecast_net(kind, g, g, blocks, rng=SeededRng(3))
    net.enc_weight[...] = np.eye(g)
    net.enc_bias[...] = 0.0
    net.dec_weight[...] = np.eye(g)
    net.dec_bias[...] = 0.0
    return net


class TestForwardTrain:
    def test_identity_composition(self):
        net = identity_linear_net(blocks=1)
        block = net.blocks[0]
        block.coupling[...] = 0.0
        block.bias[...] = -1.0  # gates stay shut: block acts as identity
        u = Field1D(6, TWO_PI, np.array([0.3, -1.2, 0.0, 2.0, -0.4, 1.1]))
        out = nw.forward_train(net, u)
        np.testing.assert_array_equal(out.values, u.values)

    def test_no_blocks_is_linear_model(self):
        net = nw.build_forecast_net("implicit_relu", 10, 4, 0, rng=SeededRng(4))
        u = Field1D(10, TWO_PI, SeededRng(5).generator().uniform(-1, 1, 10))
        out = nw.forward_train(net, u)
        expected = net.dec_weight @ (net.enc_weight @ u.values[:, None]) + net.dec_bias[:, None]
        np.testing.assert_allclose(out.values, expected[:, 0], atol=1e-14)

    def test_grid_mismatch_rejected(self, small_net):
        with pytest.raises(ValueError):
            nw.forward_train(small_net, Field1D(8, TWO_PI, np.zeros(8)))


class TestForecastModes:
    def test_latent_single_step_equals_forward_train(self, small_net, field16):
        one = nw.forward_train(small_net, field16)
        rolled = nw.forecast_latent(small_net, field16, 1)
        np.testing.assert_array_equal(one.values, rolled.fields[0].values)

    def test_autoregressive_single_step_equals_forward_train(self, small_net, field16):
        one = nw.forward_train(small_net, field16)
        rolled = nw.forecast_autoregressive(small_net, field16, 1)
        np.testing.assert_array_equal(one.values, rolled.fields[0].values)

    def test_modes_agree_when_decoder_inverts_encoder(self, field16):
        net = identity_linear_net(blocks=2)
        for block in net.blocks:
            block.bias[...] = -2.0  # identity blocks
            block.coupling[...] = 0.0
        u = Field1D(6, TWO_PI, np.array([0.5, -0.1, 0.8, 0.0, -0.3, 0.2]))
        a = nw.forecast_latent(net, u, 7)
        b = nw.forecast_autoregressive(net, u, 7)
        for fa, fb in zip(a.fields, b.fields):
            np.testing.assert_allclose(fa.values, fb.values, atol=1e-12)

    def test_latent_continuation_is_stateless(self, small_net, field16):
        whole = nw.forecast_latent(small_net, field16, 10)
        first = nw.forecast_latent(small_net, field16, 6)
        rest = nw.forecast_from_latent(small_net, first.final_latent, 4)
        np.testing.assert_array_equal(
            whole.fields[5].values, first.fields[5].values
        )
        for i in range(4):
            np.testing.assert_array_equal(whole.fields[6 + i].values, rest.fields[i].values)

    def test_latent_norms_within_certified_bound(self, small_net, field16):
        result = nw.forecast_latent(small_net, field16, 2000)
        bound = certified_bound(small_net.blocks, nw.encode(small_net, field16))
        assert np.max(result.latent_norms) <= np.max(bound)
        assert not result.diverged()

    def test_divergence_poisons_remaining_steps(self):
        net = nw.build_forecast_net("explicit_relu", 6, 6, 1, rng=SeededRng(6))
        net.blocks[0].weight[...] = 100.0 * np.eye(6)
        net.blocks[0].bias[...] = 1.0
        u = Field1D(6, TWO_PI, np.full(6, 1e305))
        result = nw.forecast_autoregressive(net, u, 5)
        assert result.diverged()
        tail = np.concatenate([f.values for f in result.fields[-2:]])
        assert np.all(np.isinf(tail))

    def test_steps_validation(self, small_net, field16):
        with pytest.raises(ValueError):
            nw.forecast_latent(small_net, field16, 0)


class TestProjection:
    def test_clamps_both_sides_and_counts(self):
        net = nw.build_forecast_net("implicit_relu", 8, 4, 1, rng=SeededRng(7))
        block = net.blocks[0]
        block.diag_neg[...] = np.array([1.7, 0.001, 0.5, 0.25])
        clipped = nw.project_weights(net, 0.01)
        np.testing.assert_array_equal(block.diag_neg, [1.0, 0.01, 0.5, 0.25])
        assert clipped == 2

    def test_idempotent(self):
        net = nw.build_forecast_net("implicit_relu", 8, 4, 2, rng=SeededRng(8))
        assert nw.project_weights(net, 0.01) == 0
        before = [b.diag_neg.copy() for b in net.blocks]
        assert nw.project_weights(net, 0.01) == 0
        for a, b in zip(before, net.blocks):
            np.testing.assert_array_equal(a, b.diag_neg)

    def test_explicit_kind_warns_and_noops(self):
        net = nw.build_forecast_net("explicit_relu", 8, 4, 1, rng=SeededRng(9))
        with pytest.warns(UserWarning):
            assert nw.project_weights(net, 0.01) == 0

    def test_constraint_holds_after_build(self):
        for seed in range(5):
            net = nw.build_forecast_net("implicit_relu", 12, 6, 3, rng=SeededRng(seed))
            for block in net.blocks:
                assert np.all(block.diag_neg >= 0.01) and np.all(block.diag_neg <= 1.0)


class TestCheckpoint:
    @pytest.mark.parametrize("kind", nw.KINDS)
    def test_round_trip_bitwise_outputs(self, tmp_path, kind, field16):
        net = nw.build_forecast_net(kind, 16, 8, 2, rng=SeededRng(10))
        path = tmp_path / "model.txt"
        nw.save_checkpoint(net, path)
        loaded = nw.load_checkpoint(path)
        assert loaded.kind == net.kind
        assert loaded.delta == net.delta
        assert loaded.seed == net.seed
        original = nw.forward_train(net, field16)
        restored = nw.forward_train(loaded, field16)
        np.testing.assert_array_equal(original.values, restored.values)

    def test_save_load_save_identical_bytes(self, tmp_path):
        net = nw.build_forecast_net("implicit_relu", 10, 5, 2, rng=SeededRng(11))
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        nw.save_checkpoint(net, p1)
        nw.save_checkpoint(nw.load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_section_rejected(self, tmp_path):
        net = nw.build_forecast_net("implicit_relu", 10, 5, 1, rng=SeededRng(12))
        path = tmp_path / "model.txt"
        nw.save_checkpoint(net, path)
        text = path.read_text()
        trimmed = text[: text.index("[decoder.bias]")]
        path.write_text(trimmed)
        with pytest.raises(nw.CheckpointFormatError):
            nw.load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "model.txt"
        path.write_text("#pdecast-model v999\n")
        with pytest.raises(nw.CheckpointFormatError):
            nw.load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        net = nw.build_forecast_net("implicit_relu", 10, 5, 1, rng=SeededRng(13))
        path = tmp_path / "model.txt"
        nw.save_checkpoint(net, path)
        lines = path.read_text().splitlines()
        start = lines.index("[encoder.bias]")
        lines[start + 1] = "0 0 0"  # wrong length
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(nw.CheckpointFormatError):
            nw.load_checkpoint(path)


class TestBuildValidation:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            nw.build_forecast_net("fourier", 8, 4, 1)

    def test_bad_delta_rejected(self):
        with pytest.raises(ValueError):
            nw.build_forecast_net("implicit_relu", 8, 4, 1, delta=0.0)

    def test_implicit_blocks_are_triangular(self):
        net = nw.build_forecast_net("implicit_relu", 8, 4, 2, rng=SeededRng(14))
        for block in net.blocks:
            assert isinstance(block, TriangularBlock)
            assert np.all(np.triu(block.coupling) == 0.0)
