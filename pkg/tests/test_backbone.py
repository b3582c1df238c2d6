import numpy as np
import pytest
import torch

from latentac import (ArchConfig, LatentAttentionModel, ValueBins, attention,
                      greedy_action_indices, load_params, pad_batch, q_value,
                      sample_action_indices, save_params)
from latentac.backbone import AttentionBlock, apply_params, log_prob_of_indices

from conftest import random_observations


class TestAttentionOperator:
    def test_single_key_returns_value_row(self):
        q = torch.randn(3, 4, dtype=torch.float64)
        k = torch.randn(1, 4, dtype=torch.float64)
        v = torch.randn(1, 6, dtype=torch.float64)
        out = attention(q, k, v)
        for row in out:
            torch.testing.assert_close(row, v[0])

    def test_identical_keys_give_mean_of_values(self):
        q = torch.randn(2, 4, dtype=torch.float64)
        k = torch.ones(5, 4, dtype=torch.float64)
        v = torch.randn(5, 3, dtype=torch.float64)
        out = attention(q, k, v)
        for row in out:
            torch.testing.assert_close(row, v.mean(dim=0))

    def test_two_key_sigmoid_weighting(self):
        q = torch.tensor([[0.0]], dtype=torch.float64)
        k = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
        v = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
        out = attention(q, k, v)
        torch.testing.assert_close(out, torch.tensor([[0.5]], dtype=torch.float64))

    def test_rows_sum_to_one_and_masked_keys_get_zero_weight(self):
        torch.manual_seed(0)
        n_k = 7
        q = torch.randn(4, 5, dtype=torch.float64)
        k = torch.randn(n_k, 5, dtype=torch.float64)
        mask = torch.tensor([True, False, True, True, False, True, True])
        weights = attention(q, k, torch.eye(n_k, dtype=torch.float64), mask)
        torch.testing.assert_close(weights.sum(-1),
                                   torch.ones(4, dtype=torch.float64),
                                   atol=1e-6, rtol=0)
        assert (weights[:, ~mask] == 0).all()

    def test_all_keys_masked_rejected(self):
        q = torch.zeros(1, 2, dtype=torch.float64)
        kv = torch.zeros(3, 2, dtype=torch.float64)
        with pytest.raises(ValueError):
            attention(q, kv, kv, torch.zeros(3, dtype=torch.bool))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            attention(torch.zeros(1, 3), torch.zeros(2, 4), torch.zeros(2, 4))


class TestAttentionBlock:
    def test_zero_output_projections_make_identity(self):
        torch.manual_seed(0)
        block = AttentionBlock(width=8, kv_width=6, n_heads=2, widening=2)
        torch.nn.init.zeros_(block.out_proj.weight)
        torch.nn.init.zeros_(block.out_proj.bias)
        torch.nn.init.zeros_(block.mlp_out.weight)
        torch.nn.init.zeros_(block.mlp_out.bias)
        x_q = torch.randn(2, 5, 8, dtype=torch.float64)
        x_kv = torch.randn(2, 9, 6, dtype=torch.float64)
        out = block(x_q, x_kv)
        torch.testing.assert_close(out, x_q)

    def test_masked_rows_do_not_affect_output(self):
        torch.manual_seed(1)
        block = AttentionBlock(width=8, kv_width=6, n_heads=2, widening=1)
        x_q = torch.randn(1, 4, 8, dtype=torch.float64)
        x_kv = torch.randn(1, 6, 6, dtype=torch.float64)
        mask = torch.tensor([[True, True, False, True, False, True]])
        out_a = block(x_q, x_kv, mask)
        poisoned = x_kv.clone()
        poisoned[0, 2] = 1e6
        poisoned[0, 4] = -42.0
        out_b = block(x_q, poisoned, mask)
        assert torch.equal(out_a, out_b)


class TestLatentStack:
    def test_no_self_blocks_returns_input_cross_attention(self, toy_spec):
        arch = ArchConfig(n_latents=3, latent_dim=16, n_blocks=0, widening=1,
                          n_action_bins=5, n_value_bins=11, n_heads=4)
        torch.manual_seed(0)
        model = LatentAttentionModel(toy_spec, arch)
        rng = np.random.default_rng(0)
        batch = pad_batch(toy_spec, random_observations(toy_spec, 2, rng))
        tokens = model.encoder.assemble_input(batch)
        z = model.encode_latents(tokens)
        expected = model.input_xattn(model.latents.expand(2, -1, -1),
                                     tokens.embeddings, tokens.mask)
        torch.testing.assert_close(z, expected)

    def test_output_shape(self, toy_model, obs_batch):
        z = toy_model.encode_observations(obs_batch)
        assert z.shape == (len(obs_batch), 3, 16)

    def test_permuting_masked_rows_never_changes_output(self, toy_spec, toy_model):
        rng = np.random.default_rng(5)
        batch = pad_batch(toy_spec, random_observations(toy_spec, 3, rng, full=False))
        z_a = toy_model.encode_observations(batch)
        shuffled = batch.clone()
        # swap a masked text slot's content with junk and reorder padded proprio
        shuffled.proprio[~shuffled.proprio_mask] = 55.5
        shuffled.text[~shuffled.text_mask] = 13
        z_b = toy_model.encode_observations(shuffled)
        assert torch.equal(z_a, z_b)


class TestDecoders:
    def test_policy_logit_shape_and_determinism(self, toy_model, obs_batch):
        z = toy_model.encode_observations(obs_batch)
        a = toy_model.decode_policy(z)
        b = toy_model.decode_policy(z)
        assert a.shape == (len(obs_batch), 2, 5)
        assert torch.equal(a, b)

    def test_decode_q_deterministic(self, toy_model, obs_batch):
        z = toy_model.encode_observations(obs_batch)
        actions = torch.zeros(len(obs_batch), 2, dtype=torch.float64)
        assert torch.equal(toy_model.decode_q(z, actions),
                           toy_model.decode_q(z, actions))

    def test_distinct_actions_distinct_value_logits(self, toy_model, obs_batch):
        z = toy_model.encode_observations(obs_batch)
        q0 = toy_model.decode_q(z, torch.full((4, 2), -0.9, dtype=torch.float64))
        q1 = toy_model.decode_q(z, torch.full((4, 2), 0.9, dtype=torch.float64))
        assert not torch.allclose(q0, q1)

    def test_cached_latent_matches_independent_forward_passes(self, toy_model, toy_spec):
        rng = np.random.default_rng(2)
        batch = pad_batch(toy_spec, random_observations(toy_spec, 2, rng))
        z = toy_model.encode_observations(batch)
        actions = torch.linspace(-1, 1, 20, dtype=torch.float64).reshape(2, 10, 1)
        actions = actions.expand(2, 10, 2).contiguous()
        batched = toy_model.decode_q(z, actions)
        for k in range(10):
            z_fresh = toy_model.encode_observations(batch)
            single = toy_model.decode_q(z_fresh, actions[:, k])
            # batched and one-at-a-time GEMMs may reduce in different order
            torch.testing.assert_close(batched[:, k], single, atol=1e-12, rtol=0)

    def test_value_head_shape(self, toy_model, obs_batch):
        z = toy_model.encode_observations(obs_batch)
        assert toy_model.decode_value(z).shape == (len(obs_batch), 11)


class TestQValue:
    def test_uniform_logits_give_midpoint(self):
        bins = ValueBins(0.0, 1.0, 3)
        assert q_value(torch.zeros(3, dtype=torch.float64), bins) == pytest.approx(0.5)

    def test_one_hot_mass_on_top_bin(self):
        bins = ValueBins(0.0, 1.0, 3)
        logits = torch.tensor([-1e9, -1e9, 0.0], dtype=torch.float64)
        assert q_value(logits, bins) == pytest.approx(1.0)

    def test_two_bin_softmax_expectation(self):
        bins = ValueBins(0.0, 1.0, 2)
        logits = torch.log(torch.tensor([1.0, 3.0], dtype=torch.float64))
        assert q_value(logits, bins) == pytest.approx(0.75)


class TestActionHelpers:
    def test_greedy_tie_breaks_to_lowest_bin(self):
        logits = torch.tensor([[[1.0, 3.0, 3.0, 0.0]]], dtype=torch.float64)
        assert greedy_action_indices(logits).item() == 1

    def test_sampling_deterministic_given_generator(self, toy_model, obs_batch):
        z = toy_model.encode_observations(obs_batch)
        logits = toy_model.decode_policy(z)
        a = sample_action_indices(logits, 6, torch.Generator().manual_seed(9))
        b = sample_action_indices(logits, 6, torch.Generator().manual_seed(9))
        assert torch.equal(a, b)
        assert a.shape == (len(obs_batch), 6, 2)

    def test_log_prob_matches_manual_gather(self, toy_model, obs_batch):
        z = toy_model.encode_observations(obs_batch)
        logits = toy_model.decode_policy(z)
        idx = torch.tensor([[0, 4], [1, 1], [2, 0], [3, 3]])
        lp = log_prob_of_indices(logits, idx)
        manual = torch.log_softmax(logits, dim=-1)
        expected = (manual[torch.arange(4), 0, idx[:, 0]]
                    + manual[torch.arange(4), 1, idx[:, 1]])
        torch.testing.assert_close(lp, expected)


class TestGradientCorrectness:
    def test_analytic_gradients_match_finite_differences(self, toy_model, toy_spec):
        rng = np.random.default_rng(4)
        batch = pad_batch(toy_spec, random_observations(toy_spec, 2, rng))
        actions = torch.tensor([[0.3, -0.5], [-0.1, 0.9]], dtype=torch.float64)

        def scalar():
            z = toy_model.encode_observations(batch)
            pol = toy_model.decode_policy(z)
            qv = toy_model.decode_q(z, actions)
            return (pol.sin().sum() + qv.square().sum()) / pol.numel()

        loss = scalar()
        toy_model.zero_grad()
        loss.backward()
        params = dict(toy_model.named_parameters())
        grads = {k: p.grad.clone() for k, p in params.items() if p.grad is not None}
        prng = np.random.default_rng(0)
        names = sorted(grads)
        checked = 0
        for name in prng.permutation(names)[:12]:
            p = params[name]
            flat = p.detach().reshape(-1)
            i = int(prng.integers(flat.numel()))
            h = 1e-6 * max(1.0, abs(float(flat[i])))
            with torch.no_grad():
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(scalar())
                flat[i] = orig - h
                down = float(scalar())
                flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(grads[name].reshape(-1)[i])
            denom = max(abs(fd), abs(an), 1e-10)
            assert abs(fd - an) / denom < 1e-4, (name, i, fd, an)
            checked += 1
        assert checked == 12


class TestParamSerialization:
    def test_round_trip_is_byte_exact(self, toy_model, tmp_path):
        path = tmp_path / "params.bin"
        save_params(toy_model, path)
        arrays = load_params(path)
        apply_params(toy_model, arrays)
        second = tmp_path / "params2.bin"
        save_params(toy_model, second)
        assert path.read_bytes() == second.read_bytes()

    def test_payload_is_float32_little_endian(self, toy_model, tmp_path):
        path = tmp_path / "params.bin"
        save_params(toy_model, path)
        arrays = load_params(path)
        sd = toy_model.state_dict()
        assert set(arrays) == set(sd)
        for name, arr in arrays.items():
            assert arr.dtype == np.float32
            np.testing.assert_allclose(arr, sd[name].numpy().astype(np.float32))

    def test_corruption_detected(self, toy_model, tmp_path):
        path = tmp_path / "params.bin"
        save_params(toy_model, path)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_params(path)

    def test_truncation_detected(self, toy_model, tmp_path):
        path = tmp_path / "params.bin"
        save_params(toy_model, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ValueError, match="checksum"):
            load_params(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "params.bin"
        path.write_bytes(b"NOTAPARAMFILE----")
        with pytest.raises(ValueError, match="magic"):
            load_params(path)


def test_arch_config_validation():
    with pytest.raises(ValueError):
        ArchConfig(latent_dim=30, n_heads=4)
    with pytest.raises(ValueError):
        ArchConfig(n_latents=0)
    assert ArchConfig(latent_dim=32, query_dim=None).out_dim == 32
