import json
import math

import numpy as np
import pytest
import torch

from latentac import (AdamMoments, DropoutConfig, EpisodeStore, GroupWeights,
                      LossWeights, ModelState, OptimConfig, ValueBins,
                      apply_modality_dropout, collate_windows, load_checkpoint,
                      lr_at, optimizer_step, parse_config_text, save_checkpoint,
                      train)
from latentac.data import Window
from latentac.envs import chain_fixture, make_behavior_dataset
from latentac.training import clip_grad_norm, mask_goal_rows
from latentac.workflows import build_fixture_model, prepare_store

from test_data import make_episode


class TestLrSchedule:
    def full_scale(self):
        from latentac.presets import SCALE_OPTIMIZERS
        return SCALE_OPTIMIZERS["XXS"]

    def test_initial_rate(self):
        assert lr_at(0, self.full_scale()) == pytest.approx(1e-6)

    def test_peak_at_warmup_end(self):
        assert lr_at(15_000, self.full_scale()) == pytest.approx(1e-4)

    def test_cosine_midpoint(self):
        cfg = self.full_scale()
        mid = (cfg.warmup_steps + cfg.decay_steps) // 2
        assert lr_at(mid, cfg) == pytest.approx((cfg.lr_peak + cfg.lr_end) / 2,
                                                rel=1e-3)

    def test_constant_after_decay(self):
        cfg = self.full_scale()
        assert lr_at(cfg.decay_steps, cfg) == cfg.lr_end
        assert lr_at(cfg.decay_steps + 10_000, cfg) == cfg.lr_end

    def test_continuity_at_boundaries(self):
        cfg = OptimConfig(lr_init=1e-5, lr_peak=1e-3, lr_end=1e-4,
                          warmup_steps=100, decay_steps=1000)
        assert lr_at(99, cfg) == pytest.approx(lr_at(100, cfg), rel=2e-2)
        assert lr_at(999, cfg) == pytest.approx(lr_at(1000, cfg), rel=2e-2)

    def test_validation(self):
        with pytest.raises(ValueError):
            OptimConfig(lr_init=1.0, lr_peak=0.1)
        with pytest.raises(ValueError):
            OptimConfig(warmup_steps=10, decay_steps=10)
        with pytest.raises(ValueError):
            lr_at(-1, OptimConfig())


class TestOptimizerStep:
    def _setup(self, value=1.0):
        p = torch.tensor([value], dtype=torch.float64)
        return {"p": p}, AdamMoments()

    def test_zero_gradients_zero_decay_leave_parameters(self):
        params, moments = self._setup()
        cfg = OptimConfig(weight_decay=0.0)
        ok = optimizer_step(params, {"p": torch.zeros(1, dtype=torch.float64)},
                            moments, 0, cfg, lr=0.1)
        assert ok
        assert params["p"].item() == 1.0

    def test_single_step_from_zero_moments(self):
        params, moments = self._setup(0.0)
        g = torch.tensor([0.25], dtype=torch.float64)
        cfg = OptimConfig(weight_decay=0.0, eps=1e-8)
        optimizer_step(params, {"p": g.clone()}, moments, 0, cfg, lr=0.01)
        # bias-corrected moments reduce to g and g^2 on the first step
        expected = -0.01 * 0.25 / (0.25 + 1e-8)
        assert params["p"].item() == pytest.approx(expected, rel=1e-12)
        assert abs(params["p"].item() - (-0.01)) < 1e-8

    def test_decay_only_shrinks_multiplicatively(self):
        params, moments = self._setup(2.0)
        cfg = OptimConfig(weight_decay=0.05)
        optimizer_step(params, {"p": torch.zeros(1, dtype=torch.float64)},
                       moments, 0, cfg, lr=0.1)
        assert params["p"].item() == pytest.approx(2.0 * (1 - 0.1 * 0.05))

    def test_non_finite_gradient_rejected_without_mutation(self):
        params, moments = self._setup(1.5)
        cfg = OptimConfig()
        ok = optimizer_step(params, {"p": torch.tensor([float("nan")]).double()},
                            moments, 0, cfg, lr=0.1)
        assert not ok
        assert params["p"].item() == 1.5
        assert not moments.m  # untouched

    def test_defaults_match_published_table(self):
        cfg = OptimConfig()
        assert (cfg.beta1, cfg.beta2, cfg.weight_decay) == (0.9, 0.95, 1e-3)


def test_clip_grad_norm_scales_in_place():
    g = {"a": torch.tensor([3.0, 4.0], dtype=torch.float64)}
    norm = clip_grad_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert torch.linalg.norm(g["a"]).item() == pytest.approx(1.0)
    g2 = {"a": torch.tensor([0.3, 0.4], dtype=torch.float64)}
    assert clip_grad_norm(g2, 1.0) == pytest.approx(0.5)
    assert g2["a"][0].item() == pytest.approx(0.3)


class TestModalityDropout:
    def _batch(self, toy_spec, n):
        from conftest import random_observations
        from latentac import pad_batch
        rng = np.random.default_rng(0)
        return pad_batch(toy_spec, random_observations(toy_spec, n, rng))

    def test_probability_one_is_identity(self, toy_spec):
        batch = self._batch(toy_spec, 6)
        out = apply_modality_dropout(batch, DropoutConfig(1.0, 1.0),
                                     np.random.default_rng(0))
        assert torch.equal(out.goal_image_mask, batch.goal_image_mask)
        assert torch.equal(out.text_mask, batch.text_mask)

    def test_probability_zero_masks_all_goals(self, toy_spec):
        batch = self._batch(toy_spec, 6)
        out = apply_modality_dropout(batch, DropoutConfig(0.0, 0.0),
                                     np.random.default_rng(0))
        assert not out.goal_image_mask.any()
        assert not out.text_mask.any()
        assert (out.goal_images == 0).all()
        assert (out.text == 0).all()
        # observation modalities untouched
        assert torch.equal(out.proprio_mask, batch.proprio_mask)
        assert torch.equal(out.image_mask, batch.image_mask)

    def test_keep_frequencies_within_three_sigma(self, toy_spec):
        n = 10_000
        batch = self._batch(toy_spec, 8)
        big = type(batch)(*(t.repeat_interleave(n // 8, dim=0)
                            for t in (batch.proprio, batch.proprio_mask,
                                      batch.images, batch.image_mask,
                                      batch.goal_images, batch.goal_image_mask,
                                      batch.text, batch.text_mask)))
        cfg = DropoutConfig(p_vision_goal=0.99, p_language_goal=0.9)
        out = apply_modality_dropout(big, cfg, np.random.default_rng(42))
        kept_v = (out.goal_image_mask.any(dim=1)).float().mean().item()
        kept_l = (out.text_mask.any(dim=1)).float().mean().item()
        for kept, p in ((kept_v, 0.99), (kept_l, 0.9)):
            sigma = math.sqrt(p * (1 - p) / n)
            assert abs(kept - p) < 3 * sigma + 1e-9

    def test_invalid_probability_rejected(self):
        with pytest.raises(ValueError):
            DropoutConfig(p_vision_goal=1.5)


class TestCollate:
    def test_padding_and_terminal_flags(self, toy_spec):
        rng = np.random.default_rng(1)
        ep = make_episode(rng, steps=2)
        windows = [Window(ep, 0, 4, "g0")]
        batch = collate_windows(windows, toy_spec)
        assert batch.valid.tolist() == [True, True, False, False]
        # padded rows repeat the final transition
        torch.testing.assert_close(batch.actions[2], batch.actions[1])
        torch.testing.assert_close(batch.rewards[3], batch.rewards[1])
        assert batch.terminals.tolist() == [False, True, True, True]

    def test_window_level_dropout_consistent_across_time(self, toy_spec):
        rng = np.random.default_rng(2)
        eps = [make_episode(rng, steps=4, with_images=True) for _ in range(30)]
        windows = [Window(ep, 0, 3, "g0") for ep in eps]
        batch = collate_windows(windows, toy_spec,
                                dropout=DropoutConfig(0.5, 0.5),
                                rng=np.random.default_rng(3))
        text_kept = batch.obs.text_mask.any(dim=1).reshape(30, 3)
        next_kept = batch.next_obs.text_mask.any(dim=1).reshape(30, 3)
        for w in range(30):
            assert text_kept[w].unique().numel() == 1
            assert torch.equal(text_kept[w], next_kept[w])
        assert 0 < text_kept.any(dim=1).float().mean().item() < 1

    def test_group_loss_map_wires_coefficients(self, toy_spec):
        rng = np.random.default_rng(4)
        ep_a = make_episode(rng, group="good")
        ep_b = make_episode(rng, group="bad")
        windows = [Window(ep_a, 0, 2, "good"), Window(ep_b, 0, 2, "bad")]
        batch = collate_windows(windows, toy_spec,
                                group_loss_map={"good": (0.9, 1.0),
                                                "bad": (0.0, 50.0)})
        assert batch.alphas.tolist() == [0.9, 0.9, 0.0, 0.0]
        assert batch.betas.tolist() == [1.0, 1.0, 50.0, 50.0]

    def test_unknown_group_in_map_errors(self, toy_spec):
        rng = np.random.default_rng(5)
        ep = make_episode(rng, group="mystery")
        with pytest.raises(ValueError):
            collate_windows([Window(ep, 0, 2, "mystery")], toy_spec,
                            group_loss_map={"other": (1.0, 0.0)})


class TestConfigParsing:
    def test_basic_and_comments(self):
        text = """
        # a comment
        steps = 100
        env = chain   # trailing comment
        lr_peak = 3e-3
        """
        cfg = parse_config_text(text)
        assert cfg == {"steps": "100", "env": "chain", "lr_peak": "3e-3"}

    def test_malformed_line_errors(self):
        with pytest.raises(ValueError, match="line 1"):
            parse_config_text("not a key value pair")


def quick_setup(steps=0, seed=3):
    fx = chain_fixture()
    store = prepare_store(fx, 60, seed)
    torch.manual_seed(seed)
    state = ModelState.create(build_fixture_model(fx))
    weights = LossWeights(alpha=0.5, beta=1.0, eta=0.1, n_samples=3,
                          target_period=10, gamma=fx.mdp.gamma)
    optim = OptimConfig(batch_size=6, traj_len=2)
    return fx, store, state, weights, optim


class TestTrainLoop:
    def test_zero_steps_leave_model_unchanged(self):
        fx, store, state, weights, optim = quick_setup()
        before = {k: v.clone() for k, v in state.model.state_dict().items()}
        metrics = train(state, store, fx.modality_spec, weights, optim,
                        fx.value_bins, 0, seed=0)
        assert metrics == []
        after = state.model.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_fixed_seed_bit_reproducible(self):
        runs = []
        for _ in range(2):
            fx, store, state, weights, optim = quick_setup()
            metrics = train(state, store, fx.modality_spec, weights, optim,
                            fx.value_bins, 5, seed=11)
            runs.append((metrics, {k: v.clone() for k, v in
                                   state.model.state_dict().items()}))
        assert runs[0][0] == runs[1][0]
        assert all(torch.equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])

    def test_metrics_schema_and_jsonl_sink(self, tmp_path):
        fx, store, state, weights, optim = quick_setup()
        path = tmp_path / "metrics.jsonl"
        metrics = train(state, store, fx.modality_spec, weights, optim,
                        fx.value_bins, 3, seed=0, metrics_path=str(path))
        assert len(metrics) == 3
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert lines == metrics
        for record in lines:
            assert set(record) == {"step", "loss", "rl_term", "bc_term",
                                   "td_term", "lr", "grad_norm"}

    def test_non_finite_loss_aborts_with_diagnostics(self):
        fx, store, state, weights, optim = quick_setup()
        with torch.no_grad():
            state.model.policy_head.weight.fill_(float("nan"))
        with pytest.raises(RuntimeError, match="non-finite loss"):
            train(state, store, fx.modality_spec, weights, optim,
                  fx.value_bins, 1, seed=0)

    def test_v_objective_runs(self):
        fx, store, state, weights, optim = quick_setup()
        metrics = train(state, store, fx.modality_spec, weights, optim,
                        fx.value_bins, 3, seed=2, objective="v")
        assert all(math.isfinite(m["loss"]) for m in metrics)

    def test_target_updates_respect_period(self):
        fx, store, state, weights, optim = quick_setup()
        train(state, store, fx.modality_spec, weights, optim, fx.value_bins,
              9, seed=4)
        assert state.step_counter == 9
        # period is 10: target still equals the step-0 snapshot, not theta
        diffs = [not torch.equal(pm, pt) for pm, pt in
                 zip(state.model.parameters(), state.target.parameters())]
        assert any(diffs)
        train(state, store, fx.modality_spec, weights, optim, fx.value_bins,
              1, seed=5)
        assert state.step_counter == 10
        assert all(torch.equal(pm, pt) for pm, pt in
                   zip(state.model.parameters(), state.target.parameters()))


class TestCheckpointing:
    def test_resume_is_bit_identical_to_continuous_run(self, tmp_path):
        fx, store, state, weights, optim = quick_setup()
        train(state, store, fx.modality_spec, weights, optim, fx.value_bins,
              4, seed=21)
        # NOTE: train() seeds its own generators, so resuming with the same
        # seed and step count is reproducible through the checkpoint
        moments = AdamMoments()
        path = tmp_path / "ck.ckpt"
        save_checkpoint(str(path), state, moments)
        loaded = load_checkpoint(str(path))
        m1 = train(state, store, fx.modality_spec, weights, optim,
                   fx.value_bins, 3, seed=77)
        m2 = train(loaded.state, store, fx.modality_spec, weights, optim,
                   fx.value_bins, 3, seed=77)
        assert m1 == m2
        for k, v in state.model.state_dict().items():
            assert torch.equal(v, loaded.state.model.state_dict()[k])

    def test_checkpoint_preserves_everything(self, tmp_path):
        fx, store, state, weights, optim = quick_setup()
        moments = AdamMoments()
        gen = torch.Generator().manual_seed(5)
        rng = np.random.default_rng(6)
        gen.initial_seed()
        rng.random(3)
        state.step_counter = 42
        path = tmp_path / "ck.ckpt"
        save_checkpoint(str(path), state, moments, torch_generator=gen,
                        numpy_rng=rng, extra={"note": "x"})
        loaded = load_checkpoint(str(path))
        assert loaded.state.step_counter == 42
        assert loaded.extra == {"note": "x"}
        assert torch.equal(loaded.torch_generator.get_state(), gen.get_state())
        assert loaded.numpy_rng.random(4).tolist() == rng.random(4).tolist()

    def test_truncated_checkpoint_rejected(self, tmp_path):
        fx, store, state, weights, optim = quick_setup()
        path = tmp_path / "ck.ckpt"
        save_checkpoint(str(path), state)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 16])
        with pytest.raises(ValueError, match="checksum|corrupt"):
            load_checkpoint(str(path))

    def test_version_mismatch_rejected(self, tmp_path):
        fx, store, state, weights, optim = quick_setup()
        path = tmp_path / "ck.ckpt"
        save_checkpoint(str(path), state)
        raw = path.read_bytes()
        patched = raw.replace(b'"version": 1', b'"version": 9', 1)
        # manifest length unchanged by same-length replacement
        path.write_bytes(patched)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(str(path))

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"garbage-file-contents")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))
