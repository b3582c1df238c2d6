"""Offline actor-critic learning on a latent-attention backbone.

Desk-scale, fully testable implementation: multimodal token encoders, a
latent-bottleneck attention network with policy and distributional value
decoders, KL-regularized training objectives, group-weighted offline data
sampling, exact tabular oracles, evaluation with Wilson intervals, a
self-improvement loop, and scaling-law / FLOP accounting tools.
"""

from .backbone import (ArchConfig, AttentionBlock, LatentAttentionModel,
                       attention, greedy_action_indices, load_params,
                       log_prob_of_indices, sample_action_indices, save_params)
from .bins import ActionCodec, ValueBins, q_value
from .data import (EpisodeRecord, EpisodeStore, GroupWeights, read_store,
                   sample_windows, write_store)
from .encoders import (DEFAULT_GAINS, ModalitySpec, MultimodalEncoder,
                       Observation, ObservationBatch, TokenSequence,
                       multiscale_normalize, pad_batch, tokenize_task)
from .envs import (Fixture, PointMassEnv, TabularMDP, bandit_fixture,
                   chain_fixture, decisive_fixture, distributional_policy_evaluation,
                   empirical_policy, gridworld_fixture, make_behavior_dataset,
                   make_fixture, policy_evaluation, regularized_oracle,
                   success_probability, tune_epsilon_behavior, value_iteration)
from .evaluation import (EvalReport, TabularModelPolicy, evaluate, run_trials,
                         self_improve, wilson_interval)
from .flops import FlopModel, backward_flops, count_flops, update_flops
from .losses import (LossWeights, ModelState, TransitionBatch,
                     improvement_weights, loss_q, loss_v, maybe_update_target,
                     td_target_q, td_target_v)
from .presets import (FULL_MODALITY_SPEC, MODEL_SCALES, OBJECTIVE_PRESETS,
                      PUBLISHED_FLOPS, ObjectivePreset, get_preset)
from .scaling import (EnvelopePoint, IsoReturnGrid, PowerLawFit, ReturnProfile,
                      envelope, fit_power_laws, fit_return_profile,
                      iso_return_grid, load_profiles_dir)
from .training import (AdamMoments, Checkpoint, DropoutConfig, OptimConfig,
                       apply_modality_dropout, build_model, collate_windows,
                       load_checkpoint, load_config, lr_at, optimizer_step,
                       parse_config_text, save_checkpoint, train)

__version__ = "0.1.0"
